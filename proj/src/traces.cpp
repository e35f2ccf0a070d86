#include "masc/traces.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "masc/container.hpp"
#include "masc/rng.hpp"
#include "masc/tape.hpp"

namespace masc {

namespace {

constexpr char kTraceMagic[] = "MASCTRC1";

void append_u32(std::string& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.append(buf, 4);
}

std::uint32_t read_u32(const std::string& data, std::size_t offset,
                       const char* what) {
  if (offset + 4 > data.size()) {
    throw FormatError(std::string("truncated trace file at offset ") +
                      std::to_string(offset) + " (" + what + ")");
  }
  std::uint32_t v;
  std::memcpy(&v, data.data() + offset, 4);
  return v;
}

}  // namespace

std::size_t TraceDataset::count_label(int label) const {
  return std::size_t(std::count_if(
      traces.begin(), traces.end(),
      [label](const RoutingTrace& t) { return t.label == label; }));
}

void TraceDataset::validate() const {
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const RoutingTrace& t = traces[i];
    const Shape& s = t.logits.shape();
    if (s.size() != 3 || s[1] != layers || s[2] != experts || s[0] < 1) {
      throw ContractError("trace " + std::to_string(i) +
                          " shape does not match declared (L, E)");
    }
    if (t.label != 0 && t.label != 1) {
      throw ContractError("trace " + std::to_string(i) + " label not in {0, 1}");
    }
    if (!t.logits.all_finite()) {
      throw ContractError("trace " + std::to_string(i) + " has non-finite logits");
    }
  }
}

CollectResult collect_traces(const ToyMoEModel& model,
                             const std::vector<std::vector<std::size_t>>& prompts,
                             const TraceLabeler& labeler) {
  const std::size_t layers = model.config.num_layers;
  const std::size_t experts = model.config.experts_per_layer;
  CollectResult result;
  result.dataset.layers = layers;
  result.dataset.experts = experts;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    const auto& prompt = prompts[p];
    GateHook hook;
    ModelOutput out = model.forward(prompt, &hook);
    std::optional<int> label = labeler(out, prompt);
    if (!label) {
      ++result.skipped;
      continue;
    }
    RoutingTrace trace;
    trace.label = *label;
    trace.source = "prompt:" + std::to_string(p);
    trace.logits = Array(Shape{prompt.size(), layers, experts});
    for (std::size_t t = 0; t < prompt.size(); ++t) {
      for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t e = 0; e < experts; ++e) {
          trace.logits[(t * layers + l) * experts + e] = hook.captured[t][l][e];
        }
      }
    }
    result.dataset.traces.push_back(std::move(trace));
  }
  result.dataset.validate();
  return result;
}

std::pair<TraceDataset, TraceDataset> split(const TraceDataset& dataset,
                                            const SplitSpec& spec) {
  if (spec.train_fraction <= 0.0 || spec.train_fraction >= 1.0) {
    throw ContractError("split: train fraction must lie in (0, 1)");
  }
  for (int label : {0, 1}) {
    if (dataset.count_label(label) < 2) {
      throw ContractError("split: need at least 2 traces of label " +
                          std::to_string(label));
    }
  }
  TraceDataset train, val;
  train.layers = val.layers = dataset.layers;
  train.experts = val.experts = dataset.experts;
  Rng rng(spec.seed);
  for (int label : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < dataset.traces.size(); ++i) {
      if (dataset.traces[i].label == label) idx.push_back(i);
    }
    // Fisher-Yates with the dataset rng
    for (std::size_t i = idx.size(); i > 1; --i) {
      std::swap(idx[i - 1], idx[rng.next_below(i)]);
    }
    std::size_t n_train = std::size_t(
        std::floor(spec.train_fraction * double(idx.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      (i < n_train ? train : val).traces.push_back(dataset.traces[idx[i]]);
    }
  }
  return {std::move(train), std::move(val)};
}

void save_traces(const TraceDataset& dataset, const std::filesystem::path& path,
                 const std::string& convention) {
  dataset.validate();
  nlohmann::json header = {
      {"format_version", 1},
      {"layers", dataset.layers},
      {"experts", dataset.experts},
      {"count", dataset.traces.size()},
      {"creator", "masc"},
      {"convention", convention},
  };
  const std::string header_text = header.dump();

  std::string out;
  out.append(kTraceMagic, 8);
  append_u32(out, std::uint32_t(header_text.size()));
  out.append(header_text);
  for (const RoutingTrace& t : dataset.traces) {
    const Shape& s = t.logits.shape();
    append_u32(out, std::uint32_t(s[0]));
    append_u32(out, std::uint32_t(s[1]));
    append_u32(out, std::uint32_t(s[2]));
    append_u32(out, std::uint32_t(t.label));
    for (std::size_t i = 0; i < t.logits.size(); ++i) {
      float f = float(t.logits[i]);
      char buf[4];
      std::memcpy(buf, &f, 4);
      out.append(buf, 4);
    }
  }
  atomic_write_file(path, out);
}

TraceDataset load_traces(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string data = buf.str();

  if (data.size() < 8 || data.compare(0, 8, kTraceMagic, 8) != 0) {
    throw FormatError("bad magic at offset 0: expected MASCTRC1");
  }
  const std::uint32_t header_len = read_u32(data, 8, "header length");
  if (12 + std::size_t(header_len) > data.size()) {
    throw FormatError("truncated trace file at offset 12 (header)");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(data.substr(12, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid trace header JSON: " + std::string(e.what()));
  }
  if (header.value("format_version", 0) != 1) {
    throw FormatError("unsupported trace format version");
  }

  TraceDataset dataset;
  dataset.layers = header.at("layers").get<std::size_t>();
  dataset.experts = header.at("experts").get<std::size_t>();
  const std::size_t count = header.at("count").get<std::size_t>();

  std::size_t offset = 12 + header_len;
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t t_len = read_u32(data, offset, "trace length");
    const std::uint32_t t_layers = read_u32(data, offset + 4, "trace layers");
    const std::uint32_t t_experts = read_u32(data, offset + 8, "trace experts");
    const std::uint32_t label = read_u32(data, offset + 12, "trace label");
    offset += 16;
    if (t_layers != dataset.layers || t_experts != dataset.experts) {
      throw FormatError("trace " + std::to_string(i) +
                        " declares shape (" + std::to_string(t_layers) + ", " +
                        std::to_string(t_experts) +
                        ") but the header declares (" +
                        std::to_string(dataset.layers) + ", " +
                        std::to_string(dataset.experts) + ")");
    }
    const std::size_t values = std::size_t(t_len) * t_layers * t_experts;
    if (offset + values * 4 > data.size()) {
      throw FormatError("truncated trace " + std::to_string(i) + " at offset " +
                        std::to_string(offset));
    }
    RoutingTrace trace;
    trace.label = int(label);
    trace.logits = Array(Shape{t_len, dataset.layers, dataset.experts});
    for (std::size_t v = 0; v < values; ++v) {
      float f;
      std::memcpy(&f, data.data() + offset + v * 4, 4);
      trace.logits[v] = double(f);
    }
    offset += values * 4;
    dataset.traces.push_back(std::move(trace));
  }
  if (offset != data.size()) {
    throw FormatError("trailing bytes at offset " + std::to_string(offset));
  }
  dataset.validate();
  return dataset;
}

}  // namespace masc
