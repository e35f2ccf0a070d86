#include "masc/pipeline.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "masc/container.hpp"
#include "masc/tape.hpp"

namespace masc {

void PipelineConfig::reseed(std::uint64_t master) {
  seed = master;
  surrogate.seed = master ^ 0x9e3779b97f4a7c15ull;
  optimize.seed = master ^ 0x6a09e667f3bcc908ull;
  eval.seed = master ^ 0xbb67ae8584caa73bull;
  sweep.optimize = optimize;
  sweep.eval = eval;
}

void PipelineConfig::validate() const {
  if (layers == 0 || experts < 2 || experts % 2 != 0) {
    throw ContractError("pipeline: need a positive even expert count");
  }
  if (top_k == 0 || top_k > experts) {
    throw ContractError("pipeline: top_k out of range");
  }
  if (prompts_per_class == 0 || prompt_length < 3) {
    throw ContractError("pipeline: prompt settings out of range");
  }
  if (flip_set_size == 0 || flip_set_size > prompts_per_class) {
    throw ContractError("pipeline: flip set must fit inside one class");
  }
  if (tau < 0.0) throw ContractError("pipeline: tau must be >= 0");
  surrogate.validate();
}

namespace {

void reject_unknown_keys(const nlohmann::json& obj,
                         const std::set<std::string>& allowed,
                         const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      throw FormatError("config: unknown key \"" + key + "\" in " + where);
    }
  }
}

}  // namespace

PipelineConfig parse_pipeline_config(const std::string& json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config: invalid JSON: " + std::string(e.what()));
  }

  PipelineConfig cfg;
  try {
    reject_unknown_keys(doc,
                        {"layers", "experts", "top_k", "margin", "gate_noise",
                         "prompts_per_class", "prompt_length", "flip_set_size",
                         "tau", "seed", "surrogate", "optimize", "eval",
                         "sweep"},
                        "top level");
    cfg.layers = doc.value("layers", cfg.layers);
    cfg.experts = doc.value("experts", cfg.experts);
    cfg.top_k = doc.value("top_k", cfg.top_k);
    cfg.margin = doc.value("margin", cfg.margin);
    cfg.gate_noise = doc.value("gate_noise", cfg.gate_noise);
    cfg.prompts_per_class = doc.value("prompts_per_class", cfg.prompts_per_class);
    cfg.prompt_length = doc.value("prompt_length", cfg.prompt_length);
    cfg.flip_set_size = doc.value("flip_set_size", cfg.flip_set_size);
    cfg.tau = doc.value("tau", cfg.tau);
    cfg.reseed(doc.value("seed", cfg.seed));

    if (doc.contains("surrogate")) {
      const auto& s = doc["surrogate"];
      reject_unknown_keys(s,
                          {"embed_dim", "hidden_dim", "epochs", "lr",
                           "batch_size", "train_fraction", "seed"},
                          "surrogate");
      cfg.surrogate.embed_dim = s.value("embed_dim", cfg.surrogate.embed_dim);
      cfg.surrogate.hidden_dim = s.value("hidden_dim", cfg.surrogate.hidden_dim);
      cfg.surrogate.epochs = s.value("epochs", cfg.surrogate.epochs);
      cfg.surrogate.lr = s.value("lr", cfg.surrogate.lr);
      cfg.surrogate.batch_size = s.value("batch_size", cfg.surrogate.batch_size);
      cfg.surrogate.train_fraction =
          s.value("train_fraction", cfg.surrogate.train_fraction);
      cfg.surrogate.seed = s.value("seed", cfg.surrogate.seed);
    }
    if (doc.contains("optimize")) {
      const auto& o = doc["optimize"];
      reject_unknown_keys(o, {"lambda", "steps", "lr", "seed"}, "optimize");
      cfg.optimize.lambda = o.value("lambda", cfg.optimize.lambda);
      cfg.optimize.steps = o.value("steps", cfg.optimize.steps);
      cfg.optimize.lr = o.value("lr", cfg.optimize.lr);
      cfg.optimize.seed = o.value("seed", cfg.optimize.seed);
      cfg.sweep.optimize = cfg.optimize;
    }
    if (doc.contains("eval")) {
      const auto& e = doc["eval"];
      reject_unknown_keys(e, {"prompts", "prompt_length", "seed"}, "eval");
      cfg.eval.prompts = e.value("prompts", cfg.eval.prompts);
      cfg.eval.prompt_length = e.value("prompt_length", cfg.eval.prompt_length);
      cfg.eval.seed = e.value("seed", cfg.eval.seed);
      cfg.sweep.eval = cfg.eval;
    }
    if (doc.contains("sweep")) {
      const auto& w = doc["sweep"];
      reject_unknown_keys(w, {"lambdas", "alphas", "taus", "jobs"}, "sweep");
      if (w.contains("lambdas")) {
        cfg.sweep.lambdas = w["lambdas"].get<std::vector<double>>();
      }
      if (w.contains("alphas")) {
        cfg.sweep.alphas = w["alphas"].get<std::vector<double>>();
      }
      if (w.contains("taus")) {
        cfg.sweep.taus = w["taus"].get<std::vector<double>>();
      }
      cfg.sweep.jobs = w.value("jobs", cfg.sweep.jobs);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config: malformed value: " + std::string(e.what()));
  }
  cfg.validate();
  return cfg;
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return parse_pipeline_config(text);
}

PlantedFixture make_fixture(const PipelineConfig& config) {
  config.validate();
  MoEConfig mcfg;
  mcfg.num_layers = config.layers;
  mcfg.experts_per_layer = config.experts;
  mcfg.top_k = config.top_k;
  CircuitSpec spec;
  for (std::size_t e = 0; e < config.experts / 2; ++e) spec.set_a.push_back(e);
  for (std::size_t e = config.experts / 2; e < config.experts; ++e) {
    spec.set_b.push_back(e);
  }
  spec.margin = config.margin;
  spec.gate_noise = config.gate_noise;
  spec.seed = config.seed;
  return build_planted_fixture(mcfg, spec);
}

std::vector<std::vector<std::size_t>> behavior_prompts(
    const PlantedFixture& fixture, std::size_t per_class, std::size_t length,
    std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> prompts;
  prompts.reserve(2 * per_class);
  for (std::size_t i = 0; i < per_class; ++i) {
    prompts.push_back(fixture.behavior_prompt(false, length, seed * 2 + 2 * i));
    prompts.push_back(
        fixture.behavior_prompt(true, length, seed * 2 + 2 * i + 1));
  }
  return prompts;
}

TraceLabeler behavior_labeler(const PlantedFixture& fixture) {
  const std::size_t out_a = fixture.tokens.out_a;
  const std::size_t out_b = fixture.tokens.out_b;
  return [out_a, out_b](const ModelOutput& output,
                        std::span<const std::size_t>) -> std::optional<int> {
    const std::size_t last = output.tokens().back();
    if (last == out_a) return 0;
    if (last == out_b) return 1;
    return std::nullopt;
  };
}

TraceDataset flip_subset(const TraceDataset& dataset, int label,
                         std::size_t count) {
  TraceDataset out;
  out.layers = dataset.layers;
  out.experts = dataset.experts;
  for (const RoutingTrace& trace : dataset.traces) {
    if (trace.label == label && out.traces.size() < count) {
      out.traces.push_back(trace);
    }
  }
  if (out.traces.size() < count) {
    throw ContractError("flip_subset: not enough traces with label " +
                        std::to_string(label));
  }
  return out;
}

void write_manifest(
    const std::filesystem::path& artifact, const std::string& kind,
    const std::vector<std::pair<std::string, std::string>>& fields) {
  nlohmann::json doc;
  doc["artifact"] = artifact.filename().string();
  doc["kind"] = kind;
  doc["creator"] = "masc";
  for (const auto& [key, value] : fields) doc["params"][key] = value;
  std::filesystem::path path = artifact;
  path += ".manifest.json";
  atomic_write_file(path, doc.dump(2) + "\n");
}

}  // namespace masc
