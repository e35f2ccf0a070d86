#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "masc/container.hpp"
#include "masc/rng.hpp"
#include "masc/tape.hpp"
#include "masc/traces.hpp"

using namespace masc;

namespace {

PlantedFixture test_fixture() {
  MoEConfig cfg;
  cfg.num_layers = 4;
  cfg.experts_per_layer = 8;
  cfg.top_k = 2;
  CircuitSpec spec;
  spec.set_a = {0, 1};
  spec.set_b = {2, 3};
  spec.seed = 7;
  return build_planted_fixture(cfg, spec);
}

TraceLabeler behavior_labeler(const PlantedFixture& fx) {
  return [&fx](const ModelOutput& out, std::span<const std::size_t>)
             -> std::optional<int> {
    std::size_t last = out.tokens().back();
    if (last == fx.tokens.out_a) return 0;
    if (last == fx.tokens.out_b) return 1;
    return std::nullopt;
  };
}

// values pushed through float32 so file round-trips are exact
TraceDataset random_dataset(std::size_t count, std::size_t t_len,
                            std::uint64_t seed) {
  TraceDataset d;
  d.layers = 3;
  d.experts = 5;
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    RoutingTrace t;
    t.label = int(i % 2);
    t.logits = Array(Shape{t_len, d.layers, d.experts});
    for (std::size_t v = 0; v < t.logits.size(); ++v) {
      t.logits[v] = double(float(rng.uniform(-3.0, 3.0)));
    }
    d.traces.push_back(std::move(t));
  }
  return d;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("collect_traces labels fixture prompts by output token") {
  PlantedFixture fx = test_fixture();
  std::vector<std::vector<std::size_t>> prompts;
  for (std::uint64_t s = 0; s < 6; ++s) {
    prompts.push_back(fx.behavior_prompt(false, 10, s));
  }
  for (std::uint64_t s = 0; s < 6; ++s) {
    prompts.push_back(fx.behavior_prompt(true, 10, 100 + s));
  }
  CollectResult r = collect_traces(fx.model, prompts, behavior_labeler(fx));
  CHECK(r.skipped == 0);
  REQUIRE(r.dataset.traces.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(r.dataset.traces[i].label == (i < 6 ? 0 : 1));
    const Shape& s = r.dataset.traces[i].logits.shape();
    REQUIRE(s.size() == 3);
    CHECK(s[0] == 10);
    CHECK(s[1] == fx.model.config.num_layers);
    CHECK(s[2] == fx.model.config.experts_per_layer);
  }
  CHECK(r.dataset.count_label(0) == 6);
  CHECK(r.dataset.count_label(1) == 6);
}

TEST_CASE("collect_traces counts abstentions and tolerates empty input") {
  PlantedFixture fx = test_fixture();
  std::vector<std::vector<std::size_t>> prompts = {
      fx.behavior_prompt(false, 10, 0),
      fx.utility_prompt(false, 10, 1),  // resolves to out_u0, labeler abstains
      fx.behavior_prompt(true, 10, 2),
  };
  CollectResult r = collect_traces(fx.model, prompts, behavior_labeler(fx));
  CHECK(r.skipped == 1);
  CHECK(r.dataset.traces.size() == 2);

  CollectResult empty = collect_traces(fx.model, {}, behavior_labeler(fx));
  CHECK(empty.dataset.traces.empty());
  CHECK(empty.skipped == 0);
}

TEST_CASE("collect_traces records the raw pre-injection logits") {
  PlantedFixture fx = test_fixture();
  auto prompt = fx.behavior_prompt(false, 8, 3);
  GateHook hook;
  fx.model.forward(prompt, &hook);
  CollectResult r = collect_traces(fx.model, {prompt}, behavior_labeler(fx));
  const Array& logits = r.dataset.traces[0].logits;
  const std::size_t layers = fx.model.config.num_layers;
  const std::size_t experts = fx.model.config.experts_per_layer;
  for (std::size_t t = 0; t < prompt.size(); ++t) {
    for (std::size_t l = 0; l < layers; ++l) {
      for (std::size_t e = 0; e < experts; ++e) {
        CHECK(logits[(t * layers + l) * experts + e] == hook.captured[t][l][e]);
      }
    }
  }
}

TEST_CASE("split is stratified with the documented rounding") {
  TraceDataset d = random_dataset(100, 6, 1);
  SplitSpec spec;
  auto [train, val] = split(d, spec);
  CHECK(train.traces.size() == 80);
  CHECK(val.traces.size() == 20);
  CHECK(train.count_label(0) == 40);
  CHECK(train.count_label(1) == 40);
  CHECK(val.count_label(0) == 10);
  CHECK(val.count_label(1) == 10);

  TraceDataset small = random_dataset(10, 6, 2);
  auto [tr, va] = split(small, spec);
  CHECK(tr.count_label(0) == 4);
  CHECK(tr.count_label(1) == 4);
  CHECK(va.count_label(0) == 1);
  CHECK(va.count_label(1) == 1);
}

TEST_CASE("split partitions are seed-deterministic and disjoint") {
  TraceDataset d = random_dataset(30, 4, 3);
  SplitSpec spec;
  spec.seed = 42;
  auto [a_train, a_val] = split(d, spec);
  auto [b_train, b_val] = split(d, spec);
  REQUIRE(a_train.traces.size() == b_train.traces.size());
  for (std::size_t i = 0; i < a_train.traces.size(); ++i) {
    CHECK(a_train.traces[i].logits == b_train.traces[i].logits);
  }

  // every original trace appears exactly once across the two parts
  CHECK(a_train.traces.size() + a_val.traces.size() == d.traces.size());
  std::multiset<int> original, partitioned;
  auto key = [](const RoutingTrace& t) {
    return int(t.logits[0] * 1e6) ^ (t.label << 30);
  };
  for (const RoutingTrace& t : d.traces) original.insert(key(t));
  for (const RoutingTrace& t : a_train.traces) partitioned.insert(key(t));
  for (const RoutingTrace& t : a_val.traces) partitioned.insert(key(t));
  CHECK(original == partitioned);
}

TEST_CASE("split rejects missing classes and bad fractions") {
  TraceDataset d = random_dataset(10, 4, 4);
  for (RoutingTrace& t : d.traces) t.label = 0;
  CHECK_THROWS_AS(split(d, SplitSpec{}), ContractError);

  TraceDataset ok = random_dataset(10, 4, 5);
  SplitSpec bad;
  bad.train_fraction = 1.0;
  CHECK_THROWS_AS(split(ok, bad), ContractError);
}

TEST_CASE("trace files round-trip bit-exactly") {
  TraceDataset d = random_dataset(7, 5, 6);
  auto path = temp_path("masc_traces_roundtrip.bin");
  save_traces(d, path);
  TraceDataset loaded = load_traces(path);
  CHECK(loaded.layers == d.layers);
  CHECK(loaded.experts == d.experts);
  REQUIRE(loaded.traces.size() == d.traces.size());
  for (std::size_t i = 0; i < d.traces.size(); ++i) {
    CHECK(loaded.traces[i].label == d.traces[i].label);
    CHECK(loaded.traces[i].logits == d.traces[i].logits);
  }
  // a second save of the loaded dataset is byte-identical
  auto path2 = temp_path("masc_traces_roundtrip2.bin");
  save_traces(loaded, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string c1((std::istreambuf_iterator<char>(f1)), {});
  std::string c2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(c1 == c2);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("trace file corruption is rejected with offsets") {
  TraceDataset d = random_dataset(4, 5, 7);
  auto path = temp_path("masc_traces_corrupt.bin");

  save_traces(d, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("BADMAGIC", 8);
  }
  CHECK_THROWS_WITH_AS(load_traces(path), doctest::Contains("offset 0"),
                       FormatError);

  save_traces(d, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 10);
  CHECK_THROWS_AS(load_traces(path), FormatError);

  CHECK_THROWS_AS(load_traces(temp_path("masc_traces_missing.bin")), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("trace shape inconsistency names the offending trace") {
  TraceDataset d = random_dataset(3, 4, 8);
  auto path = temp_path("masc_traces_shape.bin");
  save_traces(d, path);
  // trace records start right after the header; corrupt trace 0's expert
  // count (bytes 8..11 of the record)
  std::string data;
  {
    std::ifstream f(path, std::ios::binary);
    data.assign((std::istreambuf_iterator<char>(f)), {});
  }
  std::uint32_t header_len;
  std::memcpy(&header_len, data.data() + 8, 4);
  std::uint32_t wrong = 4;
  std::memcpy(data.data() + 12 + header_len + 8, &wrong, 4);
  {
    std::ofstream f(path, std::ios::binary);
    f.write(data.data(), std::streamsize(data.size()));
  }
  CHECK_THROWS_WITH_AS(load_traces(path), doctest::Contains("trace 0"),
                       FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("dataset validation rejects bad members") {
  TraceDataset d = random_dataset(4, 5, 9);
  d.traces[2].label = 3;
  CHECK_THROWS_AS(d.validate(), ContractError);
  d.traces[2].label = 1;
  d.traces[1].logits = Array(Shape{5, 2, 2});
  CHECK_THROWS_AS(d.validate(), ContractError);
}
