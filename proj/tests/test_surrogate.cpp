#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "masc/container.hpp"
#include "masc/rng.hpp"
#include "masc/surrogate.hpp"

using namespace masc;

namespace {

SurrogateConfig tiny_config(std::uint64_t seed = 0) {
  SurrogateConfig cfg;
  cfg.embed_dim = 4;
  cfg.hidden_dim = 6;
  cfg.seed = seed;
  return cfg;
}

SurrogateParams tiny_params(std::uint64_t seed = 0) {
  return SurrogateParams::random_init(3, 5, tiny_config(seed));
}

RoutingTrace random_trace(std::size_t t_len, std::size_t layers,
                          std::size_t experts, std::uint64_t seed) {
  RoutingTrace trace;
  trace.logits = Array(Shape{t_len, layers, experts});
  Rng rng(seed);
  for (std::size_t i = 0; i < trace.logits.size(); ++i) {
    trace.logits[i] = rng.uniform(-2.0, 2.0);
  }
  trace.label = int(seed % 2);
  return trace;
}

PlantedFixture surrogate_fixture() {
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

TraceDataset fixture_traces(const PlantedFixture& fx, std::size_t per_class,
                            std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> prompts;
  for (std::size_t i = 0; i < per_class; ++i) {
    prompts.push_back(fx.behavior_prompt(false, 10, seed + i));
    prompts.push_back(fx.behavior_prompt(true, 10, seed + 5000 + i));
  }
  auto labeler = [&fx](const ModelOutput& out, std::span<const std::size_t>)
      -> std::optional<int> {
    std::size_t last = out.tokens().back();
    if (last == fx.tokens.out_a) return 0;
    if (last == fx.tokens.out_b) return 1;
    return std::nullopt;
  };
  return collect_traces(fx.model, prompts, labeler).dataset;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("normalize_layer standardizes across experts") {
  Array out = normalize_layer(Array{1.0, 2.0, 3.0, 4.0});
  CHECK(out[0] == doctest::Approx(-1.3416).epsilon(1e-3));
  CHECK(out[1] == doctest::Approx(-0.4472).epsilon(1e-3));
  CHECK(out[2] == doctest::Approx(0.4472).epsilon(1e-3));
  CHECK(out[3] == doctest::Approx(1.3416).epsilon(1e-3));

  Array flat = normalize_layer(Array{2.5, 2.5, 2.5});
  for (std::size_t i = 0; i < 3; ++i) CHECK(flat[i] == 0.0);

  // near-idempotent on already standardized data
  Array twice = normalize_layer(out);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(twice[i] == doctest::Approx(out[i]).epsilon(1e-4));
  }
}

TEST_CASE("project is the affine map it claims to be") {
  SurrogateParams p = tiny_params();
  p.w_p.fill(0.0);
  for (std::size_t i = 0; i < p.b_p.size(); ++i) p.b_p[i] = double(i) + 0.5;
  Array out = project(p, Array{1.0, -1.0, 2.0, 0.0, 3.0});
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == p.b_p[i]);

  SurrogateParams q = tiny_params(3);
  q.b_p.fill(0.0);
  Array basis = Array::zeros({5});
  basis[2] = 1.0;
  Array col = project(q, basis);
  for (std::size_t i = 0; i < col.size(); ++i) {
    CHECK(col[i] == q.w_p.at(i, 2));
  }
}

TEST_CASE("flatten_token concatenates in layer order") {
  Array single{7.0, 8.0};
  Array id = flatten_token({single});
  CHECK(id == single);

  Array out = flatten_token({Array{1.0, 2.0}, Array{3.0, 4.0}});
  CHECK(out == Array{1.0, 2.0, 3.0, 4.0});
}

TEST_CASE("lstm_step matches a fully scalar reference") {
  SurrogateParams p = tiny_params(5);
  const std::size_t in = p.layers * p.embed_dim;
  const std::size_t h_dim = p.hidden_dim;
  Rng rng(9);
  Array z(Shape{in}), h(Shape{h_dim}), c(Shape{h_dim});
  for (std::size_t i = 0; i < in; ++i) z[i] = rng.uniform(-1.0, 1.0);
  for (std::size_t i = 0; i < h_dim; ++i) h[i] = rng.uniform(-1.0, 1.0);
  for (std::size_t i = 0; i < h_dim; ++i) c[i] = rng.uniform(-1.0, 1.0);

  auto [h2, c2] = lstm_step(p, z, h, c);
  REQUIRE(h2.size() == h_dim);
  REQUIRE(c2.size() == h_dim);

  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  for (std::size_t k = 0; k < h_dim; ++k) {
    auto pre = [&](const Array& wx, const Array& wh, const Array& b) {
      double acc = b[k];
      for (std::size_t j = 0; j < in; ++j) acc += wx.at(k, j) * z[j];
      for (std::size_t j = 0; j < h_dim; ++j) acc += wh.at(k, j) * h[j];
      return acc;
    };
    double ik = sig(pre(p.w_xi, p.w_hi, p.b_i));
    double fk = sig(pre(p.w_xf, p.w_hf, p.b_f));
    double gk = std::tanh(pre(p.w_xg, p.w_hg, p.b_g));
    double ok = sig(pre(p.w_xo, p.w_ho, p.b_o));
    double ck = fk * c[k] + ik * gk;
    CHECK(c2[k] == doctest::Approx(ck).epsilon(1e-12));
    CHECK(h2[k] == doctest::Approx(ok * std::tanh(ck)).epsilon(1e-12));
  }
}

TEST_CASE("zeroed lstm cell is inert") {
  SurrogateParams p = tiny_params();
  for (auto& [name, array] : p.parameter_list()) array->fill(0.0);
  Array z = Array::zeros({p.layers * p.embed_dim});
  Array h = Array::zeros({p.hidden_dim});
  auto [h2, c2] = lstm_step(p, z, h, h);
  for (std::size_t i = 0; i < h2.size(); ++i) {
    CHECK(h2[i] == 0.0);
    CHECK(c2[i] == 0.0);
  }
}

TEST_CASE("classify reduces to its bias on zero input") {
  SurrogateParams p = tiny_params(2);
  p.b_c[0] = -0.75;
  CHECK(classify(p, Array::zeros({p.hidden_dim})) ==
        doctest::Approx(-0.75).epsilon(1e-12));
  p.w_c.fill(0.0);
  Array h(Shape{p.hidden_dim});
  h.fill(3.0);
  CHECK(classify(p, h) == doctest::Approx(-0.75).epsilon(1e-12));
}

TEST_CASE("forward_trace unrolls to its definition at T=1") {
  SurrogateParams p = tiny_params(4);
  RoutingTrace trace = random_trace(1, p.layers, p.experts, 11);
  std::vector<Array> projected;
  for (std::size_t l = 0; l < p.layers; ++l) {
    Array row(Shape{p.experts});
    for (std::size_t e = 0; e < p.experts; ++e) {
      row[e] = trace.logits[l * p.experts + e];
    }
    projected.push_back(project(p, normalize_layer(row)));
  }
  Array zeros = Array::zeros({p.hidden_dim});
  auto [h, c] = lstm_step(p, flatten_token(projected), zeros, zeros);
  CHECK(forward_trace(p, trace) == doctest::Approx(classify(p, h)).epsilon(1e-12));
}

TEST_CASE("forward_trace is deterministic and order sensitive") {
  SurrogateParams p = tiny_params(6);
  RoutingTrace trace = random_trace(5, p.layers, p.experts, 13);
  CHECK(forward_trace(p, trace) == forward_trace(p, trace));

  RoutingTrace reversed = trace;
  const std::size_t row = p.layers * p.experts;
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t i = 0; i < row; ++i) {
      reversed.logits[t * row + i] = trace.logits[(4 - t) * row + i];
    }
  }
  CHECK(forward_trace(p, trace) != forward_trace(p, reversed));
}

TEST_CASE("bce_with_logits_value closed forms") {
  CHECK(bce_with_logits_value(0.0, 1) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bce_with_logits_value(30.0, 1) < 1e-12);
  CHECK(bce_with_logits_value(-30.0, 1) == doctest::Approx(30.0).epsilon(1e-6));
  CHECK(std::isfinite(bce_with_logits_value(-1000.0, 1)));
}

TEST_CASE("tape forward agrees with the plain composition") {
  SurrogateParams p = tiny_params(8);
  RoutingTrace trace = random_trace(4, p.layers, p.experts, 17);
  Tape tape;
  std::vector<NodeId> param_nodes;
  for (auto& [name, array] : p.parameter_list()) {
    param_nodes.push_back(tape.leaf(*array));
  }
  NodeId input = tape.leaf(trace.logits);
  NodeId logit = forward_trace_on_tape(tape, p, param_nodes, input, 4);
  CHECK(tape.value(logit)[0] ==
        doctest::Approx(forward_trace(p, trace)).epsilon(1e-10));
}

TEST_CASE("input_gradient matches central finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SurrogateParams p = tiny_params(20 + seed);
    RoutingTrace trace = random_trace(3, p.layers, p.experts, 40 + seed);
    const int target = int(seed % 2);
    Array grad = input_gradient(p, trace, target);
    REQUIRE(grad.shape() == trace.logits.shape());

    const double step = 1e-4;
    for (std::size_t i = 0; i < trace.logits.size(); i += 7) {
      RoutingTrace plus = trace, minus = trace;
      plus.logits[i] += step;
      minus.logits[i] -= step;
      const double fd = (bce_with_logits_value(forward_trace(p, plus), target) -
                         bce_with_logits_value(forward_trace(p, minus), target)) /
                        (2.0 * step);
      const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
      CHECK(std::abs(fd - grad[i]) / denom < 1e-4);
    }
  }
}

TEST_CASE("input_gradient vanishes under a saturated correct head") {
  SurrogateParams p = tiny_params(3);
  RoutingTrace trace = random_trace(3, p.layers, p.experts, 50);
  p.b_c[0] = 40.0;  // forward logit >> 0
  REQUIRE(forward_trace(p, trace) > 30.0);
  Array grad = input_gradient(p, trace, 1);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    CHECK(std::abs(grad[i]) < 1e-8);
  }
}

TEST_CASE("input_gradient stays finite on constant logit rows") {
  SurrogateParams p = tiny_params(4);
  RoutingTrace trace = random_trace(3, p.layers, p.experts, 60);
  for (std::size_t e = 0; e < p.experts; ++e) trace.logits[e] = 1.25;
  Array grad = input_gradient(p, trace, 0);
  CHECK(grad.all_finite());
}

TEST_CASE("per-layer affine rescaling of the logits is invisible") {
  SurrogateParams p = tiny_params(5);
  RoutingTrace trace = random_trace(4, p.layers, p.experts, 70);
  const double base = forward_trace(p, trace);
  RoutingTrace scaled = trace;
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t l = 0; l < p.layers; ++l) {
      const double a = 1.0 + 0.5 * double(l);
      const double b = -2.0 + double(l);
      for (std::size_t e = 0; e < p.experts; ++e) {
        std::size_t i = (t * p.layers + l) * p.experts + e;
        scaled.logits[i] = a * trace.logits[i] + b;
      }
    }
  }
  CHECK(forward_trace(p, scaled) == doctest::Approx(base).epsilon(1e-6));
}

TEST_CASE("surrogate learns the planted fixture traces") {
  PlantedFixture fx = surrogate_fixture();
  TraceDataset data = fixture_traces(fx, 100, 1);
  REQUIRE(data.traces.size() == 200);
  SurrogateConfig cfg;
  cfg.seed = 4;
  SurrogateTrainResult r = train_surrogate(data, cfg);
  CHECK(r.val_accuracy.back() >= 0.95);
  CHECK(r.train_loss.back() < r.train_loss.front());
}

TEST_CASE("surrogate stays at chance on randomized labels") {
  PlantedFixture fx = surrogate_fixture();
  TraceDataset data = fixture_traces(fx, 550, 9);
  Rng rng(123);
  for (RoutingTrace& t : data.traces) t.label = int(rng.next_below(2));
  SurrogateConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 6;
  SurrogateTrainResult r = train_surrogate(data, cfg);
  CHECK(r.val_accuracy.back() >= 0.35);
  CHECK(r.val_accuracy.back() <= 0.65);
}

TEST_CASE("surrogate training is seed-deterministic") {
  PlantedFixture fx = surrogate_fixture();
  TraceDataset data = fixture_traces(fx, 10, 3);
  SurrogateConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 12;
  SurrogateTrainResult a = train_surrogate(data, cfg);
  SurrogateTrainResult b = train_surrogate(data, cfg);
  auto pa = a.params.parameter_list();
  auto pb = b.params.parameter_list();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i].second->size() == pb[i].second->size());
    for (std::size_t j = 0; j < pa[i].second->size(); ++j) {
      CHECK((*pa[i].second)[j] == (*pb[i].second)[j]);
    }
  }
}

TEST_CASE("surrogate checkpoints round-trip and reject corruption") {
  SurrogateParams p = tiny_params(31);
  auto path = temp_path("masc_surrogate_roundtrip.bin");
  p.save(path);
  SurrogateParams loaded = SurrogateParams::load(path);
  CHECK(loaded.layers == p.layers);
  CHECK(loaded.hidden_dim == p.hidden_dim);
  RoutingTrace trace = random_trace(4, p.layers, p.experts, 80);
  CHECK(forward_trace(loaded, trace) == forward_trace(p, trace));

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("NOTMAGIC", 8);
  }
  CHECK_THROWS_AS(SurrogateParams::load(path), FormatError);
  std::filesystem::remove(path);
}
