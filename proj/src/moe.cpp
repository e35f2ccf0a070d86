#include "masc/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "masc/container.hpp"
#include "masc/kernels.hpp"
#include "masc/rng.hpp"
#include "masc/tape.hpp"

namespace masc {

void MoEConfig::validate() const {
  if (num_layers < 1) throw ContractError("MoEConfig: num_layers must be >= 1");
  if (top_k < 1 || top_k > experts_per_layer) {
    throw ContractError("MoEConfig: need 1 <= top_k <= experts_per_layer");
  }
  if (hidden_dim < 1 || vocab_size < 1) {
    throw ContractError("MoEConfig: hidden_dim and vocab_size must be >= 1");
  }
}

TopKResult top_k_select(const Array& logits, std::size_t k, SoftmaxMode mode) {
  const std::size_t e = logits.size();
  if (k > e) throw ContractError("top_k_select: k exceeds expert count");

  std::vector<std::size_t> order(e);
  std::iota(order.begin(), order.end(), 0);
  // descending by logit, ties broken by lowest index
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return logits[a] > logits[b];
  });
  TopKResult result;
  result.indices.assign(order.begin(), order.begin() + static_cast<long>(k));

  const double m = max_value(logits);
  result.weights = Array(Shape{k});
  if (mode == SoftmaxMode::kSoftmaxThenTopK) {
    double z = 0.0;
    for (std::size_t i = 0; i < e; ++i) z += std::exp(logits[i] - m);
    double sel = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      result.weights[i] = std::exp(logits[result.indices[i]] - m) / z;
      sel += result.weights[i];
    }
    result.weights *= 1.0 / sel;
  } else {
    double sel = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      result.weights[i] = std::exp(logits[result.indices[i]] - m);
      sel += result.weights[i];
    }
    result.weights *= 1.0 / sel;
  }
  return result;
}

void GateHook::clear() {
  captured.clear();
  captured_post.clear();
}

std::vector<std::size_t> ModelOutput::tokens() const {
  std::vector<std::size_t> out;
  const std::size_t t = logits.rows();
  const std::size_t v = logits.cols();
  out.reserve(t);
  for (std::size_t i = 0; i < t; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < v; ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    out.push_back(best);
  }
  return out;
}

ToyMoEModel ToyMoEModel::random_init(const MoEConfig& config,
                                     std::size_t expert_units) {
  config.validate();
  Rng rng(config.seed);
  auto rand_array = [&](Shape shape, double scale) {
    Array a(std::move(shape));
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.normal(0.0, scale);
    return a;
  };
  const std::size_t h = config.hidden_dim;
  ToyMoEModel model;
  model.config = config;
  model.embedding = rand_array({config.vocab_size, h}, 0.5);
  auto make_expert = [&] {
    return ExpertParams{rand_array({expert_units, h}, 1.0 / std::sqrt(double(h))),
                        Array::zeros({expert_units}),
                        rand_array({h, expert_units}, 1.0 / std::sqrt(double(expert_units))),
                        Array::zeros({h})};
  };
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    model.gate_w.push_back(rand_array({config.experts_per_layer, h},
                                      1.0 / std::sqrt(double(h))));
    model.gate_b.push_back(Array::zeros({config.experts_per_layer}));
    std::vector<ExpertParams> layer_experts;
    for (std::size_t e = 0; e < config.experts_per_layer; ++e) {
      layer_experts.push_back(make_expert());
    }
    model.experts.push_back(std::move(layer_experts));
    std::vector<ExpertParams> layer_shared;
    for (std::size_t s = 0; s < config.num_shared_experts; ++s) {
      layer_shared.push_back(make_expert());
    }
    model.shared_experts.push_back(std::move(layer_shared));
  }
  model.head_w = rand_array({config.vocab_size, h}, 1.0 / std::sqrt(double(h)));
  model.head_b = Array::zeros({config.vocab_size});
  return model;
}

Array ToyMoEModel::gate_logits(const Array& hidden, std::size_t layer) const {
  if (layer >= config.num_layers) throw ContractError("gate_logits: layer out of range");
  if (!hidden.all_finite()) {
    throw ContractError("gate_logits: non-finite hidden state");
  }
  const Array& w = gate_w[layer];
  const std::size_t e = config.experts_per_layer;
  Array logits(Shape{e});
  for (std::size_t i = 0; i < e; ++i) {
    logits[i] = kernels::dot(w.data() + i * config.hidden_dim, hidden.data(),
                             config.hidden_dim) +
                gate_b[layer][i];
  }
  return logits;
}

Array ToyMoEModel::expert_forward(const ExpertParams& p, const Array& hidden) const {
  const std::size_t units = p.b1.size();
  const std::size_t h = config.hidden_dim;
  Array u(Shape{units});
  for (std::size_t i = 0; i < units; ++i) {
    const double pre = kernels::dot(p.w1.data() + i * h, hidden.data(), h) + p.b1[i];
    u[i] = pre > 0.0 ? pre : 0.0;
  }
  Array out(Shape{h});
  for (std::size_t d = 0; d < h; ++d) {
    out[d] = p.b2[d] + kernels::dot(p.w2.data() + d * units, u.data(), units);
  }
  return out;
}

Array ToyMoEModel::moe_layer_forward(const Array& hidden, std::size_t layer,
                                     GateHook* hook, std::size_t token_index) const {
  Array logits = gate_logits(hidden, layer);
  Array selection_logits = logits;

  if (hook && hook->capturing()) {
    if (hook->captured.size() <= token_index) hook->captured.resize(token_index + 1);
    hook->captured[token_index].push_back(logits);
  }
  if (hook && hook->injecting()) {
    if (!hook->payload) throw InjectionError("inject mode without payload");
    const InjectionPayload& p = *hook->payload;
    const std::size_t e = config.experts_per_layer;
    if (p.mask.ndim() != 2 || p.mask.rows() != config.num_layers ||
        p.mask.cols() != e) {
      throw InjectionError("payload mask shape does not match (L, E)");
    }
    if (p.kind == InjectionPayload::Kind::kAdditive) {
      if (p.sigma.size() != config.num_layers) {
        throw InjectionError("payload sigma length does not match L");
      }
      for (std::size_t i = 0; i < e; ++i) {
        selection_logits[i] += p.alpha * p.sigma[layer] * p.mask.at(layer, i);
      }
    } else {
      for (std::size_t i = 0; i < e; ++i) {
        if (p.mask.at(layer, i) != 0.0) selection_logits[i] = p.force_value;
      }
    }
    if (hook->capturing()) {
      if (hook->captured_post.size() <= token_index) {
        hook->captured_post.resize(token_index + 1);
      }
      hook->captured_post[token_index].push_back(selection_logits);
    }
  }

  TopKResult sel = top_k_select(selection_logits, config.top_k, config.softmax_mode);
  Array out = hidden;
  for (std::size_t i = 0; i < sel.indices.size(); ++i) {
    Array contrib = expert_forward(experts[layer][sel.indices[i]], hidden);
    kernels::axpy(sel.weights[i], contrib.data(), out.data(), out.size());
  }
  for (const ExpertParams& s : shared_experts[layer]) {
    Array contrib = expert_forward(s, hidden);
    kernels::axpy(1.0, contrib.data(), out.data(), out.size());
  }
  return out;
}

std::vector<Array> ToyMoEModel::mixed_embeddings(
    std::span<const std::size_t> tokens) const {
  std::vector<Array> result;
  Array context = Array::zeros({config.hidden_dim});
  for (std::size_t token : tokens) {
    if (token >= config.vocab_size) {
      throw InputError("token " + std::to_string(token) + " out of vocab");
    }
    Array h(Shape{config.hidden_dim});
    for (std::size_t d = 0; d < config.hidden_dim; ++d) {
      h[d] = embedding.at(token, d);
    }
    for (std::size_t d = 0; d < mix_dims; ++d) {
      const double raw = h[d];
      h[d] += context[d];
      context[d] += raw;
    }
    result.push_back(std::move(h));
  }
  return result;
}

ModelOutput ToyMoEModel::forward(std::span<const std::size_t> tokens,
                                 GateHook* hook) const {
  std::vector<Array> hiddens = mixed_embeddings(tokens);
  ModelOutput out;
  out.logits = Array(Shape{tokens.size(), config.vocab_size});
  for (std::size_t t = 0; t < hiddens.size(); ++t) {
    Array h = hiddens[t];
    for (std::size_t l = 0; l < config.num_layers; ++l) {
      h = moe_layer_forward(h, l, hook, t);
    }
    for (std::size_t v = 0; v < config.vocab_size; ++v) {
      out.logits.at(t, v) =
          kernels::dot(head_w.data() + v * config.hidden_dim, h.data(),
                       config.hidden_dim) +
          head_b[v];
    }
  }
  return out;
}

std::vector<std::pair<std::string, Array*>> ToyMoEModel::parameter_list() {
  std::vector<std::pair<std::string, Array*>> params;
  params.emplace_back("embedding", &embedding);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    params.emplace_back(prefix + "gate_w", &gate_w[l]);
    params.emplace_back(prefix + "gate_b", &gate_b[l]);
    for (std::size_t e = 0; e < experts[l].size(); ++e) {
      const std::string ep = prefix + "expert" + std::to_string(e) + ".";
      params.emplace_back(ep + "w1", &experts[l][e].w1);
      params.emplace_back(ep + "b1", &experts[l][e].b1);
      params.emplace_back(ep + "w2", &experts[l][e].w2);
      params.emplace_back(ep + "b2", &experts[l][e].b2);
    }
    for (std::size_t s = 0; s < shared_experts[l].size(); ++s) {
      const std::string sp = prefix + "shared" + std::to_string(s) + ".";
      params.emplace_back(sp + "w1", &shared_experts[l][s].w1);
      params.emplace_back(sp + "b1", &shared_experts[l][s].b1);
      params.emplace_back(sp + "w2", &shared_experts[l][s].w2);
      params.emplace_back(sp + "b2", &shared_experts[l][s].b2);
    }
  }
  params.emplace_back("head_w", &head_w);
  params.emplace_back("head_b", &head_b);
  return params;
}

namespace {

constexpr const char* kModelMagic = "MASCMOE1";

nlohmann::json config_to_json(const MoEConfig& c) {
  return {{"num_layers", c.num_layers},
          {"experts_per_layer", c.experts_per_layer},
          {"top_k", c.top_k},
          {"hidden_dim", c.hidden_dim},
          {"num_shared_experts", c.num_shared_experts},
          {"vocab_size", c.vocab_size},
          {"softmax_mode", c.softmax_mode == SoftmaxMode::kSoftmaxThenTopK
                               ? "softmax_then_topk"
                               : "topk_then_softmax"},
          {"seed", c.seed}};
}

MoEConfig config_from_json(const nlohmann::json& j) {
  MoEConfig c;
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.experts_per_layer = j.at("experts_per_layer").get<std::size_t>();
  c.top_k = j.at("top_k").get<std::size_t>();
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.num_shared_experts = j.at("num_shared_experts").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.softmax_mode = j.at("softmax_mode").get<std::string>() == "softmax_then_topk"
                       ? SoftmaxMode::kSoftmaxThenTopK
                       : SoftmaxMode::kTopKThenSoftmax;
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

void save_model_with_header(const ToyMoEModel& model,
                            const std::filesystem::path& path,
                            nlohmann::json extra) {
  auto& m = const_cast<ToyMoEModel&>(model);
  std::vector<NamedBlock> blocks;
  for (auto& [name, array] : m.parameter_list()) {
    blocks.push_back({name, array});
  }
  nlohmann::json header = std::move(extra);
  header["format_version"] = 1;
  header["config"] = config_to_json(model.config);
  header["mix_dims"] = model.mix_dims;
  write_container(path, kModelMagic, std::move(header), blocks);
}

ToyMoEModel load_model_from(const LoadedContainer& c) {
  MoEConfig config = config_from_json(c.header.at("config"));
  config.validate();
  // shapes come from the stored blocks; allocate zero-sized then assign
  ToyMoEModel model;
  model.config = config;
  model.mix_dims = c.header.value("mix_dims", std::size_t{0});
  model.embedding = c.block("embedding");
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    model.gate_w.push_back(c.block(prefix + "gate_w"));
    model.gate_b.push_back(c.block(prefix + "gate_b"));
    std::vector<ExpertParams> layer_experts;
    for (std::size_t e = 0; e < config.experts_per_layer; ++e) {
      const std::string ep = prefix + "expert" + std::to_string(e) + ".";
      layer_experts.push_back({c.block(ep + "w1"), c.block(ep + "b1"),
                               c.block(ep + "w2"), c.block(ep + "b2")});
    }
    model.experts.push_back(std::move(layer_experts));
    std::vector<ExpertParams> layer_shared;
    for (std::size_t s = 0; s < config.num_shared_experts; ++s) {
      const std::string sp = prefix + "shared" + std::to_string(s) + ".";
      layer_shared.push_back({c.block(sp + "w1"), c.block(sp + "b1"),
                              c.block(sp + "w2"), c.block(sp + "b2")});
    }
    model.shared_experts.push_back(std::move(layer_shared));
  }
  model.head_w = c.block("head_w");
  model.head_b = c.block("head_b");
  return model;
}

}  // namespace

void ToyMoEModel::save(const std::filesystem::path& path) const {
  save_model_with_header(*this, path, {});
}

ToyMoEModel ToyMoEModel::load(const std::filesystem::path& path) {
  return load_model_from(read_container(path, kModelMagic));
}

// ---- planted fixture ----

namespace fixture_dims {
// hidden layout: [flag, utility, eos, behavior_acc, utility_acc, echo(vocab)...]
constexpr std::size_t kFlag = 0;
constexpr std::size_t kUtility = 1;
constexpr std::size_t kEos = 2;
constexpr std::size_t kBehavior = 3;
constexpr std::size_t kUtilOut = 4;
constexpr std::size_t kEchoBase = 5;
constexpr std::size_t kMixDims = 3;  // flag, utility, eos carry across tokens

// fixture constants; margin and gate noise come from the CircuitSpec
constexpr double kAmp = 1.0;            // flag embedding amplitude
constexpr double kEcho = 1.0;           // echo embedding amplitude
constexpr double kCGap = 1.5;           // gate penalty keeping off-circuit experts out
constexpr double kCNoise = 4.0;         // off-circuit gate noise multiplier
constexpr double kBehaviorWrite = 0.6;  // per-layer expert write to the behavior dim
constexpr double kJunkWrite = 1.1;      // constant junk-token write per expert
constexpr double kErase = 1.0;          // off-circuit experts damp flag/behavior dims
constexpr double kHeadBehavior = 2.0;
constexpr double kHeadUtility = 2.0;
}  // namespace fixture_dims

PlantedFixture build_planted_fixture(const MoEConfig& config_in,
                                     const CircuitSpec& spec) {
  namespace fd = fixture_dims;
  MoEConfig config = config_in;
  const std::size_t e_count = config.experts_per_layer;
  const std::size_t num_layers = config.num_layers;

  for (std::size_t a : spec.set_a) {
    if (a >= e_count) throw ContractError("fixture: set A expert out of range");
    for (std::size_t b : spec.set_b) {
      if (a == b) throw ContractError("fixture: sets A and B overlap");
    }
  }
  for (std::size_t b : spec.set_b) {
    if (b >= e_count) throw ContractError("fixture: set B expert out of range");
  }
  if (spec.set_a.empty() || spec.set_b.empty()) {
    throw ContractError("fixture: sets A and B must be nonempty");
  }

  FixtureTokens tokens;
  tokens.flag_a = 0;
  tokens.flag_b = 1;
  tokens.uflag_0 = 2;
  tokens.uflag_1 = 3;
  tokens.eos = 4;
  tokens.out_a = 5;
  tokens.out_b = 6;
  tokens.out_u0 = 7;
  tokens.out_u1 = 8;
  tokens.first_filler = 9;
  tokens.num_filler = 16;
  tokens.junk_base = tokens.first_filler + tokens.num_filler;

  config.vocab_size = tokens.junk_base + num_layers * e_count;
  config.hidden_dim = fd::kEchoBase + config.vocab_size;
  config.seed = spec.seed;
  config.validate();

  ToyMoEModel model;
  model.config = config;
  model.mix_dims = fd::kMixDims;
  const std::size_t h = config.hidden_dim;
  const std::size_t v = config.vocab_size;

  // embeddings: one-hot echo plus flag components
  model.embedding = Array::zeros({v, h});
  for (std::size_t tok = 0; tok < v; ++tok) {
    model.embedding.at(tok, fd::kEchoBase + tok) = fd::kEcho;
  }
  model.embedding.at(tokens.flag_a, fd::kFlag) = fd::kAmp;
  model.embedding.at(tokens.flag_b, fd::kFlag) = -fd::kAmp;
  model.embedding.at(tokens.uflag_0, fd::kUtility) = fd::kAmp;
  model.embedding.at(tokens.uflag_1, fd::kUtility) = -fd::kAmp;
  model.embedding.at(tokens.eos, fd::kEos) = fd::kAmp;

  Rng rng(spec.seed ^ 0x5eedf187u);

  auto in_set = [](const std::vector<std::size_t>& set, std::size_t e) {
    return std::find(set.begin(), set.end(), e) != set.end();
  };

  for (std::size_t l = 0; l < num_layers; ++l) {
    Array gw = Array::zeros({e_count, h});
    Array gb = Array::zeros({e_count});
    std::vector<ExpertParams> layer_experts;
    for (std::size_t e = 0; e < e_count; ++e) {
      const bool is_a = in_set(spec.set_a, e);
      const bool is_b = in_set(spec.set_b, e);
      if (is_a) gw.at(e, fd::kFlag) = spec.margin;
      if (is_b) gw.at(e, fd::kFlag) = -spec.margin;
      if (!is_a && !is_b) gb[e] = -fd::kCGap;
      // token-identity sensitivity: seeded gate weight on every echo dim.
      // Off-circuit experts get much louder noise so their logits carry no
      // label signal worth fitting; it also keeps them out of the top-k
      // (bias gap minus noise stays below the flagged experts).
      const double noise =
          (is_a || is_b) ? spec.gate_noise : fd::kCNoise * spec.gate_noise;
      for (std::size_t tok = 0; tok < v; ++tok) {
        gw.at(e, fd::kEchoBase + tok) = rng.uniform(-noise, noise);
      }

      // expert FFN, 8 relu units (see rows below)
      ExpertParams p;
      p.w1 = Array::zeros({8, h});
      p.b1 = Array::zeros({8});
      p.w2 = Array::zeros({h, 8});
      p.b2 = Array::zeros({h});
      // u0 = relu(flag + eos - 1), u1 = relu(-flag + eos - 1): |flag| gated on eos
      p.w1.at(0, fd::kFlag) = 1.0;
      p.w1.at(0, fd::kEos) = 1.0;
      p.b1[0] = -fd::kAmp;
      p.w1.at(1, fd::kFlag) = -1.0;
      p.w1.at(1, fd::kEos) = 1.0;
      p.b1[1] = -fd::kAmp;
      // u2/u3 = relu(+-flag), u4/u5 = relu(+-behavior)
      p.w1.at(2, fd::kFlag) = 1.0;
      p.w1.at(3, fd::kFlag) = -1.0;
      p.w1.at(4, fd::kBehavior) = 1.0;
      p.w1.at(5, fd::kBehavior) = -1.0;
      // u6/u7 = relu(+-utility + eos - 1), every expert relays the utility
      // flag into the accumulator only at end of sequence
      p.w1.at(6, fd::kUtility) = 1.0;
      p.w1.at(6, fd::kEos) = 1.0;
      p.b1[6] = -fd::kAmp;
      p.w1.at(7, fd::kUtility) = -1.0;
      p.w1.at(7, fd::kEos) = 1.0;
      p.b1[7] = -fd::kAmp;
      p.w2.at(fd::kUtilOut, 6) = fd::kBehaviorWrite;
      p.w2.at(fd::kUtilOut, 7) = -fd::kBehaviorWrite;

      if (is_a || is_b) {
        const double sign = is_a ? 1.0 : -1.0;
        p.w2.at(fd::kBehavior, 0) = sign * fd::kBehaviorWrite;
        p.w2.at(fd::kBehavior, 1) = sign * fd::kBehaviorWrite;
        p.b2[fd::kEchoBase + tokens.junk_base + l * e_count + e] = fd::kJunkWrite;
      } else {
        // off-circuit experts damp the flag and behavior channels and write
        // a stronger junk signature; selecting them degrades the output
        p.w2.at(fd::kFlag, 2) = -fd::kErase;
        p.w2.at(fd::kFlag, 3) = fd::kErase;
        p.w2.at(fd::kBehavior, 4) = -fd::kErase;
        p.w2.at(fd::kBehavior, 5) = fd::kErase;
        p.b2[fd::kEchoBase + tokens.junk_base + l * e_count + e] = 2.0 * fd::kJunkWrite;
      }
      layer_experts.push_back(std::move(p));
    }
    model.gate_w.push_back(std::move(gw));
    model.gate_b.push_back(std::move(gb));
    model.experts.push_back(std::move(layer_experts));
    model.shared_experts.emplace_back();
  }

  // head: echo identity block plus behavior/utility readout columns
  model.head_w = Array::zeros({v, h});
  model.head_b = Array::zeros({v});
  for (std::size_t tok = 0; tok < v; ++tok) {
    model.head_w.at(tok, fd::kEchoBase + tok) = 1.0;
  }
  model.head_w.at(tokens.out_a, fd::kBehavior) = fd::kHeadBehavior;
  model.head_w.at(tokens.out_b, fd::kBehavior) = -fd::kHeadBehavior;
  model.head_w.at(tokens.out_u0, fd::kUtilOut) = fd::kHeadUtility;
  model.head_w.at(tokens.out_u1, fd::kUtilOut) = -fd::kHeadUtility;

  return PlantedFixture{std::move(model), tokens, spec};
}

std::vector<std::size_t> PlantedFixture::behavior_prompt(bool flag_b, std::size_t length,
                                                         std::uint64_t seed) const {
  if (length < 3) throw ContractError("behavior_prompt: length must be >= 3");
  Rng rng(seed * 2654435761u + 17);
  std::vector<std::size_t> prompt;
  prompt.push_back(flag_b ? tokens.flag_b : tokens.flag_a);
  for (std::size_t i = 0; i + 2 < length; ++i) {
    prompt.push_back(tokens.first_filler + rng.next_below(tokens.num_filler));
  }
  prompt.push_back(tokens.eos);
  return prompt;
}

std::vector<std::size_t> PlantedFixture::utility_prompt(bool uflag_1, std::size_t length,
                                                        std::uint64_t seed) const {
  if (length < 3) throw ContractError("utility_prompt: length must be >= 3");
  Rng rng(seed * 2654435761u + 29);
  std::vector<std::size_t> prompt;
  prompt.push_back(uflag_1 ? tokens.uflag_1 : tokens.uflag_0);
  for (std::size_t i = 0; i + 2 < length; ++i) {
    prompt.push_back(tokens.first_filler + rng.next_below(tokens.num_filler));
  }
  prompt.push_back(tokens.eos);
  return prompt;
}

void save_fixture(const PlantedFixture& fixture, const std::filesystem::path& path) {
  nlohmann::json extra;
  extra["fixture"] = {
      {"flag_a", fixture.tokens.flag_a},
      {"flag_b", fixture.tokens.flag_b},
      {"uflag_0", fixture.tokens.uflag_0},
      {"uflag_1", fixture.tokens.uflag_1},
      {"eos", fixture.tokens.eos},
      {"out_a", fixture.tokens.out_a},
      {"out_b", fixture.tokens.out_b},
      {"out_u0", fixture.tokens.out_u0},
      {"out_u1", fixture.tokens.out_u1},
      {"first_filler", fixture.tokens.first_filler},
      {"num_filler", fixture.tokens.num_filler},
      {"junk_base", fixture.tokens.junk_base},
      {"set_a", fixture.circuit.set_a},
      {"set_b", fixture.circuit.set_b},
      {"margin", fixture.circuit.margin},
      {"gate_noise", fixture.circuit.gate_noise},
      {"seed", fixture.circuit.seed},
  };
  save_model_with_header(fixture.model, path, std::move(extra));
}

PlantedFixture load_fixture(const std::filesystem::path& path) {
  LoadedContainer c = read_container(path, kModelMagic);
  if (!c.header.contains("fixture")) {
    throw FormatError("model checkpoint carries no fixture metadata");
  }
  const auto& f = c.header["fixture"];
  PlantedFixture fixture;
  fixture.model = load_model_from(c);
  fixture.tokens = {f.at("flag_a"),      f.at("flag_b"),  f.at("uflag_0"),
                    f.at("uflag_1"),     f.at("eos"),     f.at("out_a"),
                    f.at("out_b"),       f.at("out_u0"),  f.at("out_u1"),
                    f.at("first_filler"), f.at("num_filler"), f.at("junk_base")};
  fixture.circuit.set_a = f.at("set_a").get<std::vector<std::size_t>>();
  fixture.circuit.set_b = f.at("set_b").get<std::vector<std::size_t>>();
  fixture.circuit.margin = f.at("margin");
  fixture.circuit.gate_noise = f.at("gate_noise");
  fixture.circuit.seed = f.at("seed");
  return fixture;
}

}  // namespace masc
