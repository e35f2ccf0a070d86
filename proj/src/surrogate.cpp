#include "masc/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <json.hpp>

#include "masc/adam.hpp"
#include "masc/container.hpp"
#include "masc/moe.hpp"
#include "masc/rng.hpp"

namespace masc {

namespace {

constexpr const char* kSurrogateMagic = "MASCSUR1";

Array uniform_init(Rng& rng, Shape shape, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(double(fan_in));
  Array a(std::move(shape));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(-bound, bound);
  return a;
}

}  // namespace

void SurrogateConfig::validate() const {
  if (embed_dim < 1 || hidden_dim < 1 || epochs < 1 || batch_size < 1) {
    throw ContractError("SurrogateConfig: dims, epochs, batch_size must be >= 1");
  }
  if (train_fraction <= 0.0 || train_fraction >= 1.0) {
    throw ContractError("SurrogateConfig: train_fraction must lie in (0, 1)");
  }
}

SurrogateParams SurrogateParams::random_init(std::size_t layers,
                                             std::size_t experts,
                                             const SurrogateConfig& config) {
  config.validate();
  const std::size_t d = config.embed_dim;
  const std::size_t h = config.hidden_dim;
  const std::size_t in = layers * d;
  Rng rng(config.seed ^ 0xa5a5a5a5ull);

  SurrogateParams p;
  p.layers = layers;
  p.experts = experts;
  p.embed_dim = d;
  p.hidden_dim = h;
  p.w_p = uniform_init(rng, {d, experts}, experts);
  p.b_p = Array::zeros({d});
  auto gate = [&](Array& wx, Array& wh, Array& b) {
    wx = uniform_init(rng, {h, in}, in);
    wh = uniform_init(rng, {h, h}, h);
    b = Array::zeros({h});
  };
  gate(p.w_xi, p.w_hi, p.b_i);
  gate(p.w_xf, p.w_hf, p.b_f);
  gate(p.w_xg, p.w_hg, p.b_g);
  gate(p.w_xo, p.w_ho, p.b_o);
  p.w_c = uniform_init(rng, {1, h}, h);
  p.b_c = Array::zeros({1});
  return p;
}

std::vector<std::pair<std::string, Array*>> SurrogateParams::parameter_list() {
  return {{"w_p", &w_p},   {"b_p", &b_p},   {"w_xi", &w_xi}, {"w_hi", &w_hi},
          {"b_i", &b_i},   {"w_xf", &w_xf}, {"w_hf", &w_hf}, {"b_f", &b_f},
          {"w_xg", &w_xg}, {"w_hg", &w_hg}, {"b_g", &b_g},   {"w_xo", &w_xo},
          {"w_ho", &w_ho}, {"b_o", &b_o},   {"w_c", &w_c},   {"b_c", &b_c}};
}

void SurrogateParams::save(const std::filesystem::path& path) const {
  auto& self = const_cast<SurrogateParams&>(*this);
  std::vector<NamedBlock> blocks;
  for (auto& [name, array] : self.parameter_list()) blocks.push_back({name, array});
  nlohmann::json header = {{"format_version", 1},
                           {"layers", layers},
                           {"experts", experts},
                           {"embed_dim", embed_dim},
                           {"hidden_dim", hidden_dim}};
  write_container(path, kSurrogateMagic, std::move(header), blocks);
}

SurrogateParams SurrogateParams::load(const std::filesystem::path& path) {
  LoadedContainer c = read_container(path, kSurrogateMagic);
  SurrogateParams p;
  p.layers = c.header.at("layers").get<std::size_t>();
  p.experts = c.header.at("experts").get<std::size_t>();
  p.embed_dim = c.header.at("embed_dim").get<std::size_t>();
  p.hidden_dim = c.header.at("hidden_dim").get<std::size_t>();
  for (auto& [name, array] : p.parameter_list()) *array = c.block(name);
  return p;
}

Array normalize_layer(const Array& x, double eps) {
  const std::size_t n = x.size();
  double mean = sum(x) / double(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    var += (x[i] - mean) * (x[i] - mean);
  }
  var /= double(n);
  const double denom = std::sqrt(var + eps);
  Array out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) / denom;
  return out;
}

Array project(const SurrogateParams& params, const Array& x_norm) {
  return add(matmul(params.w_p, x_norm), params.b_p);
}

Array flatten_token(const std::vector<Array>& per_layer) {
  std::size_t total = 0;
  for (const Array& v : per_layer) total += v.size();
  Array out(Shape{total});
  std::size_t at = 0;
  for (const Array& v : per_layer) {
    for (std::size_t i = 0; i < v.size(); ++i) out[at++] = v[i];
  }
  return out;
}

std::pair<Array, Array> lstm_step(const SurrogateParams& params, const Array& z,
                                  const Array& h, const Array& c) {
  auto gate = [&](const Array& wx, const Array& wh, const Array& b) {
    return add(add(matmul(wx, z), matmul(wh, h)), b);
  };
  const std::size_t n = params.hidden_dim;
  Array i = gate(params.w_xi, params.w_hi, params.b_i);
  Array f = gate(params.w_xf, params.w_hf, params.b_f);
  Array g = gate(params.w_xg, params.w_hg, params.b_g);
  Array o = gate(params.w_xo, params.w_ho, params.b_o);
  Array c_next(Shape{n});
  Array h_next(Shape{n});
  for (std::size_t k = 0; k < n; ++k) {
    const double ik = 1.0 / (1.0 + std::exp(-i[k]));
    const double fk = 1.0 / (1.0 + std::exp(-f[k]));
    const double gk = std::tanh(g[k]);
    const double ok = 1.0 / (1.0 + std::exp(-o[k]));
    c_next[k] = fk * c[k] + ik * gk;
    h_next[k] = ok * std::tanh(c_next[k]);
  }
  return {std::move(h_next), std::move(c_next)};
}

double classify(const SurrogateParams& params, const Array& h) {
  return matmul(params.w_c, h)[0] + params.b_c[0];
}

double forward_trace(const SurrogateParams& params, const RoutingTrace& trace) {
  const Shape& s = trace.logits.shape();
  if (s.size() != 3 || s[1] != params.layers || s[2] != params.experts) {
    throw ContractError("forward_trace: trace shape does not match surrogate");
  }
  const std::size_t t_len = s[0];
  Array h = Array::zeros({params.hidden_dim});
  Array c = Array::zeros({params.hidden_dim});
  for (std::size_t t = 0; t < t_len; ++t) {
    std::vector<Array> projected;
    for (std::size_t l = 0; l < params.layers; ++l) {
      Array row(Shape{params.experts});
      for (std::size_t e = 0; e < params.experts; ++e) {
        row[e] = trace.logits[(t * params.layers + l) * params.experts + e];
      }
      projected.push_back(project(params, normalize_layer(row)));
    }
    std::tie(h, c) = lstm_step(params, flatten_token(projected), h, c);
  }
  return classify(params, h);
}

double bce_with_logits_value(double logit, int label) {
  // max(x,0) - x*y + log(1 + exp(-|x|))
  return std::max(logit, 0.0) - logit * double(label) +
         std::log1p(std::exp(-std::abs(logit)));
}

NodeId forward_trace_on_tape(Tape& tape, const SurrogateParams& params,
                             const std::vector<NodeId>& param_nodes,
                             NodeId input_node, std::size_t t_len) {
  const std::size_t layers = params.layers;
  const std::size_t experts = params.experts;
  std::size_t next = 0;
  NodeId w_p = param_nodes[next++], b_p = param_nodes[next++];
  NodeId w_xi = param_nodes[next++], w_hi = param_nodes[next++],
         b_i = param_nodes[next++];
  NodeId w_xf = param_nodes[next++], w_hf = param_nodes[next++],
         b_f = param_nodes[next++];
  NodeId w_xg = param_nodes[next++], w_hg = param_nodes[next++],
         b_g = param_nodes[next++];
  NodeId w_xo = param_nodes[next++], w_ho = param_nodes[next++],
         b_o = param_nodes[next++];
  NodeId w_c = param_nodes[next++], b_c = param_nodes[next++];

  NodeId h = tape.leaf(Array::zeros({params.hidden_dim}));
  NodeId c = tape.leaf(Array::zeros({params.hidden_dim}));
  for (std::size_t t = 0; t < t_len; ++t) {
    std::vector<NodeId> projected;
    for (std::size_t l = 0; l < layers; ++l) {
      std::vector<std::size_t> idx(experts);
      std::iota(idx.begin(), idx.end(), (t * layers + l) * experts);
      NodeId row = tape.gather(input_node, std::move(idx));
      NodeId normed = tape.layer_norm(row);
      projected.push_back(tape.add(tape.matmul(w_p, normed), b_p));
    }
    NodeId z = tape.concat(projected);
    auto gate = [&](NodeId wx, NodeId wh, NodeId b) {
      return tape.add(tape.add(tape.matmul(wx, z), tape.matmul(wh, h)), b);
    };
    NodeId i = tape.sigmoid(gate(w_xi, w_hi, b_i));
    NodeId f = tape.sigmoid(gate(w_xf, w_hf, b_f));
    NodeId g = tape.tanh(gate(w_xg, w_hg, b_g));
    NodeId o = tape.sigmoid(gate(w_xo, w_ho, b_o));
    c = tape.add(tape.mul(f, c), tape.mul(i, g));
    h = tape.mul(o, tape.tanh(c));
  }
  return tape.add(tape.matmul(w_c, h), b_c);
}

double evaluate_accuracy(const SurrogateParams& params,
                         const TraceDataset& dataset) {
  if (dataset.traces.empty()) {
    throw ContractError("evaluate_accuracy: empty dataset");
  }
  double correct = 0.0;
  for (const RoutingTrace& trace : dataset.traces) {
    const int predicted = forward_trace(params, trace) > 0.0 ? 1 : 0;
    correct += predicted == trace.label ? 1.0 : 0.0;
  }
  return correct / double(dataset.traces.size());
}

SurrogateTrainResult train_surrogate(const TraceDataset& dataset,
                                     const SurrogateConfig& config) {
  config.validate();
  auto [train_set, val_set] =
      split(dataset, SplitSpec{config.train_fraction, config.seed});

  SurrogateTrainResult result;
  result.params =
      SurrogateParams::random_init(dataset.layers, dataset.experts, config);
  auto named_params = result.params.parameter_list();

  std::vector<std::size_t> order(train_set.traces.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(config.seed ^ 0x7ea41ull);
  Adam opt(AdamConfig{config.lr, 0.9, 0.999, 1e-8});

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);
    }
    // length-sorted batches: shuffle decides order inside a length class
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return train_set.traces[a].length() < train_set.traces[b].length();
    });

    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += config.batch_size) {
      const std::size_t stop =
          std::min(start + config.batch_size, order.size());
      Tape tape;
      std::vector<NodeId> param_nodes;
      for (auto& [name, array] : named_params) {
        param_nodes.push_back(tape.leaf(*array));
      }
      std::vector<NodeId> losses;
      for (std::size_t i = start; i < stop; ++i) {
        const RoutingTrace& trace = train_set.traces[order[i]];
        NodeId input = tape.leaf(trace.logits);
        NodeId logit = forward_trace_on_tape(tape, result.params, param_nodes,
                                             input, trace.length());
        losses.push_back(tape.bce_with_logits(logit, double(trace.label)));
      }
      NodeId loss = tape.mean(losses);
      const double loss_value = tape.value(loss)[0];
      if (!std::isfinite(loss_value)) {
        throw TrainingError("non-finite surrogate loss at epoch " +
                            std::to_string(epoch));
      }
      epoch_loss += loss_value * double(stop - start);
      ++batches;

      tape.backward(loss);
      std::vector<Array*> params;
      std::vector<const Array*> grads;
      std::vector<std::string> names;
      for (std::size_t i = 0; i < named_params.size(); ++i) {
        params.push_back(named_params[i].second);
        grads.push_back(&tape.grad(param_nodes[i]));
        names.push_back(named_params[i].first);
      }
      opt.step(params, grads, names);
    }
    result.train_loss.push_back(epoch_loss / double(order.size()));
    result.val_accuracy.push_back(evaluate_accuracy(result.params, val_set));
  }
  return result;
}

Array input_gradient(const SurrogateParams& params, const RoutingTrace& trace,
                     int y_target) {
  const Shape& s = trace.logits.shape();
  if (s.size() != 3 || s[1] != params.layers || s[2] != params.experts) {
    throw ContractError("input_gradient: trace shape does not match surrogate");
  }
  Tape tape;
  auto& self = const_cast<SurrogateParams&>(params);
  std::vector<NodeId> param_nodes;
  for (auto& [name, array] : self.parameter_list()) {
    param_nodes.push_back(tape.leaf(*array));
  }
  NodeId input = tape.leaf(trace.logits);
  NodeId logit =
      forward_trace_on_tape(tape, params, param_nodes, input, s[0]);
  NodeId loss = tape.bce_with_logits(logit, double(y_target));
  tape.backward(loss);
  Array grad = tape.grad(input);
  return Array(s, std::vector<double>(grad.data(), grad.data() + grad.size()));
}

}  // namespace masc
