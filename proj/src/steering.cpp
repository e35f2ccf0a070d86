#include "masc/steering.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "masc/adam.hpp"
#include "masc/container.hpp"
#include "masc/rng.hpp"
#include "masc/tape.hpp"

namespace masc {

LayerStats compute_layer_sigma(const TraceDataset& dataset, double eps) {
  if (dataset.traces.empty()) {
    throw ContractError("compute_layer_sigma: empty dataset");
  }
  dataset.validate();
  const std::size_t layers = dataset.layers;
  const std::size_t experts = dataset.experts;

  LayerStats stats;
  stats.sigma = Array(Shape{layers});
  stats.source = "traces";
  for (std::size_t l = 0; l < layers; ++l) {
    // two-pass mean/variance over every (trace, token, expert) at layer l
    double mean = 0.0;
    std::size_t n = 0;
    for (const RoutingTrace& trace : dataset.traces) {
      const std::size_t t_len = trace.length();
      for (std::size_t t = 0; t < t_len; ++t) {
        for (std::size_t e = 0; e < experts; ++e) {
          mean += trace.logits[(t * layers + l) * experts + e];
          ++n;
        }
      }
    }
    mean /= double(n);
    double var = 0.0;
    for (const RoutingTrace& trace : dataset.traces) {
      const std::size_t t_len = trace.length();
      for (std::size_t t = 0; t < t_len; ++t) {
        for (std::size_t e = 0; e < experts; ++e) {
          const double d =
              trace.logits[(t * layers + l) * experts + e] - mean;
          var += d * d;
        }
      }
    }
    var /= double(n);
    stats.sigma[l] = std::max(std::sqrt(var), eps);
    stats.sample_count = n / experts;
  }
  return stats;
}

SteeringMatrix init_steering_matrix(std::size_t layers, std::size_t experts,
                                    std::uint64_t seed) {
  if (layers < 1 || experts < 1) {
    throw ContractError("init_steering_matrix: L, E must be >= 1");
  }
  const double bound = std::sqrt(6.0 / double(experts));
  Rng rng(seed);
  SteeringMatrix m;
  m.s = Array(Shape{layers, experts});
  for (std::size_t i = 0; i < m.s.size(); ++i) {
    m.s[i] = rng.uniform(-bound, bound);
  }
  return m;
}

Array scale_and_add(const Array& gate_logits, const Array& s,
                    const LayerStats& stats) {
  if (!gate_logits.same_shape(s) || gate_logits.ndim() != 2 ||
      stats.sigma.size() != gate_logits.rows()) {
    throw ContractError("scale_and_add: shapes disagree");
  }
  Array out = gate_logits;
  for (std::size_t l = 0; l < out.rows(); ++l) {
    for (std::size_t e = 0; e < out.cols(); ++e) {
      out.at(l, e) += stats.sigma[l] * s.at(l, e);
    }
  }
  return out;
}

std::pair<double, Array> steering_objective(const SurrogateParams& surrogate,
                                            const TraceDataset& flip_set,
                                            int y_target, const Array& s,
                                            double lambda,
                                            const LayerStats& stats) {
  const std::size_t layers = flip_set.layers;
  const std::size_t experts = flip_set.experts;
  Tape tape;
  std::vector<NodeId> param_nodes;
  auto& params = const_cast<SurrogateParams&>(surrogate);
  for (auto& [name, array] : params.parameter_list()) {
    param_nodes.push_back(tape.leaf(*array));
  }
  NodeId s_node = tape.leaf(s);

  // sigma_l * S_l for one token, reused (concatenated) for every token
  std::vector<NodeId> scaled_rows;
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<std::size_t> idx(experts);
    std::iota(idx.begin(), idx.end(), l * experts);
    scaled_rows.push_back(
        tape.scale(tape.gather(s_node, std::move(idx)), stats.sigma[l]));
  }
  NodeId token_offset = tape.concat(scaled_rows);

  std::vector<NodeId> losses;
  for (const RoutingTrace& trace : flip_set.traces) {
    const std::size_t t_len = trace.length();
    std::vector<NodeId> tiles(t_len, token_offset);
    NodeId offsets = tape.concat(tiles);
    Array flat(Shape{trace.logits.size()},
               std::vector<double>(trace.logits.data(),
                                   trace.logits.data() + trace.logits.size()));
    NodeId steered = tape.add(tape.leaf(std::move(flat)), offsets);
    NodeId logit =
        forward_trace_on_tape(tape, surrogate, param_nodes, steered, t_len);
    losses.push_back(tape.bce_with_logits(logit, double(y_target)));
  }
  NodeId loss = tape.mean(losses);
  if (lambda > 0.0) {
    loss = tape.add(loss, tape.scale(tape.l1(s_node), lambda));
  }
  const double loss_value = tape.value(loss)[0];
  tape.backward(loss);
  const Array& g = tape.grad(s_node);
  Array grad(Shape{layers, experts},
             std::vector<double>(g.data(), g.data() + g.size()));
  return {loss_value, std::move(grad)};
}

SteeringMatrix optimize_mask(const SurrogateParams& surrogate,
                             const TraceDataset& flip_set, int y_target,
                             const OptimizeConfig& config) {
  if (flip_set.traces.empty()) {
    throw ContractError("optimize_mask: empty flip set");
  }
  if (flip_set.layers != surrogate.layers ||
      flip_set.experts != surrogate.experts) {
    throw ContractError("optimize_mask: dataset does not match surrogate");
  }
  if (config.lambda < 0.0) {
    throw ContractError("optimize_mask: lambda must be >= 0");
  }
  LayerStats stats = compute_layer_sigma(flip_set);

  SteeringMatrix matrix =
      init_steering_matrix(flip_set.layers, flip_set.experts, config.seed);
  Adam opt(AdamConfig{config.lr, 0.9, 0.999, 1e-8});

  for (std::size_t step = 0; step < config.steps; ++step) {
    auto [loss_value, grad] = steering_objective(
        surrogate, flip_set, y_target, matrix.s, config.lambda, stats);
    if (!std::isfinite(loss_value)) {
      throw OptimizerError("non-finite steering loss at step " +
                           std::to_string(step));
    }
    matrix.loss_history.push_back(loss_value);
    opt.step({&matrix.s}, {&grad}, {"steering_matrix"});
  }
  matrix.final_l1 = l1_norm(matrix.s);
  return matrix;
}

SteeringMask prune_mask(const SteeringMatrix& matrix, double tau,
                        double lambda, const LayerStats& stats) {
  if (tau < 0.0) throw ContractError("prune_mask: tau must be >= 0");
  SteeringMask mask;
  mask.layers = matrix.s.rows();
  mask.experts = matrix.s.cols();
  mask.lambda = lambda;
  mask.tau = tau;
  mask.stats = stats;
  for (std::size_t l = 0; l < mask.layers; ++l) {
    for (std::size_t e = 0; e < mask.experts; ++e) {
      const double v = matrix.s.at(l, e);
      if (std::abs(v) > tau) mask.entries.push_back({l, e, v});
    }
  }
  return mask;
}

Array SteeringMask::dense() const {
  Array out = Array::zeros({layers, experts});
  for (const MaskEntry& entry : entries) {
    out.at(entry.layer, entry.expert) = entry.value;
  }
  return out;
}

InjectionPayload build_injection_payload(const SteeringMask& mask,
                                         double alpha) {
  if (mask.stats.sigma.size() != mask.layers) {
    throw ContractError("build_injection_payload: mask carries no layer stats");
  }
  InjectionPayload payload;
  payload.kind = InjectionPayload::Kind::kAdditive;
  payload.mask = mask.dense();
  payload.sigma = mask.stats.sigma;
  payload.alpha = alpha;
  return payload;
}

InjectionPayload build_expert_payload(const ExpertMask& mask) {
  InjectionPayload payload;
  payload.kind = InjectionPayload::Kind::kForce;
  payload.mask = mask.mask;
  payload.force_value = mask.force_value;
  payload.sigma = Array::zeros({mask.mask.rows()});
  return payload;
}

void save_mask(const SteeringMask& mask, const std::filesystem::path& path) {
  nlohmann::json doc;
  doc["format_version"] = 1;
  doc["layers"] = mask.layers;
  doc["experts"] = mask.experts;
  doc["lambda"] = mask.lambda;
  doc["tau"] = mask.tau;
  doc["alpha_recommended"] = mask.alpha_recommended;
  doc["sigma"] = nlohmann::json::array();
  for (std::size_t l = 0; l < mask.stats.sigma.size(); ++l) {
    doc["sigma"].push_back(mask.stats.sigma[l]);
  }
  doc["sigma_source"] = mask.stats.source;
  doc["entries"] = nlohmann::json::array();
  for (const MaskEntry& entry : mask.entries) {
    doc["entries"].push_back({entry.layer, entry.expert, entry.value});
  }
  atomic_write_file(path, doc.dump(2) + "\n");
}

SteeringMask load_mask(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid mask JSON: " + std::string(e.what()));
  }
  try {
    if (doc.at("format_version").get<int>() != 1) {
      throw FormatError("unsupported mask format version");
    }
    SteeringMask mask;
    mask.layers = doc.at("layers").get<std::size_t>();
    mask.experts = doc.at("experts").get<std::size_t>();
    mask.lambda = doc.at("lambda").get<double>();
    mask.tau = doc.at("tau").get<double>();
    mask.alpha_recommended = doc.at("alpha_recommended").get<double>();
    mask.stats.sigma = Array(Shape{doc.at("sigma").size()});
    for (std::size_t l = 0; l < mask.stats.sigma.size(); ++l) {
      mask.stats.sigma[l] = doc.at("sigma")[l].get<double>();
    }
    mask.stats.source = doc.value("sigma_source", "");
    for (const auto& triple : doc.at("entries")) {
      MaskEntry entry{triple.at(0).get<std::size_t>(),
                      triple.at(1).get<std::size_t>(),
                      triple.at(2).get<double>()};
      if (entry.layer >= mask.layers || entry.expert >= mask.experts) {
        throw FormatError("mask entry out of range");
      }
      mask.entries.push_back(entry);
    }
    return mask;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("mask JSON missing fields: " + std::string(e.what()));
  }
}

namespace {

// binary top-k occupancy with the same layout as the raw trace
RoutingTrace to_occupancy(const RoutingTrace& trace, std::size_t layers,
                          std::size_t experts, std::size_t top_k) {
  RoutingTrace occ;
  occ.label = trace.label;
  occ.source = trace.source;
  occ.logits = Array::zeros(trace.logits.shape());
  const std::size_t t_len = trace.length();
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t l = 0; l < layers; ++l) {
      Array row(Shape{experts});
      for (std::size_t e = 0; e < experts; ++e) {
        row[e] = trace.logits[(t * layers + l) * experts + e];
      }
      TopKResult sel = top_k_select(row, top_k, SoftmaxMode::kSoftmaxThenTopK);
      for (std::size_t e : sel.indices) {
        occ.logits[(t * layers + l) * experts + e] = 1.0;
      }
    }
  }
  return occ;
}

TraceDataset to_occupancy_dataset(const TraceDataset& dataset,
                                  std::size_t top_k) {
  TraceDataset occ;
  occ.layers = dataset.layers;
  occ.experts = dataset.experts;
  for (const RoutingTrace& trace : dataset.traces) {
    occ.traces.push_back(
        to_occupancy(trace, dataset.layers, dataset.experts, top_k));
  }
  return occ;
}

}  // namespace

ExpertMask expert_steering_pipeline(const TraceDataset& dataset,
                                    const TraceDataset& flip_set, int y_target,
                                    std::size_t top_k,
                                    const ExpertSteeringConfig& config) {
  // the cap leaves at least one routing slot free
  if (config.per_layer_cap >= top_k) {
    throw ContractError(
        "expert_steering_pipeline: per_layer_cap must be < top_k");
  }
  const std::size_t layers = dataset.layers;
  const std::size_t experts = dataset.experts;

  TraceDataset occ_dataset = to_occupancy_dataset(dataset, top_k);
  SurrogateTrainResult trained =
      train_surrogate(occ_dataset, config.surrogate);

  TraceDataset occ_flip = to_occupancy_dataset(flip_set, top_k);
  auto& params = trained.params;
  Adam opt(AdamConfig{config.optimize.lr, 0.9, 0.999, 1e-8});

  // relaxed mask; sigmoid(r) is the per-expert forcing probability
  Array relaxed(Shape{layers, experts});
  Rng rng(config.optimize.seed ^ 0xdecafull);
  for (std::size_t i = 0; i < relaxed.size(); ++i) {
    relaxed[i] = rng.uniform(-3.0, -2.0);  // start mostly off
  }

  for (std::size_t step = 0; step < config.optimize.steps; ++step) {
    Tape tape;
    std::vector<NodeId> param_nodes;
    for (auto& [name, array] : params.parameter_list()) {
      param_nodes.push_back(tape.leaf(*array));
    }
    NodeId r_node = tape.leaf(relaxed);
    NodeId force = tape.sigmoid(r_node);

    std::vector<NodeId> losses;
    for (const RoutingTrace& trace : occ_flip.traces) {
      const std::size_t t_len = trace.length();
      // probabilistic OR with the existing occupancy:
      // occ' = 1 - (1 - occ) * (1 - force)
      Array flat(Shape{trace.logits.size()},
                 std::vector<double>(trace.logits.data(),
                                     trace.logits.data() + trace.logits.size()));
      NodeId occ = tape.leaf(std::move(flat));
      NodeId ones = tape.leaf(Array::full({trace.logits.size()}, 1.0));
      std::vector<NodeId> tiles(t_len, force);
      NodeId force_tiled = tape.concat(tiles);
      NodeId keep = tape.mul(tape.sub(ones, occ),
                             tape.sub(ones, force_tiled));
      NodeId steered = tape.sub(ones, keep);
      NodeId logit =
          forward_trace_on_tape(tape, params, param_nodes, steered, t_len);
      losses.push_back(tape.bce_with_logits(logit, double(y_target)));
    }
    NodeId loss = tape.mean(losses);
    if (config.optimize.lambda > 0.0) {
      loss = tape.add(loss,
                      tape.scale(tape.l1(tape.sigmoid(r_node)),
                                 config.optimize.lambda));
    }
    if (!std::isfinite(tape.value(loss)[0])) {
      throw OptimizerError("non-finite expert-steering loss at step " +
                           std::to_string(step));
    }
    tape.backward(loss);
    opt.step({&relaxed}, {&tape.grad(r_node)}, {"relaxed_expert_mask"});
  }

  ExpertMask mask;
  mask.per_layer_cap = config.per_layer_cap;
  mask.mask = Array::zeros({layers, experts});
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<std::size_t> order(experts);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return relaxed.at(l, a) > relaxed.at(l, b);
    });
    std::size_t kept = 0;
    for (std::size_t e : order) {
      const double p = 1.0 / (1.0 + std::exp(-relaxed.at(l, e)));
      if (p > 0.5 && kept < config.per_layer_cap) {
        mask.mask.at(l, e) = 1.0;
        ++kept;
      }
    }
  }
  return mask;
}

}  // namespace masc
