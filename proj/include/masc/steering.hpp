#pragma once
// Steering-matrix optimization through a frozen surrogate, magnitude
// pruning, and payload construction for gate-logit injection. Also hosts
// the discrete expert-forcing baseline trained on top-k occupancy.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "masc/array.hpp"
#include "masc/moe.hpp"
#include "masc/surrogate.hpp"
#include "masc/traces.hpp"

namespace masc {

struct LayerStats {
  Array sigma;  // length L, floored at 1e-8
  std::string source;
  std::size_t sample_count = 0;  // tokens that entered the estimate
};

struct SteeringMatrix {
  Array s;  // L x E
  std::string init_scheme = "kaiming_uniform";
  std::vector<double> loss_history;  // one entry per optimizer step
  double final_l1 = 0.0;
};

struct MaskEntry {
  std::size_t layer = 0;
  std::size_t expert = 0;
  double value = 0.0;
};

struct SteeringMask {
  std::size_t layers = 0;
  std::size_t experts = 0;
  std::vector<MaskEntry> entries;  // only |value| > tau survivors
  double lambda = 0.0;
  double tau = 0.0;
  double alpha_recommended = 1.0;
  LayerStats stats;

  Array dense() const;  // L x E with zeros for pruned entries
  std::size_t nnz() const { return entries.size(); }
};

struct ExpertMask {
  Array mask;  // binary L x E
  double force_value = 1e9;
  std::size_t per_layer_cap = 1;
};

// population std over every token, trace, and expert entry at each layer
LayerStats compute_layer_sigma(const TraceDataset& dataset,
                               double eps = 1e-8);

SteeringMatrix init_steering_matrix(std::size_t layers, std::size_t experts,
                                    std::uint64_t seed);

// per-token adaptive scaling: out_{l,e} = g_{l,e} + sigma_l * s_{l,e}
Array scale_and_add(const Array& gate_logits, const Array& s,
                    const LayerStats& stats);

struct OptimizeConfig {
  double lambda = 1e-4;
  std::size_t steps = 500;
  double lr = 0.01;
  std::uint64_t seed = 0;
};

// composite objective (mean BCE toward y_target on adaptively scaled logits
// plus lambda * |S|_1) and its gradient with respect to S
std::pair<double, Array> steering_objective(const SurrogateParams& surrogate,
                                            const TraceDataset& flip_set,
                                            int y_target, const Array& s,
                                            double lambda,
                                            const LayerStats& stats);

// Adam on S only, full batch over the flip set
SteeringMatrix optimize_mask(const SurrogateParams& surrogate,
                             const TraceDataset& flip_set, int y_target,
                             const OptimizeConfig& config);

SteeringMask prune_mask(const SteeringMatrix& matrix, double tau,
                        double lambda, const LayerStats& stats);

InjectionPayload build_injection_payload(const SteeringMask& mask, double alpha);
InjectionPayload build_expert_payload(const ExpertMask& mask);

// mask file: JSON text, decimal round-trip at 17 significant digits
void save_mask(const SteeringMask& mask, const std::filesystem::path& path);
SteeringMask load_mask(const std::filesystem::path& path);

struct ExpertSteeringConfig {
  SurrogateConfig surrogate;
  OptimizeConfig optimize;
  std::size_t per_layer_cap = 1;  // at most k-1 forced experts per layer
};

// Discrete baseline: binarize traces to top-k occupancy, train a surrogate
// on the occupancy, optimize a sigmoid-relaxed mask, threshold at 0.5, and
// keep at most per_layer_cap experts per layer (largest relaxations win).
ExpertMask expert_steering_pipeline(const TraceDataset& dataset,
                                    const TraceDataset& flip_set, int y_target,
                                    std::size_t top_k,
                                    const ExpertSteeringConfig& config);

}  // namespace masc
