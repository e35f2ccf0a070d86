#pragma once
// Post-hoc analysis: expert selection frequencies, output-health scoring,
// behavior/utility evaluation under a steering payload, and the
// lambda/alpha/tau sweep with CSV export.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "masc/moe.hpp"
#include "masc/steering.hpp"
#include "masc/traces.hpp"

namespace masc {

// outputs with this much 2-gram repetition are counted as collapsed
inline constexpr double kDegenerateThreshold = 0.6;

// 1 - distinct/total over adjacent token pairs; 0 when nothing repeats,
// approaches 1 for constant output, defined as 0 below two tokens
double degeneracy_metric(std::span<const std::size_t> tokens);

struct SelectionFrequency {
  std::size_t layers = 0;
  std::size_t experts = 0;
  std::size_t top_k = 0;
  std::size_t tokens = 0;  // positions that entered the average
  Array freq;              // L x E, each layer row sums to top_k
};

// fraction of token positions each expert lands in the top-k, measured by
// re-running selection on the recorded gate logits
SelectionFrequency selection_frequency(const TraceDataset& dataset,
                                       std::size_t top_k);

Array frequency_delta(const SelectionFrequency& before,
                      const SelectionFrequency& after);

// records post-injection gate logits for every prompt as an unlabeled
// dataset; pass a null payload for the clean model
TraceDataset capture_routing(
    const ToyMoEModel& model,
    const std::vector<std::vector<std::size_t>>& prompts,
    const InjectionPayload* payload);

// rows "layer,expert,delta"
void write_delta_csv(const Array& delta, const std::filesystem::path& path);

struct EvalConfig {
  std::size_t prompts = 40;
  std::size_t prompt_length = 10;
  std::uint64_t seed = 977;
};

struct EvalResult {
  double success = 0.0;     // flip prompts reaching the target with healthy output
  double utility = 0.0;     // utility prompts answered correctly
  double degenerate = 0.0;  // flip prompts past the health threshold
};

// runs source-behavior prompts and utility prompts through the model under
// the payload (nullptr = clean pass); success requires the opposite
// behavior token and a healthy output
EvalResult evaluate_payload(const PlantedFixture& fixture,
                            const InjectionPayload* payload, bool source_flag_b,
                            const EvalConfig& config);

struct SweepCell {
  double lambda = 0.0;
  double alpha = 0.0;
  double tau = 0.0;
  double success = 0.0;
  double utility_before = 0.0;
  double utility_after = 0.0;
  std::size_t nnz = 0;
  double degenerate = 0.0;
};

struct SweepConfig {
  std::vector<double> lambdas = {0.0, 1e-5, 1e-4, 1e-3};
  std::vector<double> alphas = {0.25, 0.5,  0.75, 1.0,
                                1.25, 1.5,  1.75, 2.0};
  std::vector<double> taus = {0.0, 0.1, 0.2, 0.5, 0.75};
  OptimizeConfig optimize;
  EvalConfig eval;
  std::size_t jobs = 1;
};

// one optimization per lambda, then every (alpha, tau) cell evaluated on
// fresh prompts; cells come back in grid order regardless of thread count
std::vector<SweepCell> run_sweep(const PlantedFixture& fixture,
                                 const SurrogateParams& surrogate,
                                 const TraceDataset& flip_set, int y_target,
                                 bool source_flag_b, const SweepConfig& config);

// rows "lambda,alpha,tau,success,utility_before,utility_after,nnz,degenerate"
void write_sweep_csv(const std::vector<SweepCell>& cells,
                     const std::filesystem::path& path);

// highest success at the given lambda/tau slice; ties take the smallest
// alpha. Empty slice is a contract violation.
double choose_alpha(const std::vector<SweepCell>& cells, double lambda,
                    double tau);

}  // namespace masc
