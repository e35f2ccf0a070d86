#pragma once
// Routing-logit trace datasets: capture from a model, stratified
// splitting, and the MASCTRC1 on-disk format. Files hold float32 payloads;
// in-memory traces are float64, so values pass through a float32
// round-trip once at save time and are stable thereafter.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "masc/array.hpp"
#include "masc/moe.hpp"

namespace masc {

struct RoutingTrace {
  Array logits;  // shape T x L x E, raw pre-injection gate logits
  int label = 0;
  std::string source;

  std::size_t length() const { return logits.shape()[0]; }
};

struct TraceDataset {
  std::size_t layers = 0;
  std::size_t experts = 0;
  std::vector<RoutingTrace> traces;

  std::size_t count_label(int label) const;
  void validate() const;  // throws ContractError on shape/label violations
};

struct SplitSpec {
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

// Returns nullopt to abstain; abstained prompts are skipped and counted.
using TraceLabeler =
    std::function<std::optional<int>(const ModelOutput&, std::span<const std::size_t>)>;

struct CollectResult {
  TraceDataset dataset;
  std::size_t skipped = 0;
};

CollectResult collect_traces(const ToyMoEModel& model,
                             const std::vector<std::vector<std::size_t>>& prompts,
                             const TraceLabeler& labeler);

// Stratified per label: floor(fraction * n) per class, then rebalanced so
// both sides keep at least one sample of each class.
std::pair<TraceDataset, TraceDataset> split(const TraceDataset& dataset,
                                            const SplitSpec& spec);

void save_traces(const TraceDataset& dataset, const std::filesystem::path& path,
                 const std::string& convention = "raw affine gate output");
TraceDataset load_traces(const std::filesystem::path& path);

}  // namespace masc
