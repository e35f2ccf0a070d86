#pragma once
// Glue for the command-line workflow: a single JSON-configurable bundle of
// fixture, collection, surrogate, optimization, and evaluation settings,
// plus manifest output alongside every artifact.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "masc/analysis.hpp"
#include "masc/moe.hpp"
#include "masc/steering.hpp"
#include "masc/traces.hpp"

namespace masc {

struct PipelineConfig {
  std::size_t layers = 4;
  std::size_t experts = 8;
  std::size_t top_k = 2;
  double margin = 0.8;
  double gate_noise = 0.25;
  std::size_t prompts_per_class = 200;
  std::size_t prompt_length = 10;
  std::size_t flip_set_size = 40;
  double tau = 0.1;
  std::uint64_t seed = 7;
  SurrogateConfig surrogate;
  OptimizeConfig optimize;
  EvalConfig eval;
  SweepConfig sweep;

  // pins every stage seed to a distinct stream of the master seed
  void reseed(std::uint64_t master);
  void validate() const;
};

// strict parse: unknown keys anywhere in the document are format errors
PipelineConfig parse_pipeline_config(const std::string& json_text);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

// circuit sets cover the expert grid: A = first half, B = second half
PlantedFixture make_fixture(const PipelineConfig& config);

std::vector<std::vector<std::size_t>> behavior_prompts(
    const PlantedFixture& fixture, std::size_t per_class, std::size_t length,
    std::uint64_t seed);

// labels by the emitted behavior token, abstains on anything else
TraceLabeler behavior_labeler(const PlantedFixture& fixture);

// first `count` traces with the requested label
TraceDataset flip_subset(const TraceDataset& dataset, int label,
                         std::size_t count);

// writes "<artifact>.manifest.json" describing how the artifact was built;
// content is deterministic so reruns are byte-comparable
void write_manifest(
    const std::filesystem::path& artifact, const std::string& kind,
    const std::vector<std::pair<std::string, std::string>>& fields);

}  // namespace masc
