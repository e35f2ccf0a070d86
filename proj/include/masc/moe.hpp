#pragma once
// Desk-scale Mixture-of-Experts model. Each layer has a gate producing raw
// affine logits per expert; the gate supports capture and injection hooks
// so routing can be recorded and steered. Planted-circuit fixtures couple
// known expert sets to known output tokens and are the ground truth the
// rest of the pipeline is validated against.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "masc/array.hpp"

namespace masc {

enum class SoftmaxMode {
  kSoftmaxThenTopK,  // softmax over all experts, renormalize the selected k
  kTopKThenSoftmax,  // softmax over the selected k only
};

struct MoEConfig {
  std::size_t num_layers = 4;
  std::size_t experts_per_layer = 8;
  std::size_t top_k = 2;
  std::size_t hidden_dim = 16;
  std::size_t num_shared_experts = 0;
  std::size_t vocab_size = 32;
  SoftmaxMode softmax_mode = SoftmaxMode::kSoftmaxThenTopK;
  std::uint64_t seed = 0;

  void validate() const;  // throws ContractError on violation
};

struct TopKResult {
  std::vector<std::size_t> indices;  // k largest logits, ties to lowest index
  Array weights;                     // positive, sums to 1
};

TopKResult top_k_select(const Array& logits, std::size_t k, SoftmaxMode mode);

class InjectionError : public std::runtime_error {
 public:
  explicit InjectionError(const std::string& what) : std::runtime_error(what) {}
};

class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

// Payload added to gate logits before top-k selection. Additive payloads
// compute g' = g + alpha * (sigma_l * mask_l); force payloads overwrite the
// logit of every nonzero mask entry with force_value.
struct InjectionPayload {
  enum class Kind { kAdditive, kForce };
  Kind kind = Kind::kAdditive;
  Array mask;   // L x E
  Array sigma;  // L (unused for kForce)
  double alpha = 1.0;
  double force_value = 1e9;
};

struct GateHook {
  enum class Mode { kCapture, kInject, kBoth };
  Mode mode = Mode::kCapture;
  std::optional<InjectionPayload> payload;

  // captured[t][l] holds the raw pre-injection logits (length E);
  // captured_post additionally holds post-injection logits when injecting.
  std::vector<std::vector<Array>> captured;
  std::vector<std::vector<Array>> captured_post;

  bool capturing() const { return mode != Mode::kInject; }
  bool injecting() const { return mode != Mode::kCapture; }
  void clear();
};

struct ExpertParams {
  Array w1;  // units x hidden
  Array b1;  // units
  Array w2;  // hidden x units
  Array b2;  // hidden
};

struct ModelOutput {
  Array logits;  // T x vocab
  std::vector<std::size_t> tokens() const;  // argmax per position
};

class ToyMoEModel {
 public:
  MoEConfig config;
  Array embedding;                                // vocab x hidden
  std::vector<Array> gate_w;                      // per layer: E x hidden
  std::vector<Array> gate_b;                      // per layer: E
  std::vector<std::vector<ExpertParams>> experts; // [layer][expert]
  std::vector<std::vector<ExpertParams>> shared_experts;  // [layer][shared index]
  Array head_w;                                   // vocab x hidden
  Array head_b;                                   // vocab

  // first mix_dims hidden dims carry running context: the embedding of
  // token t is augmented by the cumulative sum of earlier embeddings on
  // those dims (minimal causal mixing; no attention)
  std::size_t mix_dims = 0;

  static ToyMoEModel random_init(const MoEConfig& config, std::size_t expert_units);

  Array gate_logits(const Array& hidden, std::size_t layer) const;
  Array expert_forward(const ExpertParams& p, const Array& hidden) const;
  Array moe_layer_forward(const Array& hidden, std::size_t layer, GateHook* hook,
                          std::size_t token_index) const;
  ModelOutput forward(std::span<const std::size_t> tokens, GateHook* hook = nullptr) const;

  std::vector<Array> mixed_embeddings(std::span<const std::size_t> tokens) const;

  void save(const std::filesystem::path& path) const;
  static ToyMoEModel load(const std::filesystem::path& path);

  // serialization order for parameter blocks; header also records it
  std::vector<std::pair<std::string, Array*>> parameter_list();
};

// ---- gradient trainer ----

class TrainingError : public std::runtime_error {
 public:
  explicit TrainingError(const std::string& what) : std::runtime_error(what) {}
};

struct TokenExample {
  std::vector<std::size_t> tokens;
  std::size_t target;  // expected argmax at the final position
};

struct ToyTrainConfig {
  std::size_t expert_units = 6;
  std::size_t steps = 200;  // full-batch gradient steps
  double lr = 0.01;
  std::size_t mix_dims = 0;
  std::uint64_t seed = 0;
};

struct ToyTrainResult {
  ToyMoEModel model;
  std::vector<double> loss_history;  // one entry per step
};

// Cross-entropy on the final position; selection is straight-through
// (gradients flow through the softmax weights of the selected experts
// only). Throws TrainingError when the loss goes non-finite.
ToyTrainResult train_toy_moe(const std::vector<TokenExample>& dataset,
                             const MoEConfig& config,
                             const ToyTrainConfig& train);

// ---- planted-circuit fixture ----

struct CircuitSpec {
  std::vector<std::size_t> set_a;  // experts coupled to behavior A (every layer)
  std::vector<std::size_t> set_b;  // experts coupled to behavior B; disjoint from A
  double margin = 0.8;             // routing margin between A and B on flagged input
  double gate_noise = 0.25;        // per-expert gate sensitivity to token identity
  std::uint64_t seed = 0;
};

struct FixtureTokens {
  std::size_t flag_a, flag_b;      // behavior flags (prompt position 0)
  std::size_t uflag_0, uflag_1;    // utility-task flags
  std::size_t eos;                 // final prompt token; gates behavior readout
  std::size_t out_a, out_b;        // behavior output tokens
  std::size_t out_u0, out_u1;      // utility output tokens
  std::size_t first_filler;
  std::size_t num_filler;
  std::size_t junk_base;           // junk token for (layer l, expert e) = junk_base + l*E + e
};

struct PlantedFixture {
  ToyMoEModel model;
  FixtureTokens tokens;
  CircuitSpec circuit;

  // prompts: [flag, fillers..., eos]; filler choice is seeded
  std::vector<std::size_t> behavior_prompt(bool flag_b, std::size_t length,
                                           std::uint64_t seed) const;
  std::vector<std::size_t> utility_prompt(bool uflag_1, std::size_t length,
                                          std::uint64_t seed) const;
};

// Builds a hand-constructed (not trained) model in which flag-A prompts
// route dominantly to set A and emit out_a, and symmetrically for B.
// Throws ContractError if the sets overlap or fall outside [0, E).
PlantedFixture build_planted_fixture(const MoEConfig& config, const CircuitSpec& spec);

void save_fixture(const PlantedFixture& fixture, const std::filesystem::path& path);
PlantedFixture load_fixture(const std::filesystem::path& path);

}  // namespace masc
