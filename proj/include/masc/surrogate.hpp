#pragma once
// LSTM behavioral surrogate over routing-logit traces. Per token, each
// layer's logits are normalized across the expert dimension, projected to
// a small embedding, and concatenated across layers; the sequence is run
// through a single LSTM cell and the final hidden state feeds a linear
// head producing one behavior logit per trace.

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "masc/array.hpp"
#include "masc/tape.hpp"
#include "masc/traces.hpp"

namespace masc {

struct SurrogateConfig {
  std::size_t embed_dim = 16;   // D
  std::size_t hidden_dim = 64;  // H
  std::size_t epochs = 15;
  double lr = 0.01;
  std::size_t batch_size = 64;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SurrogateParams {
  std::size_t layers = 0;   // L
  std::size_t experts = 0;  // E
  std::size_t embed_dim = 0;
  std::size_t hidden_dim = 0;

  Array w_p;  // D x E, shared across layers
  Array b_p;  // D
  // LSTM cell, input size L*D, hidden size H; gates i, f, g, o
  Array w_xi, w_hi, b_i;
  Array w_xf, w_hf, b_f;
  Array w_xg, w_hg, b_g;
  Array w_xo, w_ho, b_o;
  Array w_c;  // 1 x H head
  Array b_c;  // length-1

  static SurrogateParams random_init(std::size_t layers, std::size_t experts,
                                     const SurrogateConfig& config);

  std::vector<std::pair<std::string, Array*>> parameter_list();

  void save(const std::filesystem::path& path) const;
  static SurrogateParams load(const std::filesystem::path& path);
};

// plain (non-tape) building blocks, used directly and as test oracles
Array normalize_layer(const Array& x, double eps = 1e-5);
Array project(const SurrogateParams& params, const Array& x_norm);
Array flatten_token(const std::vector<Array>& per_layer);
std::pair<Array, Array> lstm_step(const SurrogateParams& params, const Array& z,
                                  const Array& h, const Array& c);
double classify(const SurrogateParams& params, const Array& h);
double forward_trace(const SurrogateParams& params, const RoutingTrace& trace);
double bce_with_logits_value(double logit, int label);

// tape forward: input_node must hold the trace's T x L x E logits (a leaf
// when gradients w.r.t. the input are wanted); returns the scalar logit node
NodeId forward_trace_on_tape(Tape& tape, const SurrogateParams& params,
                             const std::vector<NodeId>& param_nodes,
                             NodeId input_node, std::size_t t_len);

struct SurrogateTrainResult {
  SurrogateParams params;
  std::vector<double> train_loss;    // one entry per epoch
  std::vector<double> val_accuracy;  // one entry per epoch
};

// Splits the dataset 80/20 stratified by label (seeded by config), trains
// for the configured epochs with length-sorted batches, and reports
// per-epoch train loss and validation accuracy.
SurrogateTrainResult train_surrogate(const TraceDataset& dataset,
                                     const SurrogateConfig& config);

double evaluate_accuracy(const SurrogateParams& params,
                         const TraceDataset& dataset);

// d BCE(forward_trace(trace), y_target) / d logits, shape T x L x E
Array input_gradient(const SurrogateParams& params, const RoutingTrace& trace,
                     int y_target);

}  // namespace masc
