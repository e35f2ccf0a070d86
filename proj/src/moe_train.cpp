#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "masc/adam.hpp"
#include "masc/moe.hpp"
#include "masc/tape.hpp"

namespace masc {

namespace {

// tape-side replica of ToyMoEModel::forward for one sequence; returns the
// final-position vocab logits node
NodeId forward_on_tape(Tape& tape, const ToyMoEModel& model,
                       const std::vector<NodeId>& params,
                       const std::vector<std::size_t>& tokens,
                       std::size_t mix_dims) {
  const MoEConfig& cfg = model.config;
  // parameter_list order: embedding, per layer (gate_w, gate_b, experts
  // w1/b1/w2/b2, shared w1/b1/w2/b2), head_w, head_b
  std::size_t next = 0;
  NodeId emb = params[next++];
  struct LayerNodes {
    NodeId gate_w, gate_b;
    std::vector<std::array<NodeId, 4>> experts;
    std::vector<std::array<NodeId, 4>> shared;
  };
  std::vector<LayerNodes> layers(cfg.num_layers);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    layers[l].gate_w = params[next++];
    layers[l].gate_b = params[next++];
    for (std::size_t e = 0; e < cfg.experts_per_layer; ++e) {
      layers[l].experts.push_back(
          {params[next], params[next + 1], params[next + 2], params[next + 3]});
      next += 4;
    }
    for (std::size_t s = 0; s < cfg.num_shared_experts; ++s) {
      layers[l].shared.push_back(
          {params[next], params[next + 1], params[next + 2], params[next + 3]});
      next += 4;
    }
  }
  NodeId head_w = params[next++];
  NodeId head_b = params[next++];

  Array mix_mask = Array::zeros({cfg.hidden_dim});
  for (std::size_t d = 0; d < mix_dims; ++d) mix_mask[d] = 1.0;
  NodeId mix_mask_node = tape.leaf(mix_mask);

  auto expert_apply = [&](const std::array<NodeId, 4>& p, NodeId h) {
    NodeId u = tape.relu(tape.add(tape.matmul(p[0], h), p[1]));
    return tape.add(tape.matmul(p[2], u), p[3]);
  };

  NodeId h;  // final-position hidden
  NodeId context;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= cfg.vocab_size) {
      throw InputError("token " + std::to_string(tokens[t]) + " out of vocab");
    }
    NodeId e = tape.slice_row(emb, tokens[t]);
    NodeId mixed =
        context.valid() ? tape.add(e, tape.mul(context, mix_mask_node)) : e;
    context = context.valid() ? tape.add(context, e) : e;
    if (t + 1 < tokens.size()) continue;

    h = mixed;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      NodeId logits = tape.add(tape.matmul(layers[l].gate_w, h), layers[l].gate_b);
      TopKResult sel =
          top_k_select(tape.value(logits), cfg.top_k, cfg.softmax_mode);
      NodeId weights = tape.softmax(tape.gather(logits, sel.indices));
      NodeId out = h;
      for (std::size_t i = 0; i < sel.indices.size(); ++i) {
        NodeId contrib = expert_apply(layers[l].experts[sel.indices[i]], h);
        out = tape.add(out, tape.scale_by(contrib, tape.gather(weights, {i})));
      }
      for (const auto& s : layers[l].shared) {
        out = tape.add(out, expert_apply(s, h));
      }
      h = out;
    }
  }
  return tape.add(tape.matmul(head_w, h), head_b);
}

}  // namespace

ToyTrainResult train_toy_moe(const std::vector<TokenExample>& dataset,
                             const MoEConfig& config,
                             const ToyTrainConfig& train) {
  if (dataset.empty()) throw ContractError("train_toy_moe: empty dataset");
  MoEConfig cfg = config;
  cfg.seed = train.seed;
  cfg.validate();

  ToyTrainResult result;
  result.model = ToyMoEModel::random_init(cfg, train.expert_units);
  result.model.mix_dims = train.mix_dims;
  auto named_params = result.model.parameter_list();

  Adam opt(AdamConfig{train.lr, 0.9, 0.999, 1e-8});
  for (std::size_t step = 0; step < train.steps; ++step) {
    Tape tape;
    std::vector<NodeId> param_nodes;
    param_nodes.reserve(named_params.size());
    for (auto& [name, array] : named_params) {
      param_nodes.push_back(tape.leaf(*array));
    }
    std::vector<NodeId> losses;
    losses.reserve(dataset.size());
    for (const TokenExample& ex : dataset) {
      NodeId logits = forward_on_tape(tape, result.model, param_nodes,
                                      ex.tokens, train.mix_dims);
      losses.push_back(tape.ce_with_logits(logits, ex.target));
    }
    NodeId loss = tape.mean(losses);
    const double loss_value = tape.value(loss)[0];
    if (!std::isfinite(loss_value)) {
      throw TrainingError("non-finite loss at step " + std::to_string(step));
    }
    result.loss_history.push_back(loss_value);

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
  return result;
}

}  // namespace masc
