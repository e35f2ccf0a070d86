#pragma once
// Reverse-mode differentiation over a recorded tape. Graphs here are small
// and fixed (surrogate forward, steering loss, toy MoE trainer), so every
// primitive records a closure that scatters its adjoint back to its inputs.

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "masc/array.hpp"

namespace masc {

class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

struct NodeId {
  std::size_t index = static_cast<std::size_t>(-1);
  bool valid() const { return index != static_cast<std::size_t>(-1); }
};

class Tape {
 public:
  NodeId leaf(Array value);

  const Array& value(NodeId id) const { return nodes_[id.index].value; }
  const Array& grad(NodeId id) const { return nodes_[id.index].grad; }
  std::size_t num_nodes() const { return nodes_.size(); }

  // --- differentiable primitives ---
  NodeId matmul(NodeId a, NodeId b);  // b may be a matrix or a vector
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);  // elementwise
  NodeId scale(NodeId a, double alpha);
  NodeId sigmoid(NodeId a);
  NodeId tanh(NodeId a);
  NodeId relu(NodeId a);
  NodeId sum(NodeId a);            // -> scalar
  NodeId l1(NodeId a);             // -> scalar; subgradient at 0 is 0
  NodeId concat(std::span<const NodeId> parts);
  NodeId slice_row(NodeId matrix, std::size_t row);
  NodeId gather(NodeId vec, std::vector<std::size_t> indices);
  NodeId softmax(NodeId vec);      // max-subtracted
  NodeId normalize_sum(NodeId vec);            // v / sum(v)
  NodeId scale_by(NodeId vec, NodeId scalar);  // elementwise by a scalar node
  NodeId layer_norm(NodeId vec, double eps = 1e-5);  // population std, no affine
  NodeId bce_with_logits(NodeId logit, double label);   // -> scalar
  NodeId ce_with_logits(NodeId logits, std::size_t target);  // -> scalar
  NodeId mean(std::span<const NodeId> scalars);

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse recording
  // order. loss must be scalar. May be called repeatedly; each call
  // recomputes all gradients from scratch.
  void backward(NodeId loss);

 private:
  struct Node {
    Array value;
    Array grad;
    std::function<void(Tape&)> pull;
  };

  NodeId push(Array value, std::function<void(Tape&)> pull);
  Array& grad_mut(NodeId id) { return nodes_[id.index].grad; }

  std::vector<Node> nodes_;
};

}  // namespace masc
