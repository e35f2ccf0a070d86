#include "masc/tape.hpp"

#include <cmath>

#include "masc/kernels.hpp"

namespace masc {
namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

NodeId Tape::push(Array value, std::function<void(Tape&)> pull) {
  nodes_.push_back({std::move(value), Array(), std::move(pull)});
  return {nodes_.size() - 1};
}

NodeId Tape::leaf(Array value) { return push(std::move(value), nullptr); }

NodeId Tape::matmul(NodeId a, NodeId b) {
  const Array& av = value(a);
  const Array& bv = value(b);
  if (av.ndim() != 2) throw DimensionError("matmul: lhs must be a matrix");
  const std::size_t m = av.rows(), k = av.cols();
  Array outv;
  if (bv.ndim() == 1) {
    if (bv.size() != k) {
      throw DimensionError("matmul: inner dimensions disagree (" +
                           shape_string(av) + " x " + shape_string(bv) + ")");
    }
    outv = Array(Shape{m});
    for (std::size_t i = 0; i < m; ++i) {
      outv[i] = kernels::dot(av.data() + i * k, bv.data(), k);
    }
  } else {
    outv = masc::matmul(av, bv);
  }
  NodeId out = push(std::move(outv), nullptr);
  nodes_[out.index].pull = [a, b, out, m, k](Tape& t) {
    const Array& g = t.grad(out);
    const Array& av2 = t.value(a);
    const Array& bv2 = t.value(b);
    Array& ga = t.grad_mut(a);
    Array& gb = t.grad_mut(b);
    if (bv2.ndim() == 1) {
      // out_i = dot(A_i, b):  gA_i += g_i * b,  gb += g_i * A_i
      for (std::size_t i = 0; i < m; ++i) {
        kernels::axpy(g[i], bv2.data(), ga.data() + i * k, k);
        kernels::axpy(g[i], av2.data() + i * k, gb.data(), k);
      }
    } else {
      const std::size_t n = bv2.cols();
      // gA = g . B^T,  gB = A^T . g
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          ga.data()[i * k + p] +=
              kernels::dot(g.data() + i * n, bv2.data() + p * n, n);
          kernels::axpy(av2.at(i, p), g.data() + i * n, gb.data() + p * n, n);
        }
      }
    }
  };
  return out;
}

NodeId Tape::add(NodeId a, NodeId b) {
  NodeId out = push(masc::add(value(a), value(b)), nullptr);
  nodes_[out.index].pull = [a, b, out](Tape& t) {
    const Array& g = t.grad(out);
    kernels::axpy(1.0, g.data(), t.grad_mut(a).data(), g.size());
    kernels::axpy(1.0, g.data(), t.grad_mut(b).data(), g.size());
  };
  return out;
}

NodeId Tape::sub(NodeId a, NodeId b) {
  NodeId out = push(masc::sub(value(a), value(b)), nullptr);
  nodes_[out.index].pull = [a, b, out](Tape& t) {
    const Array& g = t.grad(out);
    kernels::axpy(1.0, g.data(), t.grad_mut(a).data(), g.size());
    kernels::axpy(-1.0, g.data(), t.grad_mut(b).data(), g.size());
  };
  return out;
}

NodeId Tape::mul(NodeId a, NodeId b) {
  NodeId out = push(masc::mul(value(a), value(b)), nullptr);
  nodes_[out.index].pull = [a, b, out](Tape& t) {
    const Array& g = t.grad(out);
    const Array& av = t.value(a);
    const Array& bv = t.value(b);
    Array& ga = t.grad_mut(a);
    Array& gb = t.grad_mut(b);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * bv[i];
      gb[i] += g[i] * av[i];
    }
  };
  return out;
}

NodeId Tape::scale(NodeId a, double alpha) {
  NodeId out = push(masc::scale(value(a), alpha), nullptr);
  nodes_[out.index].pull = [a, out, alpha](Tape& t) {
    const Array& g = t.grad(out);
    kernels::axpy(alpha, g.data(), t.grad_mut(a).data(), g.size());
  };
  return out;
}

NodeId Tape::sigmoid(NodeId a) {
  Array outv(value(a).shape());
  for (std::size_t i = 0; i < outv.size(); ++i) {
    outv[i] = stable_sigmoid(value(a)[i]);
  }
  NodeId out = push(std::move(outv), nullptr);
  nodes_[out.index].pull = [a, out](Tape& t) {
    const Array& g = t.grad(out);
    const Array& y = t.value(out);
    Array& ga = t.grad_mut(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * y[i] * (1.0 - y[i]);
    }
  };
  return out;
}

NodeId Tape::tanh(NodeId a) {
  Array outv(value(a).shape());
  for (std::size_t i = 0; i < outv.size(); ++i) {
    outv[i] = std::tanh(value(a)[i]);
  }
  NodeId out = push(std::move(outv), nullptr);
  nodes_[out.index].pull = [a, out](Tape& t) {
    const Array& g = t.grad(out);
    const Array& y = t.value(out);
    Array& ga = t.grad_mut(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * (1.0 - y[i] * y[i]);
    }
  };
  return out;
}

NodeId Tape::relu(NodeId a) {
  Array outv(value(a).shape());
  for (std::size_t i = 0; i < outv.size(); ++i) {
    outv[i] = value(a)[i] > 0.0 ? value(a)[i] : 0.0;
  }
  NodeId out = push(std::move(outv), nullptr);
  nodes_[out.index].pull = [a, out](Tape& t) {
    const Array& g = t.grad(out);
    const Array& x = t.value(a);
    Array& ga = t.grad_mut(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) ga[i] += g[i];
    }
  };
  return out;
}

NodeId Tape::sum(NodeId a) {
  NodeId out = push(Array{masc::sum(value(a))}, nullptr);
  nodes_[out.index].pull = [a, out](Tape& t) {
    const double g = t.grad(out)[0];
    Array& ga = t.grad_mut(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  };
  return out;
}

NodeId Tape::l1(NodeId a) {
  NodeId out = push(Array{l1_norm(value(a))}, nullptr);
  nodes_[out.index].pull = [a, out](Tape& t) {
    const double g = t.grad(out)[0];
    const Array& x = t.value(a);
    Array& ga = t.grad_mut(a);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (x[i] > 0.0) {
        ga[i] += g;
      } else if (x[i] < 0.0) {
        ga[i] -= g;
      }
      // exact zero: subgradient taken as 0
    }
  };
  return out;
}

NodeId Tape::concat(std::span<const NodeId> parts) {
  std::size_t total = 0;
  for (NodeId p : parts) total += value(p).size();
  Array outv(Shape{total});
  std::size_t off = 0;
  for (NodeId p : parts) {
    const Array& v = value(p);
    for (std::size_t i = 0; i < v.size(); ++i) outv[off + i] = v[i];
    off += v.size();
  }
  std::vector<NodeId> owned(parts.begin(), parts.end());
  NodeId out = push(std::move(outv), nullptr);
  nodes_[out.index].pull = [owned, out](Tape& t) {
    const Array& g = t.grad(out);
    std::size_t off2 = 0;
    for (NodeId p : owned) {
      Array& gp = t.grad_mut(p);
      kernels::axpy(1.0, g.data() + off2, gp.data(), gp.size());
      off2 += gp.size();
    }
  };
  return out;
}

NodeId Tape::slice_row(NodeId matrix, std::size_t row) {
  const Array& m = value(matrix);
  if (m.ndim() != 2 || row >= m.rows()) {
    throw DimensionError("slice_row: bad row for " + shape_string(m));
  }
  const std::size_t n = m.cols();
  Array outv(Shape{n});
  for (std::size_t i = 0; i < n; ++i) outv[i] = m.at(row, i);
  NodeId out = push(std::move(outv), nullptr);
  nodes_[out.index].pull = [matrix, row, n, out](Tape& t) {
    const Array& g = t.grad(out);
    kernels::axpy(1.0, g.data(), t.grad_mut(matrix).data() + row * n, n);
  };
  return out;
}

NodeId Tape::gather(NodeId vec, std::vector<std::size_t> indices) {
  const Array& v = value(vec);
  Array outv(Shape{indices.size()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= v.size()) throw DimensionError("gather: index out of range");
    outv[i] = v[indices[i]];
  }
  NodeId out = push(std::move(outv), nullptr);
  nodes_[out.index].pull = [vec, idx = std::move(indices), out](Tape& t) {
    const Array& g = t.grad(out);
    Array& gv = t.grad_mut(vec);
    for (std::size_t i = 0; i < idx.size(); ++i) gv[idx[i]] += g[i];
  };
  return out;
}

NodeId Tape::softmax(NodeId vec) {
  const Array& x = value(vec);
  Array outv(x.shape());
  const double m = max_value(x);
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    outv[i] = std::exp(x[i] - m);
    z += outv[i];
  }
  for (std::size_t i = 0; i < x.size(); ++i) outv[i] /= z;
  NodeId out = push(std::move(outv), nullptr);
  nodes_[out.index].pull = [vec, out](Tape& t) {
    const Array& g = t.grad(out);
    const Array& y = t.value(out);
    const double gy = kernels::dot(g.data(), y.data(), g.size());
    Array& gv = t.grad_mut(vec);
    for (std::size_t i = 0; i < g.size(); ++i) {
      gv[i] += y[i] * (g[i] - gy);
    }
  };
  return out;
}

NodeId Tape::normalize_sum(NodeId vec) {
  const Array& x = value(vec);
  const double s = masc::sum(x);
  Array outv = masc::scale(x, 1.0 / s);
  NodeId out = push(std::move(outv), nullptr);
  nodes_[out.index].pull = [vec, out, s](Tape& t) {
    const Array& g = t.grad(out);
    const Array& y = t.value(out);
    const double gy = kernels::dot(g.data(), y.data(), g.size());
    Array& gv = t.grad_mut(vec);
    for (std::size_t i = 0; i < g.size(); ++i) {
      gv[i] += (g[i] - gy) / s;
    }
  };
  return out;
}

NodeId Tape::scale_by(NodeId vec, NodeId scalar) {
  if (value(scalar).size() != 1) {
    throw ContractError("scale_by: scale must be a scalar node");
  }
  const double s = value(scalar)[0];
  NodeId out = push(masc::scale(value(vec), s), nullptr);
  nodes_[out.index].pull = [vec, scalar, out, s](Tape& t) {
    const Array& g = t.grad(out);
    const Array& x = t.value(vec);
    kernels::axpy(s, g.data(), t.grad_mut(vec).data(), g.size());
    t.grad_mut(scalar)[0] += kernels::dot(g.data(), x.data(), g.size());
  };
  return out;
}

NodeId Tape::layer_norm(NodeId vec, double eps) {
  const Array& x = value(vec);
  const std::size_t n = x.size();
  const double mean = masc::sum(x) / static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x[i] - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  const double inv_std = 1.0 / std::sqrt(var + eps);
  Array outv(x.shape());
  for (std::size_t i = 0; i < n; ++i) outv[i] = (x[i] - mean) * inv_std;
  NodeId out = push(std::move(outv), nullptr);
  nodes_[out.index].pull = [vec, out, inv_std](Tape& t) {
    const Array& g = t.grad(out);
    const Array& y = t.value(out);
    const std::size_t n2 = g.size();
    const double mean_g = kernels::sum(g.data(), n2) / static_cast<double>(n2);
    const double mean_gy =
        kernels::dot(g.data(), y.data(), n2) / static_cast<double>(n2);
    Array& gv = t.grad_mut(vec);
    for (std::size_t i = 0; i < n2; ++i) {
      gv[i] += inv_std * (g[i] - mean_g - y[i] * mean_gy);
    }
  };
  return out;
}

NodeId Tape::bce_with_logits(NodeId logit, double label) {
  if (value(logit).size() != 1) {
    throw ContractError("bce_with_logits: logit must be scalar");
  }
  const double x = value(logit)[0];
  // max(x,0) - x*y + log1p(exp(-|x|))
  const double loss =
      (x > 0.0 ? x : 0.0) - x * label + std::log1p(std::exp(-std::abs(x)));
  NodeId out = push(Array{loss}, nullptr);
  nodes_[out.index].pull = [logit, out, x, label](Tape& t) {
    const double g = t.grad(out)[0];
    t.grad_mut(logit)[0] += g * (stable_sigmoid(x) - label);
  };
  return out;
}

NodeId Tape::ce_with_logits(NodeId logits, std::size_t target) {
  const Array& z = value(logits);
  if (target >= z.size()) throw ContractError("ce_with_logits: target out of range");
  const double m = max_value(z);
  double lse = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) lse += std::exp(z[i] - m);
  lse = m + std::log(lse);
  NodeId out = push(Array{lse - z[target]}, nullptr);
  nodes_[out.index].pull = [logits, target, out, m, lse](Tape& t) {
    const double g = t.grad(out)[0];
    const Array& z2 = t.value(logits);
    Array& gz = t.grad_mut(logits);
    (void)m;
    for (std::size_t i = 0; i < z2.size(); ++i) {
      gz[i] += g * std::exp(z2[i] - lse);
    }
    gz[target] -= g;
  };
  return out;
}

NodeId Tape::mean(std::span<const NodeId> scalars) {
  if (scalars.empty()) throw ContractError("mean: empty node list");
  double acc = 0.0;
  for (NodeId s : scalars) {
    if (value(s).size() != 1) throw ContractError("mean: non-scalar term");
    acc += value(s)[0];
  }
  const double inv = 1.0 / static_cast<double>(scalars.size());
  std::vector<NodeId> owned(scalars.begin(), scalars.end());
  NodeId out = push(Array{acc * inv}, nullptr);
  nodes_[out.index].pull = [owned, out, inv](Tape& t) {
    const double g = t.grad(out)[0] * inv;
    for (NodeId s : owned) t.grad_mut(s)[0] += g;
  };
  return out;
}

void Tape::backward(NodeId loss) {
  if (!loss.valid() || value(loss).size() != 1) {
    throw ContractError("backward: loss node must be scalar");
  }
  for (auto& n : nodes_) {
    n.grad = Array::zeros(n.value.shape());
  }
  nodes_[loss.index].grad[0] = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    if (nodes_[i].pull) nodes_[i].pull(*this);
  }
}

}  // namespace masc
