#include "masc/adam.hpp"

#include <cmath>

namespace masc {

void Adam::step(std::vector<Array*> params,
                const std::vector<const Array*>& grads,
                const std::vector<std::string>& names) {
  if (params.size() != grads.size()) {
    throw OptimizerError("adam: parameter/gradient count mismatch");
  }
  if (m_.empty()) {
    for (const Array* p : params) {
      m_.push_back(Array::zeros(p->shape()));
      v_.push_back(Array::zeros(p->shape()));
    }
  }
  if (m_.size() != params.size()) {
    throw OptimizerError("adam: parameter list changed between steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(*grads[i])) {
      throw OptimizerError("adam: shape mismatch for parameter " +
                           (i < names.size() ? names[i] : std::to_string(i)));
    }
    if (!grads[i]->all_finite()) {
      throw OptimizerError("adam: non-finite gradient for parameter " +
                           (i < names.size() ? names[i] : std::to_string(i)));
    }
  }

  ++step_count_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Array& p = *params[i];
    const Array& g = *grads[i];
    Array& m = m_[i];
    Array& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      p[j] -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

}  // namespace masc
