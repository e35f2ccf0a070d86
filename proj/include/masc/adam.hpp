#pragma once
// Adam with bias correction. Parameters are updated in place; moment
// buffers are keyed by position, so the parameter list must be stable
// across steps.

#include <stdexcept>
#include <string>
#include <vector>

#include "masc/array.hpp"

namespace masc {

class OptimizerError : public std::runtime_error {
 public:
  explicit OptimizerError(const std::string& what) : std::runtime_error(what) {}
};

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // names are used only for error reporting; pass {} to use indices
  void step(std::vector<Array*> params, const std::vector<const Array*>& grads,
            const std::vector<std::string>& names = {});

  std::size_t step_count() const { return step_count_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::size_t step_count_ = 0;
  std::vector<Array> m_;
  std::vector<Array> v_;
};

}  // namespace masc
