#pragma once

#include "detkd/tensor.hpp"

#include <cstdint>
#include <vector>

namespace detkd {

struct SgdConfig {
  double lr0 = 0.03;
  double lr_min = 0.0;
  double momentum = 0.9;
  double weight_decay = 0.0001;
  std::int64_t total_steps = 1;
};

/// lr(t) = lr_min + 0.5 (lr0 - lr_min) (1 + cos(pi t / T)); nonincreasing,
/// lr(0) = lr0, lr(T) = lr_min.
double cosine_lr(const SgdConfig& cfg, std::int64_t t);

/// SGD with momentum and decoupled-from-nothing weight decay folded into
/// the momentum buffer:
///   buf <- mu buf + grad + wd param;  param <- param - lr(t) buf.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Param*> params, SgdConfig cfg);

  /// Applies one update from the gradients on `tape`; increments t.
  /// Requires t < total_steps.
  void step(const Tape& tape);

  std::int64_t step_count() const { return t_; }
  double current_lr() const { return cosine_lr(cfg_, t_); }
  const std::vector<Param*>& params() const { return params_; }

 private:
  std::vector<Param*> params_;
  std::vector<std::vector<double>> momentum_;
  SgdConfig cfg_;
  std::int64_t t_ = 0;
};

}  // namespace detkd
