#include "detkd/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace detkd {

double cosine_lr(const SgdConfig& cfg, std::int64_t t) {
  if (cfg.total_steps <= 0) return cfg.lr0;
  const double frac = static_cast<double>(t) / static_cast<double>(cfg.total_steps);
  return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + std::cos(3.141592653589793 * frac));
}

SgdOptimizer::SgdOptimizer(std::vector<Param*> params, SgdConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  momentum_.reserve(params_.size());
  for (const Param* p : params_) {
    momentum_.emplace_back(p->value.data.size(), 0.0);
  }
}

void SgdOptimizer::step(const Tape& tape) {
  if (t_ >= cfg_.total_steps) throw std::invalid_argument("optimizer stepped past total_steps");
  const double lr = cosine_lr(cfg_, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param& p = *params_[i];
    const Tensor g = tape.grad(p);
    if (g.data.size() != p.value.data.size()) {
      throw std::invalid_argument("gradient shape mismatch for " + p.name);
    }
    auto& buf = momentum_[i];
    for (std::size_t j = 0; j < buf.size(); ++j) {
      buf[j] = cfg_.momentum * buf[j] + g.data[j] + cfg_.weight_decay * p.value.data[j];
      p.value.data[j] -= lr * buf[j];
    }
  }
  ++t_;
}

}  // namespace detkd
