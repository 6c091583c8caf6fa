#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "senerf/autodiff.hpp"

namespace senerf::optim {

struct AdamConfig {
  double lr_grid = 1e-2;     // parameter group 0
  double lr_decoder = 1e-3;  // parameter group 1
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-15;
  double final_fraction = 0.1;  // learning-rate floor of the cosine decay, as a fraction
};

/// Cosine decay from 1 to `floor` over `total` steps.
inline double cosine_factor(std::int64_t step, std::int64_t total, double floor) {
  if (total <= 0) return 1.0;
  const double p = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

template <class T>
class Adam {
 public:
  Adam(std::span<ad::Parameter<T>* const> params, AdamConfig cfg, std::int64_t total_steps)
      : params_(params.begin(), params.end()), cfg_(cfg), total_(total_steps) {
    for (auto* p : params_) {
      m_.emplace_back(p->size(), T(0));
      v_.emplace_back(p->size(), T(0));
    }
  }

  [[nodiscard]] double learning_rate(int group) const {
    const double base = group == 0 ? cfg_.lr_grid : cfg_.lr_decoder;
    return base * cosine_factor(t_, total_, cfg_.final_fraction);
  }

  /// One update from the gradients currently stored on the parameters.
  void step() {
    const double b1t = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_ + 1));
    const double b2t = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_ + 1));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      const double lr = learning_rate(p.group());
      auto& vals = p.values();
      const auto& g = p.grad();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double m = cfg_.beta1 * static_cast<double>(m_[k][i]) + (1 - cfg_.beta1) * gi;
        const double v = cfg_.beta2 * static_cast<double>(v_[k][i]) + (1 - cfg_.beta2) * gi * gi;
        m_[k][i] = static_cast<T>(m);
        v_[k][i] = static_cast<T>(v);
        vals[i] = static_cast<T>(static_cast<double>(vals[i]) - lr * (m / b1t) / (std::sqrt(v / b2t) + cfg_.eps));
      }
    }
    ++t_;
  }

  [[nodiscard]] std::int64_t steps_taken() const { return t_; }

 private:
  std::vector<ad::Parameter<T>*> params_;
  AdamConfig cfg_;
  std::int64_t total_;
  std::int64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace senerf::optim
