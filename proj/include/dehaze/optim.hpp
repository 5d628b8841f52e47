#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "dehaze/autodiff.hpp"

namespace dehaze {

/// Adam with bias correction. Parameters without a gradient this step are left untouched.
template <class T>
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  explicit Adam(std::vector<Var<T>> params, Options opt = {}) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) state_.push_back({Tensor<T>(p.shape()), Tensor<T>(p.shape())});
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto& [m, v] = state_[i];
      auto& val = p.mutable_value();
      const auto& g = p.grad();
      for (std::size_t j = 0; j < val.size(); ++j) {
        const double gj = static_cast<double>(g[j]) + opt_.weight_decay * static_cast<double>(val[j]);
        m[j] = static_cast<T>(opt_.beta1 * m[j] + (1.0 - opt_.beta1) * gj);
        v[j] = static_cast<T>(opt_.beta2 * v[j] + (1.0 - opt_.beta2) * gj * gj);
        const double mhat = m[j] / bc1, vhat = v[j] / bc2;
        val[j] = static_cast<T>(val[j] - lr * mhat / (std::sqrt(vhat) + opt_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  long steps() const { return t_; }

 private:
  std::vector<Var<T>> params_;
  Options opt_;
  std::vector<std::pair<Tensor<T>, Tensor<T>>> state_;
  long t_ = 0;
};

/// Cosine annealing from `base` at step 0 to zero at `total`.
inline double cosine_lr(double base, long step, long total) {
  if (total <= 0) return base;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace dehaze
