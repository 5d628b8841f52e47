#pragma once

// Training objectives: l1 + contrastive ratio over a frozen feature pyramid, the
// multi-level contrastive ranking hinge, and the weighted total.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "dehaze/io.hpp"
#include "dehaze/nn.hpp"

namespace dehaze {

/// Frozen multi-level feature extractor standing in for VGG layers.
/// Level v is a 3x3 conv (stride 1 for the first level, 2 afterwards) followed by GELU,
/// or by nothing when the extractor is linear.
template <class T>
class PerceptualExtractor {
 public:
  static constexpr std::uint64_t kDefaultSeed = 0xC0FFEE;

  static std::vector<double> default_weights() { return {1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0}; }

  /// Seeded random pyramid.
  static PerceptualExtractor toy(std::vector<std::size_t> channels = {16, 32, 64, 64, 64},
                                 std::vector<double> weights = default_weights(), bool linear = false,
                                 std::uint64_t seed = kDefaultSeed) {
    if (channels.empty() || channels.size() != weights.size())
      throw ConfigError("perceptual extractor needs one weight per level");
    Rng rng(seed);
    PerceptualExtractor e;
    e.betas_ = std::move(weights);
    e.linear_ = linear;
    std::size_t in = 3;
    for (std::size_t v = 0; v < channels.size(); ++v) {
      Tensor<T> w({channels[v], in, 3, 3});
      const double sd = std::sqrt(2.0 / static_cast<double>(in * 9));
      for (auto& x : w.values()) x = static_cast<T>(rng.normal(0.0, sd));
      e.add_level(std::move(w), Tensor<T>({channels[v]}), v == 0 ? 1 : 2);
      in = channels[v];
    }
    return e;
  }

  /// Weights "perceptual.l<v>.weight" / ".bias" from a checkpoint container.
  static PerceptualExtractor from_tensors(const io::NamedTensors& tensors,
                                          std::vector<double> weights = default_weights(), bool linear = false) {
    PerceptualExtractor e;
    e.betas_ = std::move(weights);
    e.linear_ = linear;
    for (std::size_t v = 0;; ++v) {
      const std::string base = "perceptual.l" + std::to_string(v + 1);
      auto find = [&](const std::string& n) -> const Tensor<float>* {
        for (const auto& [name, t] : tensors)
          if (name == n) return &t;
        return nullptr;
      };
      const auto* w = find(base + ".weight");
      if (!w) break;
      const auto* b = find(base + ".bias");
      Tensor<T> bias = b ? b->template cast<T>() : Tensor<T>({w->dim(0)});
      e.add_level(w->template cast<T>(), std::move(bias), v == 0 ? 1 : 2);
    }
    if (e.levels_.empty()) throw IoError("no perceptual.l1.weight tensor in extractor file");
    if (e.levels_.size() != e.betas_.size())
      throw ConfigError("extractor has " + std::to_string(e.levels_.size()) + " levels but " +
                        std::to_string(e.betas_.size()) + " level weights");
    return e;
  }

  io::NamedTensors to_tensors() const {
    io::NamedTensors out;
    for (std::size_t v = 0; v < levels_.size(); ++v) {
      const std::string base = "perceptual.l" + std::to_string(v + 1);
      out.emplace_back(base + ".weight", levels_[v].weight.value().template cast<float>());
      out.emplace_back(base + ".bias", levels_[v].bias.value().template cast<float>());
    }
    return out;
  }

  std::size_t levels() const { return levels_.size(); }
  const std::vector<double>& weights() const { return betas_; }

  std::vector<Var<T>> features(const Var<T>& image) const {
    std::vector<Var<T>> out;
    Var<T> h = image;
    for (const auto& l : levels_) {
      h = ops::conv2d(h, l.weight, l.bias, l.stride, 1);
      if (!linear_) h = ops::gelu(h);
      out.push_back(h);
    }
    return out;
  }

 private:
  struct Level {
    Var<T> weight, bias;  // never require grad
    std::size_t stride;
  };

  void add_level(Tensor<T> w, Tensor<T> b, std::size_t stride) {
    for (double beta : betas_)
      if (!(beta > 0)) throw ConfigError("perceptual level weights must be positive");
    levels_.push_back({Var<T>(std::move(w), false), Var<T>(std::move(b), false), stride});
  }

  std::vector<Level> levels_;
  std::vector<double> betas_;
  bool linear_ = false;
};

inline constexpr double kRatioEpsilon = 1e-8;

struct LossWeights {
  double lambda = 0.1;  // contrastive term
  double beta1 = 0.1;   // ranking margin vs the initial result
  double beta2 = 0.3;   // ranking margin vs the hazy input
  double gamma = 0.01;  // downstream task term

  void validate() const {
    if (!(lambda >= 0)) throw ConfigError("loss.lambda must be >= 0");
    if (!(gamma >= 0)) throw ConfigError("loss.gamma must be >= 0");
    if (!(beta1 >= 0) || !(beta2 >= 0)) throw ConfigError("ranking margins must be >= 0");
    if (!(beta1 < beta2)) throw ConfigError("loss.beta1 must be smaller than loss.beta2");
  }
};

template <class T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& b) {
  return ops::l1_mean(a, b);
}

/// sum_v beta_v * |phi_v(J) - phi_v(J_pred)|_1 / (|phi_v(J_pred) - phi_v(J_hazy)|_1 + eps).
template <class T>
Var<T> contrastive_ratio(const Var<T>& clear, const Var<T>& pred, const Var<T>& hazy,
                         const PerceptualExtractor<T>& extractor) {
  require_same_shape(clear.value(), pred.value(), "contrastive_ratio");
  require_same_shape(hazy.value(), pred.value(), "contrastive_ratio");
  std::vector<Var<T>> fc, fh;
  {
    NoGradGuard ng;
    fc = extractor.features(clear.detach());
    fh = extractor.features(hazy.detach());
  }
  const auto fp = extractor.features(pred);
  Var<T> total;
  for (std::size_t v = 0; v < fp.size(); ++v) {
    auto num = ops::l1_mean(fc[v], fp[v]);
    auto den = ops::add_scalar(ops::l1_mean(fp[v], fh[v]), static_cast<T>(kRatioEpsilon));
    auto term = ops::scale(ops::div(num, den), static_cast<T>(extractor.weights()[v]));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

/// l1(J', J) + lambda * contrastive_ratio(J, J', J~); used for both the initial and modulated results.
template <class T>
Var<T> predeh_loss(const Var<T>& pred, const Var<T>& clear, const Var<T>& hazy,
                   const PerceptualExtractor<T>& extractor, double lambda) {
  if (!(lambda >= 0)) throw ConfigError("lambda must be >= 0");
  auto l1 = l1_loss(pred, clear);
  if (lambda == 0) return l1;
  return ops::add(l1, ops::scale(contrastive_ratio(clear, pred, hazy, extractor), static_cast<T>(lambda)));
}

template <class T>
Var<T> dehaze_loss(const Var<T>& modulated, const Var<T>& clear, const Var<T>& hazy,
                   const PerceptualExtractor<T>& extractor, double lambda) {
  return predeh_loss(modulated, clear, hazy, extractor, lambda);
}

/// max(l_w - l_p + beta1, 0) + max(l_w - l_h + beta2, 0); only l_w carries a gradient.
template <class T>
Var<T> mcr_loss(const Var<T>& l_w, double l_p, double l_h, double beta1, double beta2) {
  if (!(beta1 < beta2)) throw ConfigError("ranking margins require beta1 < beta2");
  auto a = ops::relu(ops::add_scalar(l_w, static_cast<T>(beta1 - l_p)));
  auto b = ops::relu(ops::add_scalar(l_w, static_cast<T>(beta2 - l_h)));
  return ops::add(a, b);
}

inline double mcr_loss(double l_w, double l_p, double l_h, double beta1, double beta2) {
  if (!(beta1 < beta2)) throw ConfigError("ranking margins require beta1 < beta2");
  return std::max(l_w - l_p + beta1, 0.0) + std::max(l_w - l_h + beta2, 0.0);
}

/// Per-sample mean absolute difference of two batches.
template <class T>
std::vector<double> per_sample_l1(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "per_sample_l1");
  const std::size_t N = a.dim(0), M = a.size() / N;
  std::vector<double> out(N, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    double s = 0;
    for (std::size_t i = n * M; i < (n + 1) * M; ++i) s += std::abs(static_cast<double>(a[i]) - b[i]);
    out[n] = s / static_cast<double>(M);
  }
  return out;
}

/// Batch mean of the ranking hinge with l_w computed per sample from `pred` vs `clear`;
/// l_p and l_h are per-sample constants.
template <class T>
Var<T> mcr_loss_batch(const Var<T>& pred, const Tensor<T>& clear, const std::vector<double>& l_p,
                      const std::vector<double>& l_h, double beta1, double beta2) {
  if (!(beta1 < beta2)) throw ConfigError("ranking margins require beta1 < beta2");
  const auto l_w = per_sample_l1(pred.value(), clear);
  const std::size_t N = l_w.size();
  if (l_p.size() != N || l_h.size() != N) throw InputError("mcr_loss_batch: per-sample terms do not match batch");
  double total = 0;
  std::vector<double> slope(N, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    const double a = l_w[n] - l_p[n] + beta1, b = l_w[n] - l_h[n] + beta2;
    total += std::max(a, 0.0) + std::max(b, 0.0);
    slope[n] = ((a > 0) + (b > 0)) / static_cast<double>(N);
  }
  const std::size_t M = pred.size() / N;
  return make_op<T>(Tensor<T>({1}, static_cast<T>(total / N)), {pred}, [clear, slope, M](Node<T>& self) {
    const auto& pv = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    const double up = self.grad[0];
    for (std::size_t n = 0; n < slope.size(); ++n) {
      if (slope[n] == 0) continue;
      const double k = up * slope[n] / static_cast<double>(M);
      for (std::size_t i = n * M; i < (n + 1) * M; ++i) {
        const double d = static_cast<double>(pv[i]) - clear[i];
        g[i] += static_cast<T>(d > 0 ? k : (d < 0 ? -k : 0.0));
      }
    }
  });
}

struct LossBreakdown {
  double l1 = 0, ratio = 0, dehaze = 0, mcr = 0, down = 0, total = 0;
  double l_w = 0, l_p = 0, l_h = 0;

  bool consistent(double gamma, double tol = 1e-6) const {
    return std::abs(total - (dehaze + mcr + gamma * down)) <= tol;
  }
  bool ordered() const { return l_w < l_p && l_p < l_h; }
};

/// dehaze + mcr + gamma * down.
template <class T>
Var<T> total_loss(const Var<T>& dehaze, const Var<T>& mcr, const std::optional<Var<T>>& down, double gamma) {
  if (!(gamma >= 0)) throw ConfigError("gamma must be >= 0");
  auto t = ops::add(dehaze, mcr);
  if (down && gamma > 0) t = ops::add(t, ops::scale(*down, static_cast<T>(gamma)));
  return t;
}

inline LossBreakdown make_breakdown(double l1, double ratio, double lambda, double mcr, double down,
                                    double gamma) {
  LossBreakdown b;
  b.l1 = l1;
  b.ratio = ratio;
  b.dehaze = l1 + lambda * ratio;
  b.mcr = mcr;
  b.down = down;
  b.total = b.dehaze + b.mcr + gamma * b.down;
  return b;
}

}  // namespace dehaze
