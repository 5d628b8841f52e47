#pragma once

#include <cmath>
#include <vector>

#include "dehaze/losses.hpp"

namespace dehaze::metrics {

inline constexpr double kPsnrCapDb = 99.0;

/// PSNR in dB for signals in [0,1]; capped when the images (nearly) coincide.
template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  if (mse < 1e-10) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(1.0 / mse));
}

/// Mean SSIM over all full 11x11 Gaussian windows (sigma 1.5), averaged over channels.
/// Images are C x H x W with L = 1.
template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "ssim");
  if (a.rank() != 3) throw InputError("ssim expects C x H x W images");
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5, C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  const std::size_t C = a.dim(0), H = a.dim(1), W = a.dim(2);
  if (H < kWin || W < kWin) throw InputError("ssim: image smaller than the 11x11 window");

  std::array<double, kWin> g{};
  double gs = 0;
  for (int i = 0; i < kWin; ++i) {
    const double x = i - kWin / 2;
    g[i] = std::exp(-x * x / (2 * kSigma * kSigma));
    gs += g[i];
  }
  for (auto& v : g) v /= gs;

  const std::size_t Ho = H - kWin + 1, Wo = W - kWin + 1;
  double acc = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const T* pa = a.data() + c * H * W;
    const T* pb = b.data() + c * H * W;
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t x = 0; x < Wo; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int i = 0; i < kWin; ++i)
          for (int j = 0; j < kWin; ++j) {
            const double w = g[i] * g[j];
            const double va = pa[(y + i) * W + x + j], vb = pb[(y + i) * W + x + j];
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        acc += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
      }
  }
  return acc / static_cast<double>(C * Ho * Wo);
}

/// sum over levels of the mean squared feature difference.
template <class T>
double perceptual_distance(const Tensor<T>& a, const Tensor<T>& b, const PerceptualExtractor<T>& extractor) {
  require_same_shape(a, b, "perceptual_distance");
  NoGradGuard ng;
  auto batch = [](const Tensor<T>& t) {
    Shape s = t.shape();
    if (s.size() == 3) s.insert(s.begin(), 1);
    return Var<T>(t.reshaped(s));
  };
  const auto fa = extractor.features(batch(a));
  const auto fb = extractor.features(batch(b));
  double d = 0;
  for (std::size_t v = 0; v < fa.size(); ++v) {
    double s = 0;
    const auto& x = fa[v].value();
    const auto& y = fb[v].value();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double e = static_cast<double>(x[i]) - static_cast<double>(y[i]);
      s += e * e;
    }
    d += s / static_cast<double>(x.size());
  }
  return d;
}

}  // namespace dehaze::metrics
