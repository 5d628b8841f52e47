#pragma once

// Atmospheric scattering model: J~ = J t + A (1 - t), t = exp(-beta d).

#include <array>
#include <cmath>
#include <string>

#include "dehaze/tensor.hpp"

namespace dehaze {

/// Raised when inversion would divide by a transmission below the guard.
struct DegenerateTransmissionError : InputError {
  DegenerateTransmissionError(double fraction_, double t_min)
      : InputError("degenerate transmission: " + std::to_string(fraction_ * 100.0) +
                   "% of pixels have t < " + std::to_string(t_min)),
        fraction(fraction_) {}
  double fraction;
};

/// Per-pixel scene depth (H x W), strictly positive and finite.
template <class T>
class DepthMap {
 public:
  DepthMap() = default;
  explicit DepthMap(Tensor<T> values) : values_(std::move(values)) {
    if (values_.rank() != 2) throw InputError("depth map must be H x W, got " + shape_str(values_.shape()));
    for (T v : values_.values()) {
      if (!std::isfinite(v)) throw InputError("depth map contains a non-finite value");
      if (!(v > T(0))) throw InputError("depth map values must be strictly positive");
    }
  }

  const Tensor<T>& values() const { return values_; }
  std::size_t height() const { return values_.dim(0); }
  std::size_t width() const { return values_.dim(1); }

 private:
  Tensor<T> values_;
};

struct HazeParams {
  double beta = 0.0;
  std::array<double, 3> airlight{1.0, 1.0, 1.0};

  void validate() const {
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw InputError("haze beta must be finite and >= 0");
    for (double a : airlight)
      if (!(a >= 0.0 && a <= 1.0)) throw InputError("airlight components must lie in [0,1]");
  }
};

template <class T>
struct TransmissionMap {
  Tensor<T> values;  // H x W, in (0,1] except where exp underflows
};

/// Inversion guard; keeps noise amplification at most 1/t_min = 20x.
inline constexpr double kMinTransmission = 0.05;

template <class T>
TransmissionMap<T> transmission(const DepthMap<T>& depth, double beta) {
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw InputError("beta must be finite and >= 0");
  TransmissionMap<T> t{Tensor<T>(depth.values().shape())};
  const auto& d = depth.values();
  for (std::size_t i = 0; i < d.size(); ++i)
    t.values[i] = static_cast<T>(std::exp(-beta * static_cast<double>(d[i])));
  return t;
}

namespace detail {
template <class T>
void check_image_vs_depth(const Tensor<T>& img, const DepthMap<T>& depth, const char* what) {
  if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != depth.height() || img.dim(2) != depth.width())
    throw InputError(std::string(what) + ": image " + shape_str(img.shape()) +
                     " does not match depth " + shape_str(depth.values().shape()));
}
}  // namespace detail

/// Hazy rendering of a clear 3 x H x W image.
template <class T>
Tensor<T> synthesize_haze(const Tensor<T>& clear, const DepthMap<T>& depth, const HazeParams& params) {
  detail::check_image_vs_depth(clear, depth, "synthesize_haze");
  params.validate();
  const auto t = transmission(depth, params.beta);
  const std::size_t hw = depth.values().size();
  Tensor<T> out(clear.shape());
  for (std::size_t c = 0; c < 3; ++c) {
    const double a = params.airlight[c];
    for (std::size_t p = 0; p < hw; ++p) {
      const double tv = t.values[p];
      const double v = static_cast<double>(clear[c * hw + p]) * tv + a * (1.0 - tv);
      out[c * hw + p] = static_cast<T>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

/// Analytic inverse of synthesize_haze, clamped to [0,1].
template <class T>
Tensor<T> invert_haze(const Tensor<T>& hazy, const DepthMap<T>& depth, const HazeParams& params,
                      double t_min = kMinTransmission) {
  detail::check_image_vs_depth(hazy, depth, "invert_haze");
  params.validate();
  const auto t = transmission(depth, params.beta);
  const std::size_t hw = depth.values().size();
  std::size_t bad = 0;
  for (std::size_t p = 0; p < hw; ++p)
    if (static_cast<double>(t.values[p]) < t_min) ++bad;
  if (bad) throw DegenerateTransmissionError(static_cast<double>(bad) / static_cast<double>(hw), t_min);
  Tensor<T> out(hazy.shape());
  for (std::size_t c = 0; c < 3; ++c) {
    const double a = params.airlight[c];
    for (std::size_t p = 0; p < hw; ++p) {
      const double tv = t.values[p];
      const double v = (static_cast<double>(hazy[c * hw + p]) - a * (1.0 - tv)) / tv;
      out[c * hw + p] = static_cast<T>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

}  // namespace dehaze
