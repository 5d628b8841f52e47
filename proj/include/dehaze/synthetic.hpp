#pragma once

// Procedural toy scenes: a depth ramp (far at the top) with smooth bumps, a dark
// textured background whose tint follows depth, and a few bright squares that serve
// as segmentation foreground and detection targets.

#include <cmath>
#include <vector>

#include "dehaze/downstream.hpp"
#include "dehaze/haze_model.hpp"

namespace dehaze {

struct HazeRange {
  double beta_min = 0.4, beta_max = 1.6;
  double a_min = 0.7, a_max = 1.0;

  void validate() const {
    if (!(beta_min >= 0 && beta_min <= beta_max)) throw ConfigError("haze.beta_min/max must satisfy 0 <= min <= max");
    if (!(a_min >= 0 && a_min <= a_max && a_max <= 1)) throw ConfigError("haze.A_min/max must satisfy 0 <= min <= max <= 1");
  }
};

inline HazeParams sample_haze(const HazeRange& range, Rng& rng) {
  HazeParams p;
  p.beta = rng.uniform(range.beta_min, range.beta_max);
  for (auto& a : p.airlight) a = rng.uniform(range.a_min, range.a_max);
  return p;
}

inline constexpr double kSceneDepthMin = 0.1, kSceneDepthMax = 1.8;

inline SceneTruth make_scene(std::size_t size, Rng& rng) {
  if (size < 8 || size % 4) throw ConfigError("synth.size must be a multiple of 4 and at least 8");
  const std::size_t H = size, W = size;
  const double s = static_cast<double>(size);

  Tensor<float> depth({H, W});
  struct Bump {
    double cy, cx, sigma, amp;
  };
  std::vector<Bump> bumps(static_cast<std::size_t>(rng.uniform_int(1, 3)));
  for (auto& b : bumps) b = {rng.uniform(0, s), rng.uniform(0, s), rng.uniform(0.1, 0.3) * s, rng.uniform(-0.4, 0.4)};
  const double tilt = rng.uniform(-0.2, 0.2);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double d = 0.3 + 1.3 * (1.0 - y / (s - 1)) + tilt * (x / (s - 1) - 0.5);
      for (const auto& b : bumps) {
        const double r2 = (y - b.cy) * (y - b.cy) + (x - b.cx) * (x - b.cx);
        d += b.amp * std::exp(-r2 / (2 * b.sigma * b.sigma));
      }
      depth[y * W + x] = static_cast<float>(std::clamp(d, kSceneDepthMin, kSceneDepthMax));
    }

  // Background: dark, tinted by depth, with low-frequency texture.
  std::array<double, 3> near_tint, far_tint;
  for (int c = 0; c < 3; ++c) {
    near_tint[c] = rng.uniform(0.05, 0.35);
    far_tint[c] = rng.uniform(0.05, 0.35);
  }
  struct Wave {
    double fy, fx, phase, amp;
  };
  std::array<Wave, 3> waves;
  for (auto& w : waves)
    w = {rng.uniform(0.1, 0.6), rng.uniform(0.1, 0.6), rng.uniform(0, 6.283185307179586), rng.uniform(0.02, 0.06)};

  Tensor<float> img({3, H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double u = (depth[y * W + x] - kSceneDepthMin) / (kSceneDepthMax - kSceneDepthMin);
      double tex = 0;
      for (const auto& w : waves) tex += w.amp * std::sin(w.fy * y + w.fx * x + w.phase);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (1 - u) * near_tint[c] + u * far_tint[c] + tex;
        img[(c * H + y) * W + x] = static_cast<float>(std::clamp(v, 0.0, 0.45));
      }
    }

  // Bright squares, kept fully inside the frame.
  std::vector<io::Box> boxes;
  const long n_obj = rng.uniform_int(1, 3);
  for (long k = 0; k < n_obj; ++k) {
    const long side = rng.uniform_int(4, 8);
    const long x0 = rng.uniform_int(0, static_cast<long>(W) - side);
    const long y0 = rng.uniform_int(0, static_cast<long>(H) - side);
    std::array<double, 3> col;
    for (auto& c : col) c = rng.uniform(0.65, 1.0);
    for (long y = y0; y < y0 + side; ++y)
      for (long x = x0; x < x0 + side; ++x)
        for (std::size_t c = 0; c < 3; ++c) img[(c * H + y) * W + x] = static_cast<float>(col[c]);
    boxes.push_back({static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(side),
                     static_cast<double>(side), 1.0});
  }

  return {std::move(img), DepthMap<float>(std::move(depth)), std::move(boxes)};
}

}  // namespace dehaze
