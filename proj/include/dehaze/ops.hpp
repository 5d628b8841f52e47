#pragma once

// Differentiable tensor operations. Every op computes its forward value eagerly
// and, when an input requires a gradient, records a closure that accumulates
// the vector-Jacobian product into its parents.

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <numbers>
#include <utility>
#include <vector>

#include "dehaze/autodiff.hpp"

namespace dehaze::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require_rank(const Shape& s, std::size_t r, const char* what) {
  if (s.size() != r)
    throw InputError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(s));
}

template <class T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, T* col) {
  const std::size_t hw = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col + ((c * k + ki) * k + kj) * hw;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(pad);
          T* dst = row + oh * Wo;
          if (ih < 0 || ih >= static_cast<long>(H)) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = x + (c * H + static_cast<std::size_t>(ih)) * W;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const long iw = static_cast<long>(ow * stride + kj) - static_cast<long>(pad);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(W)) ? T(0) : src[iw];
          }
        }
      }
}

template <class T>
void col2im(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, T* x) {
  const std::size_t hw = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((c * k + ki) * k + kj) * hw;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(pad);
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          T* dst = x + (c * H + static_cast<std::size_t>(ih)) * W;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const long iw = static_cast<long>(ow * stride + kj) - static_cast<long>(pad);
            if (iw >= 0 && iw < static_cast<long>(W)) dst[iw] += row[oh * Wo + ow];
          }
        }
      }
}

template <class T, class F, class G>
Var<T> unary(const Var<T>& x, F&& f, G&& df) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_op<T>(std::move(out), {x}, [df](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

/// Gather by a bijective index map: out[i] = in[map[i]].
template <class T>
Var<T> permute(const Var<T>& x, Shape out_shape, std::vector<std::size_t> map) {
  Tensor<T> out(std::move(out_shape));
  const auto& xv = x.value();
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = xv[map[i]];
  return make_op<T>(std::move(out), {x}, [map = std::move(map)](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < map.size(); ++i) gx[map[i]] += self.grad[i];
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!self.parent_needs_grad(p)) continue;
      auto& g = self.parents[p]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (self.parent_needs_grad(0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parent_needs_grad(1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (self.parent_needs_grad(0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (self.parent_needs_grad(1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

/// Elementwise quotient; intended for scalars in loss assembly.
template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "div");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (self.parent_needs_grad(0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bv[i];
    }
    if (self.parent_needs_grad(1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
  return detail::unary<T>(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T s) {
  return detail::unary<T>(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

/// tanh-approximated GELU.
template <class T>
Var<T> gelu(const Var<T>& x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = T(0.044715);
  return detail::unary<T>(
      x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v))); },
      [](T v, T) {
        const T u = c * (v + a * v * v * v);
        const T th = std::tanh(u);
        const T du = c * (T(1) + T(3) * a * v * v);
        return T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du;
      });
}

template <class T>
Var<T> softplus(const Var<T>& x) {
  return detail::unary<T>(
      x,
      [](T v) { return v > T(20) ? v : std::log1p(std::exp(v)); },
      [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

/// Hard clamp to [0,1]; gradient passes only strictly inside the range.
template <class T>
Var<T> clamp01(const Var<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return std::clamp(v, T(0), T(1)); },
      [](T v, T) { return (v > T(0) && v < T(1)) ? T(1) : T(0); });
}

/// Hard clamp to [0,1] whose backward pass also lets through, for saturated elements,
/// the gradient components that would move them back into range. Keeps a clamped
/// output head trainable after it saturates.
template <class T>
Var<T> clamp01_inward(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x.value()[i], T(0), T(1));
  return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const T g = self.grad[i], v = xv[i];
      const bool pass = (v >= T(0) && v <= T(1)) || (v < T(0) && g < T(0)) || (v > T(1) && g > T(0));
      if (pass) dx[i] += g;
    }
  });
}

/// First component of a two-way softmax: exp(a) / (exp(a) + exp(b)), elementwise.
template <class T>
Var<T> softmax_pair_first(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "softmax_pair");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T m = std::max(a.value()[i], b.value()[i]);
    const T ea = std::exp(a.value()[i] - m);
    const T eb = std::exp(b.value()[i] - m);
    out[i] = ea / (ea + eb);
  }
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!self.parent_needs_grad(p)) continue;
      auto& g = self.parents[p]->grad_buffer();
      const T sign = p == 0 ? T(1) : T(-1);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T q = self.value[i];
        g[i] += sign * self.grad[i] * q * (T(1) - q);
      }
    }
  });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  Tensor<T> out = x.value().reshaped(std::move(s));
  return make_op<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions and scalar losses

template <class T>
Var<T> mean(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().values()) s += v;
  const T inv = T(1) / static_cast<T>(x.size());
  return make_op<T>(Tensor<T>({1}, s * inv), {x}, [inv](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const T d = self.grad[0] * inv;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d;
  });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().values()) s += v;
  return make_op<T>(Tensor<T>({1}, s), {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

/// mean |a - b| over all elements.
template <class T>
Var<T> l1_mean(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "l1_mean");
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.value()[i] - b.value()[i]);
  const T inv = T(1) / static_cast<T>(a.size());
  return make_op<T>(Tensor<T>({1}, s * inv), {a, b}, [inv](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const T d = self.grad[0] * inv;
    for (std::size_t p = 0; p < 2; ++p) {
      if (!self.parent_needs_grad(p)) continue;
      auto& g = self.parents[p]->grad_buffer();
      const T sign = p == 0 ? T(1) : T(-1);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T diff = av[i] - bv[i];
        const T sg = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
        g[i] += sign * d * sg;
      }
    }
  });
}

/// Mean per-pixel softmax cross-entropy. logits N x K x H x W, labels N*H*W in [0,K).
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  detail::require_rank(logits.shape(), 4, "softmax_cross_entropy");
  const std::size_t N = logits.dim(0), K = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  if (labels.size() != N * HW) throw InputError("softmax_cross_entropy: label count mismatch");
  const auto& lv = logits.value();
  Tensor<T> probs(logits.shape());
  T loss = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < HW; ++p) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < K; ++k) m = std::max(m, lv[(n * K + k) * HW + p]);
      T z = 0;
      for (std::size_t k = 0; k < K; ++k) z += std::exp(lv[(n * K + k) * HW + p] - m);
      for (std::size_t k = 0; k < K; ++k)
        probs[(n * K + k) * HW + p] = std::exp(lv[(n * K + k) * HW + p] - m) / z;
      const int y = labels[n * HW + p];
      if (y < 0 || y >= static_cast<int>(K)) throw InputError("softmax_cross_entropy: bad label");
      loss += -(lv[(n * K + static_cast<std::size_t>(y)) * HW + p] - m - std::log(z));
    }
  const T inv = T(1) / static_cast<T>(N * HW);
  return make_op<T>(Tensor<T>({1}, loss * inv), {logits},
                    [probs = std::move(probs), labels, N, K, HW, inv](Node<T>& self) {
                      auto& g = self.parents[0]->grad_buffer();
                      const T d = self.grad[0] * inv;
                      for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t k = 0; k < K; ++k)
                          for (std::size_t p = 0; p < HW; ++p) {
                            const std::size_t i = (n * K + k) * HW + p;
                            const T onehot = labels[n * HW + p] == static_cast<int>(k) ? T(1) : T(0);
                            g[i] += d * (probs[i] - onehot);
                          }
                    });
}

/// Mean binary cross-entropy with logits against targets in [0,1].
template <class T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets) {
  require_same_shape(logits.value(), targets, "bce_with_logits");
  T s = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const T z = logits.value()[i];
    s += std::max(z, T(0)) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  const T inv = T(1) / static_cast<T>(targets.size());
  return make_op<T>(Tensor<T>({1}, s * inv), {logits}, [targets, inv](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const auto& zv = self.parents[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T p = T(1) / (T(1) + std::exp(-zv[i]));
      g[i] += self.grad[0] * inv * (p - targets[i]);
    }
  });
}

/// Sum of |pred - target| over entries with mask > 0, divided by the mask count (0 if empty).
template <class T>
Var<T> masked_l1(const Var<T>& pred, const Tensor<T>& target, const Tensor<T>& mask) {
  require_same_shape(pred.value(), target, "masked_l1");
  require_same_shape(target, mask, "masked_l1");
  T s = 0, count = 0;
  for (std::size_t i = 0; i < target.size(); ++i)
    if (mask[i] > T(0)) {
      s += std::abs(pred.value()[i] - target[i]);
      count += 1;
    }
  const T inv = count > 0 ? T(1) / count : T(0);
  return make_op<T>(Tensor<T>({1}, s * inv), {pred}, [target, mask, inv](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const auto& pv = self.parents[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (mask[i] <= T(0)) continue;
      const T diff = pv[i] - target[i];
      g[i] += self.grad[0] * inv * (diff > 0 ? T(1) : (diff < 0 ? T(-1) : T(0)));
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial ops on N x C x H x W

/// 2-D convolution, square kernel. `bias` may be an undefined Var.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride,
              std::size_t pad) {
  detail::require_rank(x.shape(), 4, "conv2d input");
  detail::require_rank(weight.shape(), 4, "conv2d weight");
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != Ci || weight.dim(3) != k)
    throw InputError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  if (H + 2 * pad < k || W + 2 * pad < k) throw InputError("conv2d: input smaller than kernel");
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  const std::size_t K = Ci * k * k, HWo = Ho * Wo;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  Tensor<T> out({N, Co, Ho, Wo});
  std::vector<T> col(direct ? 0 : K * HWo);
  detail::CMapMat<T> Wm(weight.value().data(), Co, K);
  for (std::size_t n = 0; n < N; ++n) {
    const T* xn = x.value().data() + n * Ci * H * W;
    if (!direct) detail::im2col(xn, Ci, H, W, k, stride, pad, Ho, Wo, col.data());
    detail::CMapMat<T> Cm(direct ? xn : col.data(), K, HWo);
    detail::MapMat<T> Om(out.data() + n * Co * HWo, Co, HWo);
    Om.noalias() = Wm * Cm;
    if (bias.defined())
      for (std::size_t c = 0; c < Co; ++c) Om.row(c).array() += bias.value()[c];
  }

  return make_op<T>(std::move(out), {x, weight, bias},
                    [=](Node<T>& self) {
                      const auto& xv = self.parents[0]->value;
                      const auto& wv = self.parents[1]->value;
                      const bool gx = self.parent_needs_grad(0);
                      const bool gw = self.parent_needs_grad(1);
                      const bool gb = self.parent_needs_grad(2);
                      std::vector<T> col(direct ? 0 : K * HWo), dcol(K * HWo);
                      detail::CMapMat<T> Wm(wv.data(), Co, K);
                      for (std::size_t n = 0; n < N; ++n) {
                        detail::CMapMat<T> G(self.grad.data() + n * Co * HWo, Co, HWo);
                        const T* xn = xv.data() + n * Ci * H * W;
                        if (gw) {
                          if (!direct) detail::im2col(xn, Ci, H, W, k, stride, pad, Ho, Wo, col.data());
                          detail::CMapMat<T> Cm(direct ? xn : col.data(), K, HWo);
                          detail::MapMat<T> dW(self.parents[1]->grad_buffer().data(), Co, K);
                          dW.noalias() += G * Cm.transpose();
                        }
                        if (gb) {
                          auto& db = self.parents[2]->grad_buffer();
                          for (std::size_t c = 0; c < Co; ++c) db[c] += G.row(c).sum();
                        }
                        if (gx) {
                          T* dxn = self.parents[0]->grad_buffer().data() + n * Ci * H * W;
                          if (direct) {
                            detail::MapMat<T> dX(dxn, K, HWo);
                            dX.noalias() += Wm.transpose() * G;
                          } else {
                            detail::MapMat<T> dC(dcol.data(), K, HWo);
                            dC.noalias() = Wm.transpose() * G;
                            detail::col2im(dcol.data(), Ci, H, W, k, stride, pad, Ho, Wo, dxn);
                          }
                        }
                      }
                    });
}

/// Concatenate along dimension 1 (channels for NCHW, features for N x D).
template <class T>
Var<T> concat(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw InputError("concat: no inputs");
  const Shape& s0 = xs[0].shape();
  if (s0.size() < 2) throw InputError("concat: rank must be >= 2");
  const std::size_t N = s0[0];
  std::size_t inner = 1;
  for (std::size_t d = 2; d < s0.size(); ++d) inner *= s0[d];
  std::size_t total_c = 0;
  std::vector<std::size_t> cs;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != s0.size() || s[0] != N || !std::equal(s.begin() + 2, s.end(), s0.begin() + 2))
      throw InputError("concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    cs.push_back(s[1]);
    total_c += s[1];
  }
  Shape os = s0;
  os[1] = total_c;
  Tensor<T> out(os);
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const T* src = xs[i].value().data() + n * cs[i] * inner;
      std::copy(src, src + cs[i] * inner, out.data() + (n * total_c + off) * inner);
      off += cs[i];
    }
  }
  auto node_out = std::make_shared<Node<T>>();
  node_out->value = std::move(out);
  if (grad_enabled() &&
      std::any_of(xs.begin(), xs.end(), [](const Var<T>& v) { return v.requires_grad(); })) {
    node_out->requires_grad = true;
    for (const auto& x : xs) node_out->parents.push_back(x.node());
    node_out->backward = [cs, inner, N, total_c](Node<T>& self) {
      for (std::size_t n = 0; n < N; ++n) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < cs.size(); ++i) {
          if (self.parent_needs_grad(i)) {
            T* dst = self.parents[i]->grad_buffer().data() + n * cs[i] * inner;
            const T* src = self.grad.data() + (n * total_c + off) * inner;
            for (std::size_t j = 0; j < cs[i] * inner; ++j) dst[j] += src[j];
          }
          off += cs[i];
        }
      }
    };
  }
  return Var<T>(std::move(node_out));
}

/// x (N,C,H,W) scaled per (n,c) by g (N,C).
template <class T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& g) {
  detail::require_rank(x.shape(), 4, "mul_channel");
  if (g.shape() != Shape{x.dim(0), x.dim(1)})
    throw InputError("mul_channel: gate " + shape_str(g.shape()) + " does not match " +
                     shape_str(x.shape()));
  const std::size_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < NC; ++i)
    for (std::size_t p = 0; p < HW; ++p) out[i * HW + p] = x.value()[i * HW + p] * g.value()[i];
  return make_op<T>(std::move(out), {x, g}, [NC, HW](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& gv = self.parents[1]->value;
    if (self.parent_needs_grad(0)) {
      auto& dx = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < NC; ++i)
        for (std::size_t p = 0; p < HW; ++p) dx[i * HW + p] += self.grad[i * HW + p] * gv[i];
    }
    if (self.parent_needs_grad(1)) {
      auto& dg = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < NC; ++i) {
        T s = 0;
        for (std::size_t p = 0; p < HW; ++p) s += self.grad[i * HW + p] * xv[i * HW + p];
        dg[i] += s;
      }
    }
  });
}

/// Global average pooling (N,C,H,W) -> (N,C).
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out({x.dim(0), x.dim(1)});
  for (std::size_t i = 0; i < NC; ++i) {
    T s = 0;
    for (std::size_t p = 0; p < HW; ++p) s += x.value()[i * HW + p];
    out[i] = s / static_cast<T>(HW);
  }
  return make_op<T>(std::move(out), {x}, [NC, HW](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < NC; ++i)
      for (std::size_t p = 0; p < HW; ++p) dx[i * HW + p] += self.grad[i] / static_cast<T>(HW);
  });
}

/// Global max pooling (N,C,H,W) -> (N,C); gradient routes to the first arg-max.
template <class T>
Var<T> global_max_pool(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "global_max_pool");
  const std::size_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out({x.dim(0), x.dim(1)});
  std::vector<std::size_t> argmax(NC);
  for (std::size_t i = 0; i < NC; ++i) {
    std::size_t best = 0;
    for (std::size_t p = 1; p < HW; ++p)
      if (x.value()[i * HW + p] > x.value()[i * HW + best]) best = p;
    argmax[i] = best;
    out[i] = x.value()[i * HW + best];
  }
  return make_op<T>(std::move(out), {x}, [argmax = std::move(argmax), HW](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < argmax.size(); ++i) dx[i * HW + argmax[i]] += self.grad[i];
  });
}

/// Broadcast (N,C) over an H x W grid.
template <class T>
Var<T> expand_spatial(const Var<T>& v, std::size_t H, std::size_t W) {
  detail::require_rank(v.shape(), 2, "expand_spatial");
  const std::size_t NC = v.size(), HW = H * W;
  Tensor<T> out({v.dim(0), v.dim(1), H, W});
  for (std::size_t i = 0; i < NC; ++i)
    std::fill(out.data() + i * HW, out.data() + (i + 1) * HW, v.value()[i]);
  return make_op<T>(std::move(out), {v}, [NC, HW](Node<T>& self) {
    auto& dv = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < NC; ++i) {
      T s = 0;
      for (std::size_t p = 0; p < HW; ++p) s += self.grad[i * HW + p];
      dv[i] += s;
    }
  });
}

template <class T>
Var<T> upsample_nearest2(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "upsample_nearest2");
  const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<std::size_t> map(NC * 4 * H * W);
  for (std::size_t i = 0; i < NC; ++i)
    for (std::size_t h = 0; h < 2 * H; ++h)
      for (std::size_t w = 0; w < 2 * W; ++w)
        map[(i * 2 * H + h) * 2 * W + w] = (i * H + h / 2) * W + w / 2;
  Tensor<T> out({x.dim(0), x.dim(1), 2 * H, 2 * W});
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = x.value()[map[i]];
  return make_op<T>(std::move(out), {x}, [map = std::move(map)](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < map.size(); ++i) dx[map[i]] += self.grad[i];
  });
}

/// Bilinear resize with half-pixel centers (align_corners = false).
template <class T>
Var<T> resize_bilinear(const Var<T>& x, std::size_t Ho, std::size_t Wo) {
  detail::require_rank(x.shape(), 4, "resize_bilinear");
  const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  if (Ho == H && Wo == W) return reshape(x, x.shape());
  struct Tap {
    std::size_t i0, i1;
    T w1;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double sc = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * sc - 0.5;
      src = std::max(src, 0.0);
      std::size_t i0 = std::min(static_cast<std::size_t>(src), in - 1);
      std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, static_cast<T>(src - static_cast<double>(i0))};
    }
    return t;
  };
  auto th = taps(H, Ho), tw = taps(W, Wo);
  Tensor<T> out({x.dim(0), x.dim(1), Ho, Wo});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < NC; ++i)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        const auto& a = th[oh];
        const auto& b = tw[ow];
        const T* src = xv.data() + i * H * W;
        const T top = src[a.i0 * W + b.i0] * (1 - b.w1) + src[a.i0 * W + b.i1] * b.w1;
        const T bot = src[a.i1 * W + b.i0] * (1 - b.w1) + src[a.i1 * W + b.i1] * b.w1;
        out[(i * Ho + oh) * Wo + ow] = top * (1 - a.w1) + bot * a.w1;
      }
  return make_op<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < NC; ++i)
      for (std::size_t oh = 0; oh < Ho; ++oh)
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          const auto& a = th[oh];
          const auto& b = tw[ow];
          const T g = self.grad[(i * Ho + oh) * Wo + ow];
          T* dst = dx.data() + i * H * W;
          dst[a.i0 * W + b.i0] += g * (1 - a.w1) * (1 - b.w1);
          dst[a.i0 * W + b.i1] += g * (1 - a.w1) * b.w1;
          dst[a.i1 * W + b.i0] += g * a.w1 * (1 - b.w1);
          dst[a.i1 * W + b.i1] += g * a.w1 * b.w1;
        }
  });
}

/// (N,C,H,W) -> (N, (H/p)(W/p), C*p*p): non-overlapping p x p patches as tokens.
template <class T>
Var<T> patchify(const Var<T>& x, std::size_t p) {
  detail::require_rank(x.shape(), 4, "patchify");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % p || W % p) throw InputError("patchify: spatial size not divisible by patch");
  const std::size_t Hp = H / p, Wp = W / p, D = C * p * p;
  std::vector<std::size_t> map(N * Hp * Wp * D);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t th = 0; th < Hp; ++th)
      for (std::size_t tw = 0; tw < Wp; ++tw)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < p; ++j) {
              const std::size_t tok = (n * Hp + th) * Wp + tw;
              const std::size_t f = (c * p + i) * p + j;
              map[tok * D + f] = ((n * C + c) * H + th * p + i) * W + tw * p + j;
            }
  return detail::permute<T>(x, {N, Hp * Wp, D}, std::move(map));
}

/// Inverse of patchify back to (N,C,H,W).
template <class T>
Var<T> unpatchify(const Var<T>& t, std::size_t C, std::size_t H, std::size_t W, std::size_t p) {
  detail::require_rank(t.shape(), 3, "unpatchify");
  const std::size_t N = t.dim(0), Hp = H / p, Wp = W / p, D = C * p * p;
  if (t.dim(1) != Hp * Wp || t.dim(2) != D) throw InputError("unpatchify: token shape mismatch");
  std::vector<std::size_t> map(N * C * H * W);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const std::size_t tok = (n * Hp + h / p) * Wp + w / p;
          const std::size_t f = (c * p + h % p) * p + w % p;
          map[((n * C + c) * H + h) * W + w] = tok * D + f;
        }
  return detail::permute<T>(t, {N, C, H, W}, std::move(map));
}

/// Zero-pad (N,C,H,W) on the bottom/right to (N,C,Ht,Wt).
template <class T>
Var<T> pad_bottom_right(const Var<T>& x, std::size_t Ht, std::size_t Wt) {
  detail::require_rank(x.shape(), 4, "pad_bottom_right");
  const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  if (Ht < H || Wt < W) throw InputError("pad_bottom_right: target smaller than input");
  if (Ht == H && Wt == W) return x;
  Tensor<T> out({x.dim(0), x.dim(1), Ht, Wt});
  for (std::size_t i = 0; i < NC; ++i)
    for (std::size_t h = 0; h < H; ++h)
      std::copy_n(x.value().data() + (i * H + h) * W, W, out.data() + (i * Ht + h) * Wt);
  return make_op<T>(std::move(out), {x}, [NC, H, W, Ht, Wt](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < NC; ++i)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) dx[(i * H + h) * W + w] += self.grad[(i * Ht + h) * Wt + w];
  });
}

/// Keep the top-left (H,W) window of (N,C,Hs,Ws).
template <class T>
Var<T> crop_top_left(const Var<T>& x, std::size_t H, std::size_t W) {
  detail::require_rank(x.shape(), 4, "crop_top_left");
  const std::size_t N = x.dim(0), C = x.dim(1), Hs = x.dim(2), Ws = x.dim(3);
  if (H > Hs || W > Ws) throw InputError("crop_top_left: window larger than input");
  if (H == Hs && W == Ws) return x;
  std::vector<std::size_t> map(N * C * H * W);
  for (std::size_t i = 0; i < N * C; ++i)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) map[(i * H + h) * W + w] = (i * Hs + h) * Ws + w;
  Tensor<T> out({N, C, H, W});
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = x.value()[map[i]];
  return make_op<T>(std::move(out), {x}, [map = std::move(map)](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < map.size(); ++i) dx[map[i]] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Token ops on (..., D)

/// y = x W^T + b over the last dimension. weight is (Dout, Din); bias may be undefined.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const std::size_t Din = x.shape().back();
  if (weight.shape().size() != 2 || weight.dim(1) != Din)
    throw InputError("linear: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  const std::size_t Dout = weight.dim(0), M = x.size() / Din;
  Shape os = x.shape();
  os.back() = Dout;
  Tensor<T> out(os);
  detail::CMapMat<T> X(x.value().data(), M, Din);
  detail::CMapMat<T> Wm(weight.value().data(), Dout, Din);
  detail::MapMat<T> Y(out.data(), M, Dout);
  Y.noalias() = X * Wm.transpose();
  if (bias.defined())
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t d = 0; d < Dout; ++d) Y(m, d) += bias.value()[d];
  return make_op<T>(std::move(out), {x, weight, bias}, [M, Din, Dout](Node<T>& self) {
    detail::CMapMat<T> G(self.grad.data(), M, Dout);
    if (self.parent_needs_grad(0)) {
      detail::CMapMat<T> Wm(self.parents[1]->value.data(), Dout, Din);
      detail::MapMat<T> dX(self.parents[0]->grad_buffer().data(), M, Din);
      dX.noalias() += G * Wm;
    }
    if (self.parent_needs_grad(1)) {
      detail::CMapMat<T> X(self.parents[0]->value.data(), M, Din);
      detail::MapMat<T> dW(self.parents[1]->grad_buffer().data(), Dout, Din);
      dW.noalias() += G.transpose() * X;
    }
    if (self.parent_needs_grad(2)) {
      auto& db = self.parents[2]->grad_buffer();
      for (std::size_t d = 0; d < Dout; ++d) db[d] += G.col(d).sum();
    }
  });
}

/// Layer normalization over the last dimension with affine gamma/beta.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const std::size_t D = x.shape().back(), M = x.size() / D;
  if (gamma.size() != D || beta.size() != D) throw InputError("layer_norm: affine size mismatch");
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.size()), rstd(M);
  const auto& xv = x.value();
  for (std::size_t m = 0; m < M; ++m) {
    T mu = 0, var = 0;
    for (std::size_t d = 0; d < D; ++d) mu += xv[m * D + d];
    mu /= static_cast<T>(D);
    for (std::size_t d = 0; d < D; ++d) {
      const T c = xv[m * D + d] - mu;
      var += c * c;
    }
    var /= static_cast<T>(D);
    rstd[m] = T(1) / std::sqrt(var + eps);
    for (std::size_t d = 0; d < D; ++d) {
      xhat[m * D + d] = (xv[m * D + d] - mu) * rstd[m];
      out[m * D + d] = xhat[m * D + d] * gamma.value()[d] + beta.value()[d];
    }
  }
  return make_op<T>(std::move(out), {x, gamma, beta},
                    [xhat = std::move(xhat), rstd = std::move(rstd), M, D](Node<T>& self) {
                      const auto& gv = self.parents[1]->value;
                      if (self.parent_needs_grad(1) || self.parent_needs_grad(2)) {
                        for (std::size_t m = 0; m < M; ++m)
                          for (std::size_t d = 0; d < D; ++d) {
                            const T g = self.grad[m * D + d];
                            if (self.parent_needs_grad(1))
                              self.parents[1]->grad_buffer()[d] += g * xhat[m * D + d];
                            if (self.parent_needs_grad(2)) self.parents[2]->grad_buffer()[d] += g;
                          }
                      }
                      if (self.parent_needs_grad(0)) {
                        auto& dx = self.parents[0]->grad_buffer();
                        for (std::size_t m = 0; m < M; ++m) {
                          T s1 = 0, s2 = 0;
                          for (std::size_t d = 0; d < D; ++d) {
                            const T gh = self.grad[m * D + d] * gv[d];
                            s1 += gh;
                            s2 += gh * xhat[m * D + d];
                          }
                          const T invD = T(1) / static_cast<T>(D);
                          for (std::size_t d = 0; d < D; ++d) {
                            const T gh = self.grad[m * D + d] * gv[d];
                            dx[m * D + d] += rstd[m] * (gh - invD * s1 - xhat[m * D + d] * invD * s2);
                          }
                        }
                      }
                    });
}

/// Scaled dot-product attention. q (N,Lq,D), k and v (N,Lk,D); D split across `heads`.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads) {
  detail::require_rank(q.shape(), 3, "attention q");
  detail::require_rank(k.shape(), 3, "attention k");
  require_same_shape(k.value(), v.value(), "attention k/v");
  const std::size_t N = q.dim(0), Lq = q.dim(1), Lk = k.dim(1), D = q.dim(2);
  if (k.dim(0) != N || k.dim(2) != D || heads == 0 || D % heads)
    throw InputError("attention: incompatible shapes " + shape_str(q.shape()) + " / " +
                     shape_str(k.shape()));
  const std::size_t dh = D / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  using Stride = Eigen::OuterStride<>;
  using CMapS = Eigen::Map<const detail::RowMat<T>, 0, Stride>;
  using MapS = Eigen::Map<detail::RowMat<T>, 0, Stride>;

  Tensor<T> out({N, Lq, D});
  std::vector<T> probs(N * heads * Lq * Lk);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t h = 0; h < heads; ++h) {
      CMapS Q(q.value().data() + n * Lq * D + h * dh, Lq, dh, Stride(D));
      CMapS K(k.value().data() + n * Lk * D + h * dh, Lk, dh, Stride(D));
      CMapS V(v.value().data() + n * Lk * D + h * dh, Lk, dh, Stride(D));
      detail::MapMat<T> P(probs.data() + (n * heads + h) * Lq * Lk, Lq, Lk);
      P.noalias() = (Q * K.transpose()) * sc;
      for (std::size_t i = 0; i < Lq; ++i) {
        const T m = P.row(i).maxCoeff();
        P.row(i) = (P.row(i).array() - m).exp();
        P.row(i) /= P.row(i).sum();
      }
      MapS O(out.data() + n * Lq * D + h * dh, Lq, dh, Stride(D));
      O.noalias() = P * V;
    }
  return make_op<T>(std::move(out), {q, k, v}, [=, probs = std::move(probs)](Node<T>& self) {
    const bool gq = self.parent_needs_grad(0), gk = self.parent_needs_grad(1),
               gv = self.parent_needs_grad(2);
    detail::RowMat<T> dP(Lq, Lk), dS(Lq, Lk);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t h = 0; h < heads; ++h) {
        CMapS Q(self.parents[0]->value.data() + n * Lq * D + h * dh, Lq, dh, Stride(D));
        CMapS K(self.parents[1]->value.data() + n * Lk * D + h * dh, Lk, dh, Stride(D));
        CMapS V(self.parents[2]->value.data() + n * Lk * D + h * dh, Lk, dh, Stride(D));
        CMapS G(self.grad.data() + n * Lq * D + h * dh, Lq, dh, Stride(D));
        detail::CMapMat<T> P(probs.data() + (n * heads + h) * Lq * Lk, Lq, Lk);
        if (gv) {
          MapS dV(self.parents[2]->grad_buffer().data() + n * Lk * D + h * dh, Lk, dh, Stride(D));
          dV.noalias() += P.transpose() * G;
        }
        if (!gq && !gk) continue;
        dP.noalias() = G * V.transpose();
        for (std::size_t i = 0; i < Lq; ++i) {
          const T dot = (dP.row(i).array() * P.row(i).array()).sum();
          dS.row(i) = P.row(i).array() * (dP.row(i).array() - dot) * sc;
        }
        if (gq) {
          MapS dQ(self.parents[0]->grad_buffer().data() + n * Lq * D + h * dh, Lq, dh, Stride(D));
          dQ.noalias() += dS * K;
        }
        if (gk) {
          MapS dK(self.parents[1]->grad_buffer().data() + n * Lk * D + h * dh, Lk, dh, Stride(D));
          dK.noalias() += dS.transpose() * Q;
        }
      }
  });
}

}  // namespace dehaze::ops
