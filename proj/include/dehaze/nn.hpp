#pragma once

// Named parameter storage and the small layer vocabulary the networks are built from.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dehaze/ops.hpp"
#include "dehaze/rng.hpp"

namespace dehaze::nn {

/// Ordered, namespaced collection of trainable tensors ("idn.enc1.attn.qkv.weight", ...).
template <class T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Tensor<T> init) {
    for (const auto& [n, v] : params_)
      if (n == name) throw ConfigError("duplicate parameter name: " + name);
    Var<T> v(std::move(init), true);
    params_.emplace_back(name, v);
    return v;
  }

  const std::vector<std::pair<std::string, Var<T>>>& entries() const { return params_; }

  std::vector<Var<T>> vars() const {
    std::vector<Var<T>> out;
    out.reserve(params_.size());
    for (const auto& [n, v] : params_) out.push_back(v);
    return out;
  }

  Var<T> find(const std::string& name) const {
    for (const auto& [n, v] : params_)
      if (n == name) return v;
    throw LookupError("no parameter named " + name);
  }

  void set_trainable(bool on) {
    for (auto& [n, v] : params_) v.set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& [n, v] : params_) v.zero_grad();
  }

  std::size_t count() const {
    std::size_t c = 0;
    for (const auto& [n, v] : params_) c += v.size();
    return c;
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
};

template <class T>
Tensor<T> uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

enum class Init { Default, Zero };

template <class T>
struct Conv2d {
  Var<T> weight, bias;
  std::size_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
         std::size_t k, std::size_t stride_, Rng& rng, Init init = Init::Default)
      : stride(stride_), pad(k / 2) {
    const double bound = init == Init::Zero ? 0.0 : std::sqrt(3.0 / static_cast<double>(in * k * k));
    weight = store.add(name + ".weight", uniform_init<T>({out, in, k, k}, bound, rng));
    bias = store.add(name + ".bias", Tensor<T>({out}));
  }

  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
  std::size_t out_channels() const { return weight.dim(0); }
};

template <class T>
struct Linear {
  Var<T> weight, bias;

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         Init init = Init::Default) {
    const double bound = init == Init::Zero ? 0.0 : std::sqrt(3.0 / static_cast<double>(in));
    weight = store.add(name + ".weight", uniform_init<T>({out, in}, bound, rng));
    bias = store.add(name + ".bias", Tensor<T>({out}));
  }

  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }
};

template <class T>
struct LayerNorm {
  Var<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t dim) {
    gamma = store.add(name + ".gamma", Tensor<T>({dim}, T(1)));
    beta = store.add(name + ".beta", Tensor<T>({dim}));
  }

  Var<T> operator()(const Var<T>& x) const { return ops::layer_norm(x, gamma, beta); }
};

/// Linear -> GELU -> Linear over the last dimension.
template <class T>
struct Mlp {
  Linear<T> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t hidden,
      std::size_t out, Rng& rng, Init last = Init::Default)
      : fc1(store, name + ".fc1", in, hidden, rng), fc2(store, name + ".fc2", hidden, out, rng, last) {}

  Var<T> operator()(const Var<T>& x) const { return fc2(ops::gelu(fc1(x))); }
};

/// 1x1 conv -> GELU -> 1x1 conv: the per-pixel MLP on feature maps.
template <class T>
struct PixelMlp {
  Conv2d<T> fc1, fc2;

  PixelMlp() = default;
  PixelMlp(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t hidden,
           std::size_t out, Rng& rng, Init last = Init::Default)
      : fc1(store, name + ".fc1", in, hidden, 1, 1, rng),
        fc2(store, name + ".fc2", hidden, out, 1, 1, rng, last) {}

  Var<T> operator()(const Var<T>& x) const { return fc2(ops::gelu(fc1(x))); }
};

}  // namespace dehaze::nn
