#pragma once

#include <cstring>
#include <string>

#include "dehaze/io.hpp"
#include "dehaze/nn.hpp"

namespace dehaze {

template <class T>
io::NamedTensors export_params(const nn::ParamStore<T>& store) {
  io::NamedTensors out;
  for (const auto& [name, v] : store.entries()) out.emplace_back(name, v.value().template cast<float>());
  return out;
}

/// Copies every tensor of `tensors` whose name belongs to `store`. With `strict`, every
/// parameter of the store must be present.
template <class T>
void import_params(nn::ParamStore<T>& store, const io::NamedTensors& tensors, bool strict = true) {
  for (const auto& [name, var] : store.entries()) {
    const Tensor<float>* src = nullptr;
    for (const auto& [n, t] : tensors)
      if (n == name) src = &t;
    if (!src) {
      if (strict) throw IoError("checkpoint lacks tensor " + name);
      continue;
    }
    if (src->shape() != var.shape())
      throw IoError("checkpoint tensor " + name + " has shape " + shape_str(src->shape()) + ", model expects " +
                    shape_str(var.shape()));
    auto v = var;
    v.mutable_value() = src->template cast<T>();
  }
}

/// FNV-1a over names, shapes and raw bytes of every tensor whose name starts with `prefix`.
template <class T>
std::uint64_t param_hash(const nn::ParamStore<T>& store, const std::string& prefix = "") {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, v] : store.entries()) {
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    feed(name.data(), name.size());
    for (auto d : v.shape()) feed(&d, sizeof d);
    feed(v.value().data(), v.size() * sizeof(T));
  }
  return h;
}

}  // namespace dehaze
