#pragma once

#include <string>

#include "dehaze/nn.hpp"

namespace dehaze {

/// Channel-wise feature fusion block: GAP -> MLP (reduction 4) -> sigmoid channel gate
/// -> 3x3 conv, optionally with an identity residual around the whole block.
template <class T>
class Cffb {
 public:
  Cffb() = default;
  Cffb(nn::ParamStore<T>& store, const std::string& name, std::size_t channels, bool residual, Rng& rng,
       nn::Init out_init = nn::Init::Default)
      : residual_(residual),
        gate_(store, name + ".gate", channels, std::max<std::size_t>(channels / 4, 1), channels, rng),
        conv_(store, name + ".conv", channels, channels, 3, 1, rng, out_init) {}

  Var<T> operator()(const Var<T>& x) const {
    auto g = ops::sigmoid(gate_(ops::global_avg_pool(x)));
    auto y = conv_(ops::mul_channel(x, g));
    return residual_ ? ops::add(x, y) : y;
  }

  const nn::Conv2d<T>& out_conv() const { return conv_; }

 private:
  bool residual_ = false;
  nn::Mlp<T> gate_;
  nn::Conv2d<T> conv_;
};

}  // namespace dehaze
