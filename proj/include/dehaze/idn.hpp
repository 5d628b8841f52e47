#pragma once

// Initial dehazing network: a three-stage transformer encoder, a two-stage
// decoder and two feature fusion modules (FFMs). The decoder exposes hooks
// through which the closed loop injects task feedback and instruction semantics.

#include <array>
#include <functional>
#include <optional>
#include <string>

#include "dehaze/nn.hpp"

namespace dehaze {

/// Pre-norm transformer block on 2x2 patch tokens: MHSA + MLP (expansion 2), both residual.
template <class T>
class TransformerBlock {
 public:
  static constexpr std::size_t kPatch = 2;

  TransformerBlock() = default;
  TransformerBlock(nn::ParamStore<T>& store, const std::string& name, std::size_t channels,
                   std::size_t heads, Rng& rng)
      : channels_(channels), heads_(heads) {
    const std::size_t d = channels * kPatch * kPatch;
    norm1_ = nn::LayerNorm<T>(store, name + ".norm1", d);
    q_ = nn::Linear<T>(store, name + ".attn.q", d, d, rng);
    k_ = nn::Linear<T>(store, name + ".attn.k", d, d, rng);
    v_ = nn::Linear<T>(store, name + ".attn.v", d, d, rng);
    proj_ = nn::Linear<T>(store, name + ".attn.proj", d, d, rng);
    norm2_ = nn::LayerNorm<T>(store, name + ".norm2", d);
    mlp_ = nn::Mlp<T>(store, name + ".mlp", d, 2 * d, d, rng);
  }

  Var<T> operator()(const Var<T>& x) const {
    const std::size_t H = x.dim(2), W = x.dim(3);
    // Odd spatial extents (tiny inputs) are zero-padded to whole patches.
    const std::size_t Hp = (H + kPatch - 1) / kPatch * kPatch, Wp = (W + kPatch - 1) / kPatch * kPatch;
    auto tokens = ops::patchify(ops::pad_bottom_right(x, Hp, Wp), kPatch);
    auto h = norm1_(tokens);
    auto att = ops::attention(q_(h), k_(h), v_(h), heads_);
    tokens = ops::add(tokens, proj_(att));
    tokens = ops::add(tokens, mlp_(norm2_(tokens)));
    return ops::crop_top_left(ops::unpatchify(tokens, channels_, Hp, Wp, kPatch), H, W);
  }

 private:
  std::size_t channels_ = 0, heads_ = 1;
  nn::LayerNorm<T> norm1_, norm2_;
  nn::Linear<T> q_, k_, v_, proj_;
  nn::Mlp<T> mlp_;
};

/// Feature fusion: residual sum of the two streams plus a gated 1x1 -> channel-attention -> 3x3 path.
/// An optional modulation tensor is added after the 1x1 projection.
template <class T>
class FeatureFusion {
 public:
  FeatureFusion() = default;
  FeatureFusion(nn::ParamStore<T>& store, const std::string& name, std::size_t channels, Rng& rng)
      : project_(store, name + ".project", 2 * channels, channels, 1, 1, rng),
        gate_(store, name + ".gate", channels, std::max<std::size_t>(channels / 4, 1), channels, rng),
        out_(store, name + ".out", channels, channels, 3, 1, rng) {}

  Var<T> operator()(const Var<T>& enc, const Var<T>& dec, const std::optional<Var<T>>& modulation) const {
    if (enc.shape() != dec.shape())
      throw InputError("ffm_fuse: encoder " + shape_str(enc.shape()) + " vs decoder " +
                       shape_str(dec.shape()));
    if (modulation && modulation->shape() != enc.shape())
      throw InputError("ffm_fuse: modulation " + shape_str(modulation->shape()) + " vs " +
                       shape_str(enc.shape()));
    auto h = project_(ops::concat<T>({enc, dec}));
    if (modulation) h = ops::add(h, *modulation);
    auto g = ops::sigmoid(gate_(ops::global_avg_pool(h)));
    h = ops::mul_channel(h, g);
    return ops::add(ops::add(enc, dec), out_(h));
  }

 private:
  nn::Conv2d<T> project_;
  nn::Mlp<T> gate_;
  nn::Conv2d<T> out_;
};

/// Encoder outputs F_e^1..F_e^3 plus the network input (kept for the global residual).
template <class T>
struct EncoderFeatures {
  Var<T> input;
  std::array<Var<T>, 3> stages;
  const Var<T>& deepest() const { return stages[2]; }
};

/// Closed-loop inputs to the decoder. Any subset may be absent.
template <class T>
struct ModulationBundle {
  using Site = std::function<Var<T>(const Var<T>&)>;
  std::optional<Var<T>> deep_injection;  // added inside the deep FFM
  Site encoder_site;                     // F~_e,3 -> F_e,3
  Site decoder_site;                     // F~_d,1 -> F_d,1
};

struct IdnConfig {
  std::array<std::size_t, 3> channels{16, 32, 64};
  std::size_t heads = 2;
};

template <class T>
class Idn {
 public:
  explicit Idn(const IdnConfig& cfg, Rng rng) : cfg_(cfg) {
    const auto [c0, c1, c2] = cfg.channels;
    const std::string p = "idn.";
    stem_ = nn::Conv2d<T>(store_, p + "stem", 3, c0, 3, 1, rng);
    enc_[0] = TransformerBlock<T>(store_, p + "enc1", c0, cfg.heads, rng);
    down1_ = nn::Conv2d<T>(store_, p + "down1", c0, c1, 3, 2, rng);
    enc_[1] = TransformerBlock<T>(store_, p + "enc2", c1, cfg.heads, rng);
    down2_ = nn::Conv2d<T>(store_, p + "down2", c1, c2, 3, 2, rng);
    enc_[2] = TransformerBlock<T>(store_, p + "enc3", c2, cfg.heads, rng);
    prev_proj_ = nn::Conv2d<T>(store_, p + "prev_proj", c1, c2, 1, 1, rng);
    ffm_deep_ = FeatureFusion<T>(store_, p + "ffm_deep", c2, rng);
    up1_ = nn::Conv2d<T>(store_, p + "up1", c2, c1, 3, 1, rng);
    dec_[0] = TransformerBlock<T>(store_, p + "dec1", c1, cfg.heads, rng);
    ffm_mid_ = FeatureFusion<T>(store_, p + "ffm_mid", c1, rng);
    up2_ = nn::Conv2d<T>(store_, p + "up2", c1, c0, 3, 1, rng);
    dec_[1] = TransformerBlock<T>(store_, p + "dec2", c0, cfg.heads, rng);
    head_ = nn::Conv2d<T>(store_, p + "head", c0, 3, 3, 1, rng);
  }

  Idn(const Idn&) = delete;
  Idn& operator=(const Idn&) = delete;

  const IdnConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }

  static void check_input(const Var<T>& image) {
    if (image.shape().size() != 4 || image.dim(1) != 3)
      throw InputError("IDN input must be N x 3 x H x W, got " + shape_str(image.shape()));
    if (image.dim(2) % 4 || image.dim(3) % 4)
      throw InputError("IDN input height and width must be divisible by 4, got " +
                       shape_str(image.shape()));
  }

  EncoderFeatures<T> encode(const Var<T>& image) const {
    check_input(image);
    EncoderFeatures<T> f;
    f.input = image;
    f.stages[0] = enc_[0](stem_(image));
    f.stages[1] = enc_[1](down1_(f.stages[0]));
    f.stages[2] = enc_[2](down2_(f.stages[1]));
    return f;
  }

  /// Deep-scale FFM; `modulation` is the TFGA injection.
  Var<T> ffm_fuse(const Var<T>& enc, const Var<T>& dec, const std::optional<Var<T>>& modulation) const {
    return ffm_deep_(enc, dec, modulation);
  }

  Var<T> decode(const EncoderFeatures<T>& f, const ModulationBundle<T>* bundle = nullptr) const {
    const auto& [f1, f2, f3] = f.stages;
    auto e3 = apply_site(bundle ? bundle->encoder_site : nullptr, f3, "encoder");
    auto prev = prev_proj_(ops::resize_bilinear(f2, f3.dim(2), f3.dim(3)));
    std::optional<Var<T>> inj;
    if (bundle) inj = bundle->deep_injection;
    auto deep = ffm_deep_(e3, prev, inj);

    auto d1 = dec_[0](up1_(ops::upsample_nearest2(deep)));
    d1 = apply_site(bundle ? bundle->decoder_site : nullptr, d1, "decoder");
    auto mid = ffm_mid_(f2, d1, std::nullopt);

    auto d2 = dec_[1](up2_(ops::upsample_nearest2(mid)));
    auto residual = head_(ops::add(d2, f1));
    return ops::clamp01_inward(ops::add(f.input, residual));
  }

  Var<T> forward(const Var<T>& hazy, const ModulationBundle<T>* bundle = nullptr) const {
    return decode(encode(hazy), bundle);
  }

 private:
  static Var<T> apply_site(const typename ModulationBundle<T>::Site& site, const Var<T>& x,
                           const char* which) {
    if (!site) return x;
    auto y = site(x);
    if (y.shape() != x.shape())
      throw InputError(std::string("malformed modulation bundle: ") + which + " site returned " +
                       shape_str(y.shape()) + " for " + shape_str(x.shape()));
    return y;
  }

  IdnConfig cfg_;
  nn::ParamStore<T> store_;
  nn::Conv2d<T> stem_, down1_, down2_, prev_proj_, up1_, up2_, head_;
  std::array<TransformerBlock<T>, 3> enc_;
  std::array<TransformerBlock<T>, 2> dec_;
  FeatureFusion<T> ffm_deep_, ffm_mid_;
};

}  // namespace dehaze
