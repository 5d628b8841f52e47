#pragma once

// Instruction-guided modulation: an instruction embedding and a pooled summary of
// the image features produce per-channel weights W in (0,2); the weighted features
// go through a CFFB whose output is added back to the input.

#include <cctype>
#include <cmath>
#include <map>
#include <memory>
#include <string>

#include "dehaze/cffb.hpp"
#include "dehaze/io.hpp"

namespace dehaze {

/// Maps an instruction string to a fixed-length embedding.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::size_t dim() const = 0;
  virtual std::vector<float> encode(const std::string& text) const = 0;
};

/// Case-folded token hashing into `dim` bins, a fixed seeded projection, then L2 normalization.
class ToyTextEncoder final : public TextEncoder {
 public:
  static constexpr std::uint64_t kProjectionSeed = 0x7E47E3C0DEULL;

  explicit ToyTextEncoder(std::size_t dim = 64) : dim_(dim), proj_(dim * dim) {
    Rng rng(kProjectionSeed);
    for (auto& v : proj_) v = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  }

  std::size_t dim() const override { return dim_; }

  static std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (unsigned char ch : text) {
      if (std::isalnum(ch)) {
        cur.push_back(static_cast<char>(std::tolower(ch)));
      } else if (!cur.empty()) {
        tokens.push_back(std::move(cur));
        cur.clear();
      }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
  }

  std::vector<float> encode(const std::string& text) const override {
    const auto tokens = tokenize(text);
    if (tokens.empty()) throw InputError("instruction is empty");
    std::vector<double> bins(dim_, 0.0);
    for (const auto& tok : tokens) bins[Rng::fnv1a(tok) % dim_] += 1.0;
    std::vector<double> y(dim_, 0.0);
    for (std::size_t i = 0; i < dim_; ++i)
      for (std::size_t j = 0; j < dim_; ++j) y[i] += proj_[i * dim_ + j] * bins[j];
    double norm = 0.0;
    for (double v : y) norm += v * v;
    norm = std::sqrt(norm);
    if (!(norm > 0.0)) throw NumericError("instruction embedding has zero norm");
    std::vector<float> out(dim_);
    for (std::size_t i = 0; i < dim_; ++i) out[i] = static_cast<float>(y[i] / norm);
    return out;
  }

 private:
  std::size_t dim_;
  std::vector<double> proj_;
};

/// Precomputed embeddings keyed by exact instruction string (LLEMB1 container).
class FileTextEncoder final : public TextEncoder {
 public:
  explicit FileTextEncoder(const std::string& path) : table_(io::read_embeddings(path)) {
    if (table_.empty()) throw IoError("embedding file " + path + " holds no entries");
    dim_ = table_.begin()->second.size();
    for (const auto& [k, v] : table_)
      if (v.size() != dim_) throw IoError("embedding file " + path + " mixes dimensions");
  }

  std::size_t dim() const override { return dim_; }

  std::vector<float> encode(const std::string& text) const override {
    if (text.empty()) throw InputError("instruction is empty");
    auto it = table_.find(text);
    if (it == table_.end()) throw LookupError("no embedding for instruction \"" + text + "\"");
    return it->second;
  }

 private:
  std::map<std::string, std::vector<float>> table_;
  std::size_t dim_ = 0;
};

/// One modulation site (encoder exit or first decoder stage).
template <class T>
class IgmSite {
 public:
  IgmSite() = default;
  IgmSite(nn::ParamStore<T>& store, const std::string& name, std::size_t channels, std::size_t text_dim,
          std::size_t hidden, Rng& rng)
      : channels_(channels),
        text_adapter_(store, name + ".text_adapter", text_dim, hidden, channels, rng),
        refine_max_(store, name + ".refine_max", channels, hidden, channels, rng),
        refine_avg_(store, name + ".refine_avg", channels, hidden, channels, rng),
        wgb_(store, name + ".wgb", 2 * channels, hidden, channels, rng, nn::Init::Zero),
        cffb_(store, name + ".cffb", channels, false, rng, nn::Init::Zero) {}

  std::size_t channels() const { return channels_; }

  /// f'_t: (N, d_t) -> (N, C).
  Var<T> text_adapter(const Var<T>& f_t) const { return text_adapter_(f_t); }

  /// GMP(a) + GAP(b); the pooling half of the image feature refinement.
  static Var<T> pooled_sum(const Var<T>& max_branch, const Var<T>& avg_branch) {
    return ops::add(ops::global_max_pool(max_branch), ops::global_avg_pool(avg_branch));
  }

  /// f~_s: (N,C,H,W) -> (N,C).
  Var<T> image_feature_refine(const Var<T>& f) const {
    return pooled_sum(refine_max_(f), refine_avg_(f));
  }

  /// W = 2 sigmoid(MLP([f'_t, f~_s])), per channel, shape (N,C).
  Var<T> wgb(const Var<T>& f_text, const Var<T>& f_img) const {
    if (f_text.shape() != f_img.shape())
      throw ConfigError("IGM: text feature " + shape_str(f_text.shape()) + " vs image summary " +
                        shape_str(f_img.shape()));
    return ops::scale(ops::sigmoid(wgb_(ops::concat<T>({f_text, f_img}))), T(2));
  }

  Var<T> modulation_weights(const Var<T>& f, const Var<T>& f_t) const {
    return wgb(text_adapter(f_t), image_feature_refine(f));
  }

  /// CFFB(W * F~) + F~ with W broadcast over space.
  Var<T> apply(const Var<T>& f, const Var<T>& weights) const {
    return ops::add(cffb_(ops::mul_channel(f, weights)), f);
  }

  Var<T> operator()(const Var<T>& f, const Var<T>& f_t) const {
    if (f.shape().size() != 4 || f.dim(1) != channels_)
      throw ConfigError("IGM site expects " + std::to_string(channels_) + " channels, got " +
                        shape_str(f.shape()));
    return apply(f, modulation_weights(f, f_t));
  }

 private:
  std::size_t channels_ = 0;
  nn::Mlp<T> text_adapter_;
  nn::PixelMlp<T> refine_max_, refine_avg_;
  nn::Mlp<T> wgb_;
  Cffb<T> cffb_;
};

struct IgmConfig {
  std::size_t encoder_channels = 64;  // F~_e,3
  std::size_t decoder_channels = 32;  // F~_d,1
  std::size_t text_dim = 64;
  std::size_t hidden = 128;
};

/// The two independent IGM sites.
template <class T>
class Igm {
 public:
  Igm(const IgmConfig& cfg, Rng rng) : cfg_(cfg) {
    encoder_ = IgmSite<T>(store_, "igm.e3", cfg.encoder_channels, cfg.text_dim, cfg.hidden, rng);
    decoder_ = IgmSite<T>(store_, "igm.d1", cfg.decoder_channels, cfg.text_dim, cfg.hidden, rng);
  }

  Igm(const Igm&) = delete;
  Igm& operator=(const Igm&) = delete;

  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }
  const IgmConfig& config() const { return cfg_; }
  const IgmSite<T>& encoder_site() const { return encoder_; }
  const IgmSite<T>& decoder_site() const { return decoder_; }

 private:
  IgmConfig cfg_;
  nn::ParamStore<T> store_;
  IgmSite<T> encoder_, decoder_;
};

/// Batch of embeddings (N, d) as a constant graph input.
template <class T>
Var<T> embedding_batch(const std::vector<float>& e, std::size_t n) {
  Tensor<T> t({n, e.size()});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < e.size(); ++j) t[i * e.size() + j] = static_cast<T>(e[j]);
  return Var<T>(std::move(t));
}

}  // namespace dehaze
