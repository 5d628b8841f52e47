#pragma once

// Task feedback-guided adaptation. Features of the initial dehazed image and of the
// downstream task's feedback interact through bidirectional cross-attention; the
// result drives a two-way softmax weighting and is injected into the deep FFM.

#include <map>
#include <optional>
#include <string>

#include "dehaze/cffb.hpp"

namespace dehaze {

struct AdapterError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class FeedbackKind { SegLogits, DepthMap, BackboneFeatures };

inline const char* to_string(FeedbackKind k) {
  switch (k) {
    case FeedbackKind::SegLogits: return "seg_logits";
    case FeedbackKind::DepthMap: return "depth_map";
    case FeedbackKind::BackboneFeatures: return "backbone_features";
  }
  return "unknown";
}

/// What a downstream task reports back about an image: an output map or backbone features.
template <class T>
struct TaskFeedback {
  FeedbackKind kind;
  Var<T> payload;  // N x C x h x w
};

/// Single-head cross-attention over spatial tokens, no positional encoding.
template <class T>
class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(nn::ParamStore<T>& store, const std::string& name, std::size_t channels, Rng& rng)
      : q_(store, name + ".q", channels, channels, rng),
        k_(store, name + ".k", channels, channels, rng),
        v_(store, name + ".v", channels, channels, rng),
        out_(store, name + ".out", channels, channels, rng) {}

  Var<T> operator()(const Var<T>& query_src, const Var<T>& kv_src) const {
    if (query_src.shape() != kv_src.shape())
      throw InputError("cross-attention: " + shape_str(query_src.shape()) + " vs " +
                       shape_str(kv_src.shape()));
    const std::size_t C = query_src.dim(1), H = query_src.dim(2), W = query_src.dim(3);
    auto qt = ops::patchify(query_src, 1);
    auto kt = ops::patchify(kv_src, 1);
    auto att = ops::attention(q_(qt), k_(kt), v_(kt), 1);
    return ops::unpatchify(out_(att), C, H, W, 1);
  }

  const nn::Linear<T>& value_proj() const { return v_; }
  const nn::Linear<T>& out_proj() const { return out_; }

 private:
  nn::Linear<T> q_, k_, v_, out_;
};

template <class T>
struct CrossAttentionOutputs {
  Var<T> id_to_c;    // Q: fused, K/V: F_id
  Var<T> c_to_id;    // Q: F_id, K/V: fused
  Var<T> down_to_c;  // Q: fused, K/V: F_down
  Var<T> c_to_down;  // Q: F_down, K/V: fused
};

template <class T>
struct WeightPair {
  Var<T> q_id, q_down;
};

struct TfgaConfig {
  std::size_t channels = 64;         // deepest IDN scale
  std::size_t seg_classes = 2;
  std::size_t depth_channels = 1;
  std::size_t det_feature_channels = 16;
};

template <class T>
class Tfga {
 public:
  Tfga(const TfgaConfig& cfg, Rng rng) : cfg_(cfg) {
    const std::size_t C = cfg.channels;
    const std::string p = "tfga.";
    img_adapt_[0] = nn::Conv2d<T>(store_, p + "image_adapter.0", 3, C / 2, 3, 2, rng);
    img_adapt_[1] = nn::Conv2d<T>(store_, p + "image_adapter.1", C / 2, C, 3, 2, rng);
    img_adapt_[2] = nn::Conv2d<T>(store_, p + "image_adapter.2", C, C, 3, 1, rng);
    fb_adapt_[FeedbackKind::SegLogits] =
        nn::Conv2d<T>(store_, p + "feedback_adapter.seg", cfg.seg_classes, C, 1, 1, rng);
    fb_adapt_[FeedbackKind::DepthMap] =
        nn::Conv2d<T>(store_, p + "feedback_adapter.depth", cfg.depth_channels, C, 1, 1, rng);
    fb_adapt_[FeedbackKind::BackboneFeatures] =
        nn::Conv2d<T>(store_, p + "feedback_adapter.det", cfg.det_feature_channels, C, 1, 1, rng);
    fuse_conv_ = nn::Conv2d<T>(store_, p + "fuse.conv", 2 * C, C, 3, 1, rng);
    fuse_linear_ = nn::Conv2d<T>(store_, p + "fuse.linear", C, C, 1, 1, rng);
    att_id_to_c_ = CrossAttention<T>(store_, p + "xattn.id_to_c", C, rng);
    att_c_to_id_ = CrossAttention<T>(store_, p + "xattn.c_to_id", C, rng);
    att_down_to_c_ = CrossAttention<T>(store_, p + "xattn.down_to_c", C, rng);
    att_c_to_down_ = CrossAttention<T>(store_, p + "xattn.c_to_down", C, rng);
    branch_a_ = nn::Conv2d<T>(store_, p + "branch_a", 2 * C, C, 3, 1, rng);
    branch_b_ = nn::Conv2d<T>(store_, p + "branch_b", 2 * C, C, 3, 1, rng);
    cffb_[0] = Cffb<T>(store_, p + "cffb1", C, true, rng);
    cffb_[1] = Cffb<T>(store_, p + "cffb2", C, true, rng);
    head_id_ = nn::PixelMlp<T>(store_, p + "weights.id", C, C, C, rng, nn::Init::Zero);
    head_down_ = nn::PixelMlp<T>(store_, p + "weights.down", C, C, C, rng, nn::Init::Zero);
    out_conv_ = nn::Conv2d<T>(store_, p + "out_conv", C, C, 3, 1, rng);
    inject_ = nn::Conv2d<T>(store_, p + "inject", 2 * C, C, 3, 1, rng, nn::Init::Zero);
  }

  Tfga(const Tfga&) = delete;
  Tfga& operator=(const Tfga&) = delete;

  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }
  const TfgaConfig& config() const { return cfg_; }

  /// F_id from the dehazed image: three 3x3 convs, strides 2,2,1.
  Var<T> feature_adapt_image(const Var<T>& image) const {
    if (image.shape().size() != 4 || image.dim(1) != 3 || image.dim(2) % 4 || image.dim(3) % 4)
      throw InputError("feature_adapt_image: expected N x 3 x H x W with H,W divisible by 4, got " +
                       shape_str(image.shape()));
    auto h = ops::gelu(img_adapt_[0](image));
    h = ops::gelu(img_adapt_[1](h));
    return img_adapt_[2](h);
  }

  /// F_down: 1x1 projection of the feedback payload, bilinearly resized to (height, width).
  Var<T> feature_adapt_feedback(const TaskFeedback<T>& fb, std::size_t height, std::size_t width) const {
    auto it = fb_adapt_.find(fb.kind);
    if (it == fb_adapt_.end()) throw AdapterError("no feedback adapter for kind " + std::string(to_string(fb.kind)));
    const auto& conv = it->second;
    if (fb.payload.shape().size() != 4 || fb.payload.dim(1) != conv.weight.dim(1))
      throw AdapterError(std::string("feedback payload ") + shape_str(fb.payload.shape()) +
                         " does not fit adapter " + to_string(fb.kind));
    return ops::resize_bilinear(conv(fb.payload), height, width);
  }

  /// F_{id,down}: concat -> conv -> linear.
  Var<T> fused_query(const Var<T>& f_id, const Var<T>& f_down) const {
    return fuse_linear_(fuse_conv_(ops::concat<T>({f_id, f_down})));
  }

  CrossAttentionOutputs<T> bidirectional_cross_attention(const Var<T>& f_id, const Var<T>& f_down) const {
    if (f_id.shape() != f_down.shape())
      throw InputError("TFGA: F_id " + shape_str(f_id.shape()) + " vs F_down " + shape_str(f_down.shape()));
    auto fused = fused_query(f_id, f_down);
    return {att_id_to_c_(fused, f_id), att_c_to_id_(f_id, fused), att_down_to_c_(fused, f_down),
            att_c_to_down_(f_down, fused)};
  }

  /// F_idd: the two cross-paired branches, summed, through both CFFBs.
  Var<T> structural_features(const CrossAttentionOutputs<T>& a) const {
    auto s = ops::add(branch_a_(ops::concat<T>({a.id_to_c, a.c_to_down})),
                      branch_b_(ops::concat<T>({a.c_to_id, a.down_to_c})));
    return cffb_[1](cffb_[0](s));
  }

  /// Softmax across the two branches, per element.
  WeightPair<T> weight_generation(const Var<T>& f_idd) const {
    auto a = head_id_(f_idd);
    auto b = head_down_(f_idd);
    return {ops::softmax_pair_first(a, b), ops::softmax_pair_first(b, a)};
  }

  /// Conv(F_id * Q_id + F_down * Q_down + F_idd).
  Var<T> combine(const Var<T>& f_id, const Var<T>& f_down, const WeightPair<T>& q, const Var<T>& f_idd) const {
    auto s = ops::add(ops::add(ops::mul(f_id, q.q_id), ops::mul(f_down, q.q_down)), f_idd);
    return out_conv_(s);
  }

  Var<T> fuse(const Var<T>& f_id, const Var<T>& f_down) const {
    auto att = bidirectional_cross_attention(f_id, f_down);
    auto f_idd = structural_features(att);
    return combine(f_id, f_down, weight_generation(f_idd), f_idd);
  }

  /// Modulation tensor for the deep FFM: conv(concat(F_{id,dow}, F_e^l)).
  Var<T> inject_to_ffm(const Var<T>& f_iddow, const Var<T>& f_enc_last) const {
    if (f_iddow.shape() != f_enc_last.shape())
      throw InputError("inject_to_ffm: " + shape_str(f_iddow.shape()) + " vs " + shape_str(f_enc_last.shape()));
    return inject_(ops::concat<T>({f_iddow, f_enc_last}));
  }

  /// Full path from the current dehazed image and its feedback to the FFM injection.
  Var<T> operator()(const Var<T>& dehazed, const TaskFeedback<T>& fb, const Var<T>& f_enc_last) const {
    auto f_id = feature_adapt_image(dehazed);
    auto f_down = feature_adapt_feedback(fb, f_id.dim(2), f_id.dim(3));
    return inject_to_ffm(fuse(f_id, f_down), f_enc_last);
  }

  // Exposed for tests that pin sub-blocks to known values.
  nn::Conv2d<T>& out_conv() { return out_conv_; }
  const CrossAttention<T>& attention_id_to_c() const { return att_id_to_c_; }
  const Cffb<T>& cffb(std::size_t i) const { return cffb_.at(i); }

 private:
  TfgaConfig cfg_;
  nn::ParamStore<T> store_;
  std::array<nn::Conv2d<T>, 3> img_adapt_;
  std::map<FeedbackKind, nn::Conv2d<T>> fb_adapt_;
  nn::Conv2d<T> fuse_conv_, fuse_linear_;
  CrossAttention<T> att_id_to_c_, att_c_to_id_, att_down_to_c_, att_c_to_down_;
  nn::Conv2d<T> branch_a_, branch_b_;
  std::array<Cffb<T>, 2> cffb_;
  nn::PixelMlp<T> head_id_, head_down_;
  nn::Conv2d<T> out_conv_, inject_;
};

}  // namespace dehaze
