#pragma once

// Downstream tasks: the adapter interface the closed loop talks to, three small
// self-supervised stand-in tasks (segmentation, depth, detection), and the metrics
// used to score them.

#include <algorithm>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "dehaze/haze_model.hpp"
#include "dehaze/io.hpp"
#include "dehaze/nn.hpp"
#include "dehaze/tfga.hpp"

namespace dehaze {

enum class TaskKind { Seg, Depth, Det };

inline const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::Seg: return "seg";
    case TaskKind::Depth: return "depth";
    case TaskKind::Det: return "det";
  }
  return "unknown";
}

struct MetricReport {
  std::map<std::string, double> values;
  double at(const std::string& k) const {
    auto it = values.find(k);
    if (it == values.end()) throw LookupError("metric not reported: " + k);
    return it->second;
  }
};

// ---------------------------------------------------------------------------
// Metrics

/// Mean IoU over classes present in prediction or ground truth.
inline double miou(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes) {
  if (pred.empty() || gt.empty()) throw InputError("miou: empty input");
  if (pred.size() != gt.size()) throw InputError("miou: size mismatch");
  std::vector<double> inter(num_classes, 0), uni(num_classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], g = gt[i];
    if (p < 0 || p >= num_classes || g < 0 || g >= num_classes) throw InputError("miou: label out of range");
    if (p == g) {
      inter[p] += 1;
      uni[p] += 1;
    } else {
      uni[p] += 1;
      uni[g] += 1;
    }
  }
  double s = 0;
  int n = 0;
  for (int c = 0; c < num_classes; ++c)
    if (uni[c] > 0) {
      s += inter[c] / uni[c];
      ++n;
    }
  return s / n;
}

/// AbsRel, SqRel, RMSE, RMSElog and the three threshold accuracies.
template <class T>
MetricReport depth_metrics(std::span<const T> pred, std::span<const T> gt) {
  if (pred.size() != gt.size() || pred.empty()) throw InputError("depth_metrics: size mismatch or empty");
  double absrel = 0, sqrel = 0, se = 0, selog = 0;
  std::array<double, 3> delta{};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i], g = gt[i];
    if (!(p > 0) || !(g > 0)) throw InputError("depth_metrics: depths must be strictly positive");
    const double d = p - g;
    absrel += std::abs(d) / g;
    sqrel += d * d / g;
    se += d * d;
    const double dl = std::log(p) - std::log(g);
    selog += dl * dl;
    const double ratio = std::max(p / g, g / p);
    for (int k = 0; k < 3; ++k)
      if (ratio < std::pow(1.25, k + 1)) delta[k] += 1;
  }
  const double n = static_cast<double>(pred.size());
  MetricReport r;
  r.values = {{"absrel", absrel / n},        {"sqrel", sqrel / n},          {"rmse", std::sqrt(se / n)},
              {"rmselog", std::sqrt(selog / n)}, {"delta1", delta[0] / n}, {"delta2", delta[1] / n},
              {"delta3", delta[2] / n}};
  return r;
}

inline double box_iou(const io::Box& a, const io::Box& b) {
  const double x0 = std::max(a.x, b.x), y0 = std::max(a.y, b.y);
  const double x1 = std::min(a.x + a.w, b.x + b.w), y1 = std::min(a.y + a.h, b.y + b.h);
  const double inter = std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0);
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

namespace detail {
inline void check_boxes(const std::vector<io::Box>& boxes) {
  for (const auto& b : boxes)
    if (!std::isfinite(b.x) || !std::isfinite(b.y) || !std::isfinite(b.w) || !std::isfinite(b.h) ||
        !std::isfinite(b.score) || b.w < 0 || b.h < 0)
      throw InputError("malformed box");
}

/// 11-point interpolated AP for a single class at one IoU threshold.
inline double ap_at(const std::vector<io::Box>& preds, const std::vector<io::Box>& gts, double thr) {
  if (gts.empty()) return preds.empty() ? 1.0 : 0.0;
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
  std::vector<bool> used(gts.size(), false);
  std::vector<double> prec, rec;
  double tp = 0, fp = 0;
  for (std::size_t i : order) {
    double best = 0;
    std::size_t arg = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double iou = box_iou(preds[i], gts[g]);
      if (iou >= thr && iou > best) {
        best = iou;
        arg = g;
      }
    }
    if (arg < gts.size()) {
      used[arg] = true;
      tp += 1;
    } else {
      fp += 1;
    }
    prec.push_back(tp / (tp + fp));
    rec.push_back(tp / static_cast<double>(gts.size()));
  }
  double ap = 0;
  for (int r = 0; r <= 10; ++r) {
    double p = 0;
    for (std::size_t i = 0; i < prec.size(); ++i)
      if (rec[i] >= r / 10.0 - 1e-12) p = std::max(p, prec[i]);
    ap += p;
  }
  return ap / 11.0;
}
}  // namespace detail

/// Single-class AP: "ap50" at IoU 0.5 and "ap50_95" averaged over 0.50:0.05:0.95.
inline MetricReport simple_ap(const std::vector<io::Box>& preds, const std::vector<io::Box>& gts) {
  detail::check_boxes(preds);
  detail::check_boxes(gts);
  MetricReport r;
  r.values["ap50"] = detail::ap_at(preds, gts, 0.5);
  double s = 0;
  for (int i = 0; i < 10; ++i) s += detail::ap_at(preds, gts, 0.5 + 0.05 * i);
  r.values["ap50_95"] = s / 10.0;
  return r;
}

/// Brightness-threshold segmentation ground truth: 1 where mean(RGB) > 0.5.
template <class T>
std::vector<int> brightness_labels(const Tensor<T>& rgb) {
  const std::size_t HW = rgb.dim(1) * rgb.dim(2);
  std::vector<int> out(HW);
  for (std::size_t p = 0; p < HW; ++p)
    out[p] = (rgb[p] + rgb[HW + p] + rgb[2 * HW + p]) / T(3) > T(0.5) ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Adapter interface

/// Per-image supervision the toy tasks derive their targets from.
struct SceneTruth {
  Tensor<float> clear;          // 3 x H x W
  DepthMap<float> depth;
  std::vector<io::Box> boxes;
};

template <class T>
struct TaskOutput {
  TaskKind kind;
  Var<T> map;      // seg logits (N,2,H,W) | depth (N,1,H,W) | objectness logits (N,1,h,w)
  Var<T> offsets;  // det only: (N,4,h,w)
};

template <class T>
struct TaskTarget {
  TaskKind kind;
  std::vector<int> labels{};            // seg, N*H*W
  Tensor<T> depth{};                    // depth, (N,1,H,W)
  Tensor<T> objectness{}, offsets{}, offset_mask{};  // det
  std::vector<std::vector<io::Box>> boxes{};         // det, per image
};

template <class T>
class TaskAdapter {
 public:
  virtual ~TaskAdapter() = default;
  virtual TaskKind kind() const = 0;
  std::string name() const { return to_string(kind()); }

  virtual TaskOutput<T> run(const Var<T>& images) const = 0;
  virtual TaskFeedback<T> feedback(const Var<T>& images) const = 0;
  virtual Var<T> loss(const TaskOutput<T>& pred, const TaskTarget<T>& gt) const = 0;
  virtual MetricReport metric(const TaskOutput<T>& pred, const TaskTarget<T>& gt) const = 0;
  virtual TaskTarget<T> target(const std::vector<const SceneTruth*>& truth) const = 0;

  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }

 protected:
  void check_kind(const TaskOutput<T>& pred, const TaskTarget<T>& gt) const {
    if (pred.kind != kind() || gt.kind != kind())
      throw InputError(std::string("task mismatch: adapter ") + to_string(kind()) + " got " +
                       to_string(pred.kind) + "/" + to_string(gt.kind));
  }
  static void check_image(const Var<T>& images) {
    if (images.shape().size() != 4 || images.dim(1) != 3 || images.dim(2) % 4 || images.dim(3) % 4)
      throw InputError("task adapters expect N x 3 x H x W with H,W divisible by 4");
  }

  nn::ParamStore<T> store_;
};

/// Two-class segmentation: 3-layer conv head producing per-pixel logits.
template <class T>
class SegAdapter final : public TaskAdapter<T> {
 public:
  explicit SegAdapter(Rng rng) {
    auto& s = this->store_;
    c1_ = nn::Conv2d<T>(s, "task.seg.c1", 3, 16, 3, 1, rng);
    c2_ = nn::Conv2d<T>(s, "task.seg.c2", 16, 16, 3, 1, rng);
    c3_ = nn::Conv2d<T>(s, "task.seg.c3", 16, 2, 1, 1, rng);
  }

  TaskKind kind() const override { return TaskKind::Seg; }

  TaskOutput<T> run(const Var<T>& images) const override {
    this->check_image(images);
    return {TaskKind::Seg, c3_(ops::gelu(c2_(ops::gelu(c1_(images))))), {}};
  }

  TaskFeedback<T> feedback(const Var<T>& images) const override {
    return {FeedbackKind::SegLogits, run(images).map};
  }

  Var<T> loss(const TaskOutput<T>& pred, const TaskTarget<T>& gt) const override {
    this->check_kind(pred, gt);
    return ops::softmax_cross_entropy(pred.map, gt.labels);
  }

  static std::vector<int> argmax_labels(const Var<T>& logits) {
    const std::size_t N = logits.dim(0), K = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
    std::vector<int> out(N * HW);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p) {
        int best = 0;
        for (std::size_t k = 1; k < K; ++k)
          if (logits.value()[(n * K + k) * HW + p] > logits.value()[(n * K + best) * HW + p]) best = static_cast<int>(k);
        out[n * HW + p] = best;
      }
    return out;
  }

  MetricReport metric(const TaskOutput<T>& pred, const TaskTarget<T>& gt) const override {
    this->check_kind(pred, gt);
    MetricReport r;
    r.values["miou"] = miou(argmax_labels(pred.map), gt.labels, 2);
    return r;
  }

  TaskTarget<T> target(const std::vector<const SceneTruth*>& truth) const override {
    TaskTarget<T> t{TaskKind::Seg};
    for (const auto* s : truth) {
      auto l = brightness_labels(s->clear);
      t.labels.insert(t.labels.end(), l.begin(), l.end());
    }
    return t;
  }

 private:
  nn::Conv2d<T> c1_, c2_, c3_;
};

/// Monocular depth regression from the image plus normalized pixel coordinates.
template <class T>
class DepthAdapter final : public TaskAdapter<T> {
 public:
  static constexpr double kMinDepth = 0.1;

  explicit DepthAdapter(Rng rng) {
    auto& s = this->store_;
    c1_ = nn::Conv2d<T>(s, "task.depth.c1", 5, 16, 3, 2, rng);
    c2_ = nn::Conv2d<T>(s, "task.depth.c2", 16, 32, 3, 2, rng);
    c3_ = nn::Conv2d<T>(s, "task.depth.c3", 32, 32, 3, 1, rng);
    c4_ = nn::Conv2d<T>(s, "task.depth.c4", 32, 1, 1, 1, rng);
  }

  TaskKind kind() const override { return TaskKind::Depth; }

  static Var<T> coordinates(std::size_t N, std::size_t H, std::size_t W) {
    Tensor<T> c({N, 2, H, W});
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          c.at(n, 0, h, w) = static_cast<T>(2.0 * (h + 0.5) / H - 1.0);
          c.at(n, 1, h, w) = static_cast<T>(2.0 * (w + 0.5) / W - 1.0);
        }
    return Var<T>(std::move(c));
  }

  TaskOutput<T> run(const Var<T>& images) const override {
    this->check_image(images);
    const std::size_t N = images.dim(0), H = images.dim(2), W = images.dim(3);
    auto x = ops::concat<T>({images, coordinates(N, H, W)});
    auto h = ops::gelu(c3_(ops::gelu(c2_(ops::gelu(c1_(x))))));
    auto z = ops::resize_bilinear(c4_(h), H, W);
    return {TaskKind::Depth, ops::add_scalar(ops::softplus(z), static_cast<T>(kMinDepth)), {}};
  }

  TaskFeedback<T> feedback(const Var<T>& images) const override {
    return {FeedbackKind::DepthMap, run(images).map};
  }

  Var<T> loss(const TaskOutput<T>& pred, const TaskTarget<T>& gt) const override {
    this->check_kind(pred, gt);
    return ops::l1_mean(pred.map, Var<T>(gt.depth));
  }

  MetricReport metric(const TaskOutput<T>& pred, const TaskTarget<T>& gt) const override {
    this->check_kind(pred, gt);
    return depth_metrics<T>(pred.map.value().values(), gt.depth.values());
  }

  TaskTarget<T> target(const std::vector<const SceneTruth*>& truth) const override {
    TaskTarget<T> t{TaskKind::Depth};
    const std::size_t H = truth.at(0)->depth.height(), W = truth.at(0)->depth.width();
    t.depth = Tensor<T>({truth.size(), 1, H, W});
    for (std::size_t n = 0; n < truth.size(); ++n)
      for (std::size_t p = 0; p < H * W; ++p) t.depth[n * H * W + p] = static_cast<T>(truth[n]->depth.values()[p]);
    return t;
  }

 private:
  nn::Conv2d<T> c1_, c2_, c3_, c4_;
};

/// Dense single-class detector on a stride-4 grid: objectness plus (dx, dy, w/W, h/H) per cell.
template <class T>
class DetAdapter final : public TaskAdapter<T> {
 public:
  static constexpr std::size_t kStride = 4;
  static constexpr std::size_t kFeatureChannels = 16;
  static constexpr double kScoreFloor = 0.05;

  explicit DetAdapter(Rng rng) {
    auto& s = this->store_;
    b1_ = nn::Conv2d<T>(s, "task.det.b1", 3, 16, 3, 2, rng);
    b2_ = nn::Conv2d<T>(s, "task.det.b2", 16, kFeatureChannels, 3, 2, rng);
    b3_ = nn::Conv2d<T>(s, "task.det.b3", kFeatureChannels, kFeatureChannels, 3, 1, rng);
    obj_ = nn::Conv2d<T>(s, "task.det.obj", kFeatureChannels, 1, 1, 1, rng);
    off_ = nn::Conv2d<T>(s, "task.det.off", kFeatureChannels, 4, 1, 1, rng);
  }

  TaskKind kind() const override { return TaskKind::Det; }

  Var<T> backbone(const Var<T>& images) const {
    this->check_image(images);
    return ops::gelu(b3_(ops::gelu(b2_(ops::gelu(b1_(images))))));
  }

  TaskOutput<T> run(const Var<T>& images) const override {
    auto f = backbone(images);
    return {TaskKind::Det, obj_(f), off_(f)};
  }

  TaskFeedback<T> feedback(const Var<T>& images) const override {
    return {FeedbackKind::BackboneFeatures, backbone(images)};
  }

  Var<T> loss(const TaskOutput<T>& pred, const TaskTarget<T>& gt) const override {
    this->check_kind(pred, gt);
    return ops::add(ops::bce_with_logits(pred.map, gt.objectness),
                    ops::masked_l1(pred.offsets, gt.offsets, gt.offset_mask));
  }

  /// Boxes for image n, scored by objectness, greedy NMS at IoU 0.5.
  static std::vector<io::Box> decode(const TaskOutput<T>& out, std::size_t n, std::size_t H, std::size_t W) {
    const std::size_t gh = out.map.dim(2), gw = out.map.dim(3), cells = gh * gw;
    const auto& obj = out.map.value();
    const auto& off = out.offsets.value();
    std::vector<io::Box> cand;
    for (std::size_t i = 0; i < gh; ++i)
      for (std::size_t j = 0; j < gw; ++j) {
        const std::size_t c = i * gw + j;
        const double score = 1.0 / (1.0 + std::exp(-static_cast<double>(obj[n * cells + c])));
        if (score < kScoreFloor) continue;
        const double cx = (j + static_cast<double>(off[(n * 4 + 0) * cells + c])) * kStride;
        const double cy = (i + static_cast<double>(off[(n * 4 + 1) * cells + c])) * kStride;
        const double w = std::max(0.0, static_cast<double>(off[(n * 4 + 2) * cells + c])) * W;
        const double h = std::max(0.0, static_cast<double>(off[(n * 4 + 3) * cells + c])) * H;
        cand.push_back({cx - w / 2, cy - h / 2, w, h, score});
      }
    std::stable_sort(cand.begin(), cand.end(), [](const io::Box& a, const io::Box& b) { return a.score > b.score; });
    std::vector<io::Box> keep;
    for (const auto& b : cand)
      if (std::none_of(keep.begin(), keep.end(), [&](const io::Box& k) { return box_iou(k, b) > 0.5; }))
        keep.push_back(b);
    return keep;
  }

  MetricReport metric(const TaskOutput<T>& pred, const TaskTarget<T>& gt) const override {
    this->check_kind(pred, gt);
    const std::size_t N = pred.map.dim(0);
    const std::size_t H = pred.map.dim(2) * kStride, W = pred.map.dim(3) * kStride;
    MetricReport r;
    double ap50 = 0, ap = 0;
    for (std::size_t n = 0; n < N; ++n) {
      auto m = simple_ap(decode(pred, n, H, W), gt.boxes.at(n));
      ap50 += m.at("ap50");
      ap += m.at("ap50_95");
    }
    r.values["ap50"] = ap50 / N;
    r.values["ap50_95"] = ap / N;
    return r;
  }

  TaskTarget<T> target(const std::vector<const SceneTruth*>& truth) const override {
    TaskTarget<T> t{TaskKind::Det};
    const std::size_t N = truth.size(), H = truth.at(0)->clear.dim(1), W = truth.at(0)->clear.dim(2);
    const std::size_t gh = H / kStride, gw = W / kStride, cells = gh * gw;
    t.objectness = Tensor<T>({N, 1, gh, gw});
    t.offsets = Tensor<T>({N, 4, gh, gw});
    t.offset_mask = Tensor<T>({N, 4, gh, gw});
    for (std::size_t n = 0; n < N; ++n) {
      t.boxes.push_back(truth[n]->boxes);
      for (const auto& b : truth[n]->boxes) {
        const double cx = b.x + b.w / 2, cy = b.y + b.h / 2;
        const auto j = std::min<std::size_t>(static_cast<std::size_t>(cx / kStride), gw - 1);
        const auto i = std::min<std::size_t>(static_cast<std::size_t>(cy / kStride), gh - 1);
        const std::size_t c = i * gw + j;
        t.objectness[n * cells + c] = T(1);
        const double vals[4] = {cx / kStride - j, cy / kStride - i, b.w / W, b.h / H};
        for (std::size_t k = 0; k < 4; ++k) {
          t.offsets[(n * 4 + k) * cells + c] = static_cast<T>(vals[k]);
          t.offset_mask[(n * 4 + k) * cells + c] = T(1);
        }
      }
    }
    return t;
  }

 private:
  nn::Conv2d<T> b1_, b2_, b3_, obj_, off_;
};

/// Ordered adapter registry with the keyword vocabulary used for instruction routing.
template <class T>
class TaskRegistry {
 public:
  struct Entry {
    std::unique_ptr<TaskAdapter<T>> adapter;
    std::vector<std::string> keywords;
    std::string canonical_instruction;
  };

  static TaskRegistry toy(const Rng& rng) {
    TaskRegistry r;
    r.add(std::make_unique<SegAdapter<T>>(rng.split("task.seg")), {"segment", "segmentation"},
          "segment the scene");
    r.add(std::make_unique<DepthAdapter<T>>(rng.split("task.depth")), {"depth"}, "estimate depth");
    r.add(std::make_unique<DetAdapter<T>>(rng.split("task.det")), {"detect", "detection"}, "detect objects");
    return r;
  }

  void add(std::unique_ptr<TaskAdapter<T>> a, std::vector<std::string> keywords, std::string canonical) {
    entries_.push_back({std::move(a), std::move(keywords), std::move(canonical)});
  }

  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  TaskAdapter<T>& by_name(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.adapter->name() == name) return *e.adapter;
    throw LookupError("no task adapter named " + name);
  }

  std::string known_tasks() const {
    std::string s;
    for (const auto& e : entries_) s += (s.empty() ? "" : ", ") + e.adapter->name();
    return s;
  }

  /// Every adapter's parameters, in registry order.
  std::vector<std::pair<std::string, Var<T>>> all_params() const {
    std::vector<std::pair<std::string, Var<T>>> out;
    for (const auto& e : entries_)
      for (const auto& p : e.adapter->params().entries()) out.push_back(p);
    return out;
  }

 private:
  std::vector<Entry> entries_;
};

}  // namespace dehaze
