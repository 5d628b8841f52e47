#pragma once

// Dataset plumbing, two-stage training, instruction routing, closed-loop inference
// and the evaluation report.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include "dehaze/checkpoint.hpp"
#include "dehaze/config.hpp"
#include "dehaze/downstream.hpp"
#include "dehaze/idn.hpp"
#include "dehaze/igm.hpp"
#include "dehaze/losses.hpp"
#include "dehaze/optim.hpp"
#include "dehaze/quality_metrics.hpp"
#include "dehaze/synthetic.hpp"
#include "dehaze/tfga.hpp"

namespace dehaze {

// ---------------------------------------------------------------------------
// Data

struct Sample {
  std::string id;
  SceneTruth truth;
  HazeParams haze;
  Tensor<float> hazy;  // 3 x H x W
};

using Dataset = std::vector<Sample>;

inline HazeRange haze_range(const Settings& s) { return {s.beta_min, s.beta_max, s.a_min, s.a_max}; }

inline std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu", index);
  return buf;
}

/// Depth on the millimetre grid the PGM files store.
inline DepthMap<float> quantize_depth(const DepthMap<float>& d) {
  Tensor<float> q(d.values().shape());
  for (std::size_t i = 0; i < q.size(); ++i)
    q[i] = static_cast<float>(std::clamp(std::lround(d.values()[i] * 1000.0), 1L, 65535L)) / 1000.0f;
  return DepthMap<float>(std::move(q));
}

/// Procedural scene `index`; clear image and depth are pre-quantized so the in-memory
/// sample equals what a write/read round trip yields.
inline Sample procedural_sample(const Settings& s, std::size_t index) {
  const Rng root(s.seed);
  Rng scene_rng = root.split("scene").split(index);
  Rng haze_rng = root.split("haze").split(index);
  auto truth = make_scene(s.synth_size, scene_rng);
  truth.clear = io::quantize8(truth.clear);
  truth.depth = quantize_depth(truth.depth);
  const auto params = sample_haze(haze_range(s), haze_rng);
  auto hazy = synthesize_haze(truth.clear, truth.depth, params);
  return {sample_id(index), std::move(truth), params, std::move(hazy)};
}

inline Dataset synthesize_dataset(const Settings& s) {
  haze_range(s).validate();
  Dataset d;
  for (std::size_t i = 0; i < s.synth_count; ++i) d.push_back(procedural_sample(s, s.synth_offset + i));
  return d;
}

/// clear/, depth/, hazy/, gt/ plus manifest.tsv (clear<TAB>depth) and meta.tsv with the
/// haze draws and box files.
inline void write_dataset(const std::string& dir, const Dataset& data) {
  namespace fs = std::filesystem;
  std::vector<io::ManifestEntry> manifest;
  auto meta = io::detail::open_out((fs::path(dir) / "meta.tsv").string());
  meta << "id\tbeta\tA_r\tA_g\tA_b\tboxes\n";
  char buf[256];
  for (const auto& smp : data) {
    const std::string clear = "clear/" + smp.id + ".png", depth = "depth/" + smp.id + ".pgm";
    const std::string boxes = "gt/" + smp.id + "_boxes.csv";
    io::write_image((fs::path(dir) / clear).string(), smp.truth.clear);
    io::write_depth((fs::path(dir) / depth).string(), smp.truth.depth);
    io::write_image((fs::path(dir) / "hazy" / (smp.id + ".png")).string(), smp.hazy);
    io::write_mask((fs::path(dir) / "gt" / (smp.id + "_seg.pgm")).string(), brightness_labels(smp.truth.clear),
                   smp.truth.depth.height(), smp.truth.depth.width());
    io::write_boxes((fs::path(dir) / boxes).string(), smp.truth.boxes);
    std::snprintf(buf, sizeof buf, "%s\t%.17g\t%.17g\t%.17g\t%.17g\t", smp.id.c_str(), smp.haze.beta,
                  smp.haze.airlight[0], smp.haze.airlight[1], smp.haze.airlight[2]);
    meta << buf << boxes << '\n';
    manifest.push_back({clear, depth});
  }
  if (!meta) throw IoError("write failed: " + (fs::path(dir) / "meta.tsv").string());
  io::write_manifest((fs::path(dir) / "manifest.tsv").string(), manifest);
}

/// Loads a manifest. Haze parameters and boxes come from meta.tsv beside the manifest
/// when present; otherwise haze is drawn from the configured range.
inline Dataset load_dataset(const std::string& manifest_path, const Settings& s) {
  namespace fs = std::filesystem;
  const auto entries = io::read_manifest(manifest_path);
  if (entries.empty()) throw IoError("manifest has no entries: " + manifest_path);
  const auto base = fs::path(manifest_path).parent_path();
  const auto meta_path = base / "meta.tsv";

  struct Meta {
    std::string id;
    HazeParams haze;
    std::string boxes;
  };
  std::vector<Meta> meta;
  if (fs::exists(meta_path)) {
    std::ifstream is(meta_path);
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      Meta m;
      if (!(ls >> m.id >> m.haze.beta >> m.haze.airlight[0] >> m.haze.airlight[1] >> m.haze.airlight[2]))
        throw IoError("malformed line in " + meta_path.string() + ": " + line);
      ls >> m.boxes;
      meta.push_back(std::move(m));
    }
    if (meta.size() != entries.size())
      throw IoError(meta_path.string() + " has " + std::to_string(meta.size()) + " rows but the manifest has " +
                    std::to_string(entries.size()));
  }

  const Rng haze_root = Rng(s.seed).split("haze");
  Dataset d;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Sample smp;
    smp.truth.clear = io::read_image(entries[i].clear_path);
    smp.truth.depth = io::read_depth(entries[i].depth_path);
    if (smp.truth.clear.dim(1) != smp.truth.depth.height() || smp.truth.clear.dim(2) != smp.truth.depth.width())
      throw IoError("image and depth sizes differ: " + entries[i].clear_path + " / " + entries[i].depth_path);
    if (!meta.empty()) {
      smp.id = meta[i].id;
      smp.haze = meta[i].haze;
      if (!meta[i].boxes.empty()) smp.truth.boxes = io::read_boxes((base / meta[i].boxes).string());
    } else {
      smp.id = sample_id(i);
      Rng r = haze_root.split(i);
      smp.haze = sample_haze(haze_range(s), r);
    }
    try {
      smp.hazy = synthesize_haze(smp.truth.clear, smp.truth.depth, smp.haze);
    } catch (const InputError& e) {
      throw IoError("bad haze parameters for " + entries[i].clear_path + ": " + e.what());
    }
    d.push_back(std::move(smp));
  }
  return d;
}

namespace detail {

inline Tensor<float> flip_w(const Tensor<float>& t) {
  Tensor<float> out(t.shape());
  const std::size_t W = t.shape().back(), rows = t.size() / W;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t w = 0; w < W; ++w) out[r * W + w] = t[r * W + W - 1 - w];
  return out;
}

/// Window (y0, x0, size) of a C x H x W or H x W tensor.
inline Tensor<float> crop(const Tensor<float>& t, std::size_t y0, std::size_t x0, std::size_t size) {
  const bool planar = t.rank() == 2;
  const std::size_t C = planar ? 1 : t.dim(0), H = t.dim(planar ? 0 : 1), W = t.dim(planar ? 1 : 2);
  Tensor<float> out(planar ? Shape{size, size} : Shape{C, size, size});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) out[(c * size + y) * size + x] = t[(c * H + y0 + y) * W + x0 + x];
  return out;
}

}  // namespace detail

/// Horizontal flip and/or random square crop; boxes follow the geometry.
inline Sample augment(const Sample& in, Rng& rng, bool flip, std::size_t crop) {
  Sample s = in;
  const std::size_t H = in.hazy.dim(1), W = in.hazy.dim(2);
  if (flip && rng.coin()) {
    s.truth.clear = detail::flip_w(s.truth.clear);
    s.hazy = detail::flip_w(s.hazy);
    s.truth.depth = DepthMap<float>(detail::flip_w(s.truth.depth.values()));
    for (auto& b : s.truth.boxes) b.x = static_cast<double>(W) - b.x - b.w;
  }
  if (crop && crop < std::min(H, W)) {
    const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(H - crop)));
    const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(W - crop)));
    s.truth.clear = detail::crop(s.truth.clear, y0, x0, crop);
    s.hazy = detail::crop(s.hazy, y0, x0, crop);
    s.truth.depth = DepthMap<float>(detail::crop(s.truth.depth.values(), y0, x0, crop));
    std::vector<io::Box> kept;
    const double c = static_cast<double>(crop);
    for (auto b : s.truth.boxes) {
      const double x1 = std::min(b.x + b.w - x0, c), y1 = std::min(b.y + b.h - y0, c);
      b.x = std::max(b.x - x0, 0.0);
      b.y = std::max(b.y - y0, 0.0);
      b.w = x1 - b.x;
      b.h = y1 - b.y;
      if (b.w >= 1 && b.h >= 1) kept.push_back(b);
    }
    s.truth.boxes = std::move(kept);
  }
  return s;
}

template <class T>
Var<T> stack_images(const std::vector<const Tensor<float>*>& imgs) {
  const Shape s0 = imgs.at(0)->shape();
  Tensor<T> out({imgs.size(), s0[0], s0[1], s0[2]});
  const std::size_t M = imgs[0]->size();
  for (std::size_t n = 0; n < imgs.size(); ++n) {
    if (imgs[n]->shape() != s0) throw InputError("batch mixes image sizes; training needs equal sizes");
    for (std::size_t i = 0; i < M; ++i) out[n * M + i] = static_cast<T>((*imgs[n])[i]);
  }
  return Var<T>(std::move(out));
}

struct Batch {
  std::vector<Sample> samples;
  std::vector<const SceneTruth*> truth;
  std::vector<const Tensor<float>*> hazy, clear;
};

inline Batch make_batch(const Dataset& data, const std::vector<std::size_t>& idx, Rng& rng, bool flip,
                        std::size_t crop) {
  Batch b;
  b.samples.reserve(idx.size());
  for (auto i : idx) b.samples.push_back(augment(data[i], rng, flip, crop));
  for (const auto& s : b.samples) {
    b.truth.push_back(&s.truth);
    b.hazy.push_back(&s.hazy);
    b.clear.push_back(&s.truth.clear);
  }
  return b;
}

/// Fisher-Yates over [0, n) with the project RNG.
inline std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i) - 1))]);
  return p;
}

inline std::vector<std::vector<std::size_t>> batches(const std::vector<std::size_t>& order, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch)
    out.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + batch));
  return out;
}

// ---------------------------------------------------------------------------
// System

template <class T>
struct System {
  Settings cfg;
  std::unique_ptr<Idn<T>> idn;
  std::unique_ptr<Tfga<T>> tfga;
  std::unique_ptr<Igm<T>> igm;
  std::unique_ptr<TaskRegistry<T>> tasks;
  std::unique_ptr<PerceptualExtractor<T>> extractor;
  std::unique_ptr<TextEncoder> text;

  explicit System(const Settings& s) : cfg(s) {
    const Rng root(s.seed);
    idn = std::make_unique<Idn<T>>(IdnConfig{s.channels, s.heads}, root.split("idn"));
    if (s.text_kind == "file")
      text = std::make_unique<FileTextEncoder>(s.text_file);
    else
      text = std::make_unique<ToyTextEncoder>();
    TfgaConfig tc;
    tc.channels = s.channels[2];
    tc.det_feature_channels = DetAdapter<T>::kFeatureChannels;
    tfga = std::make_unique<Tfga<T>>(tc, root.split("tfga"));
    IgmConfig ic;
    ic.encoder_channels = s.channels[2];
    ic.decoder_channels = s.channels[1];
    ic.text_dim = text->dim();
    igm = std::make_unique<Igm<T>>(ic, root.split("igm"));
    tasks = std::make_unique<TaskRegistry<T>>(TaskRegistry<T>::toy(root.split("tasks")));
    if (s.perceptual_kind == "file")
      extractor = std::make_unique<PerceptualExtractor<T>>(
          PerceptualExtractor<T>::from_tensors(io::read_checkpoint(s.perceptual_file)));
    else
      extractor = std::make_unique<PerceptualExtractor<T>>(PerceptualExtractor<T>::toy());
  }

  std::string path(const std::string& file) const { return (std::filesystem::path(cfg.ckpt_dir) / file).string(); }

  void save_idn() const { io::write_checkpoint(path("idn.ckpt"), export_params(idn->params())); }
  void save_stage2() const {
    auto t = export_params(tfga->params());
    auto g = export_params(igm->params());
    t.insert(t.end(), g.begin(), g.end());
    io::write_checkpoint(path("stage2.ckpt"), t);
  }
  void save_tasks() const {
    io::NamedTensors t;
    for (const auto& e : tasks->entries()) {
      auto p = export_params(e.adapter->params());
      t.insert(t.end(), p.begin(), p.end());
    }
    io::write_checkpoint(path("tasks.ckpt"), t);
  }

  void load_idn() {
    if (!std::filesystem::exists(path("idn.ckpt"))) throw IoError("missing IDN checkpoint " + path("idn.ckpt"));
    import_params(idn->params(), io::read_checkpoint(path("idn.ckpt")));
  }
  bool load_stage2() {
    if (!std::filesystem::exists(path("stage2.ckpt"))) return false;
    const auto t = io::read_checkpoint(path("stage2.ckpt"));
    import_params(tfga->params(), t);
    import_params(igm->params(), t);
    return true;
  }
  bool load_tasks() {
    if (!std::filesystem::exists(path("tasks.ckpt"))) return false;
    const auto t = io::read_checkpoint(path("tasks.ckpt"));
    for (auto& e : tasks->entries()) import_params(e.adapter->params(), t);
    return true;
  }
};

// ---------------------------------------------------------------------------
// Closed loop

/// First registered task whose keyword appears as a word of `text`.
template <class T>
TaskAdapter<T>& route_instruction(const TaskRegistry<T>& reg, const std::string& text) {
  const auto tokens = ToyTextEncoder::tokenize(text);
  if (tokens.empty()) throw InputError("instruction is empty");
  if (reg.empty()) throw ConfigError("task registry is empty");
  for (const auto& e : reg.entries())
    for (const auto& k : e.keywords)
      if (std::find(tokens.begin(), tokens.end(), k) != tokens.end()) return *e.adapter;
  throw RoutingError("no task matches instruction \"" + text + "\"; known tasks: " + reg.known_tasks());
}

/// One feedback pass: feedback of `current`, TFGA injection and IGM sites, decode of the
/// cached encoder features. Gradients reach only TFGA and IGM parameters.
template <class T>
Var<T> modulated_decode(const System<T>& sys, const EncoderFeatures<T>& f, const Var<T>& current,
                        const TaskAdapter<T>& adapter, const Var<T>& f_t) {
  TaskFeedback<T> fb;
  {
    NoGradGuard ng;
    fb = adapter.feedback(current.detach());
  }
  ModulationBundle<T> bundle;
  if (sys.cfg.use_tfga) bundle.deep_injection = (*sys.tfga)(current.detach(), fb, f.deepest());
  if (sys.cfg.use_igm) {
    const Igm<T>* igm = sys.igm.get();
    bundle.encoder_site = [igm, f_t](const Var<T>& x) { return igm->encoder_site()(x, f_t); };
    bundle.decoder_site = [igm, f_t](const Var<T>& x) { return igm->decoder_site()(x, f_t); };
  }
  return sys.idn->decode(f, &bundle);
}

struct TraceEntry {
  long iteration;
  std::string task;
  double mean_change;  // mean |J'_w - previous|
  double task_loss;    // NaN without ground truth
  double psnr;         // NaN without ground truth
};

template <class T>
struct ClosedLoopResult {
  Var<T> initial;  // J'
  Var<T> output;   // J'_w
  TaskOutput<T> task_output;
  std::string task;
  std::vector<TraceEntry> trace;
};

namespace detail {
template <class T>
void require_finite(const Var<T>& v, const std::string& what) {
  if (!v.value().all_finite()) throw NumericError("non-finite values in " + what);
}
}  // namespace detail

/// Initial dehazing, task feedback, feature modulation, result update; repeated k_max times.
template <class T>
ClosedLoopResult<T> closed_loop_infer(const System<T>& sys, const Var<T>& hazy, const std::string& instruction,
                                      long k_max, const std::vector<const SceneTruth*>* truth = nullptr) {
  if (k_max < 1) throw ConfigError("k_max must be >= 1");
  auto& adapter = route_instruction(*sys.tasks, instruction);
  NoGradGuard ng;
  ClosedLoopResult<T> r;
  r.task = adapter.name();
  const auto f = sys.idn->encode(hazy);
  r.initial = sys.idn->decode(f);
  detail::require_finite(r.initial, "initial dehazing");
  const auto f_t = embedding_batch<T>(sys.text->encode(instruction), hazy.dim(0));
  std::optional<TaskTarget<T>> target;
  if (truth) target = adapter.target(*truth);
  Var<T> current = r.initial;
  for (long k = 1; k <= k_max; ++k) {
    auto next = modulated_decode(sys, f, current, adapter, f_t);
    detail::require_finite(next, "closed-loop iteration " + std::to_string(k));
    TraceEntry e{k, r.task, 0.0, std::nan(""), std::nan("")};
    for (std::size_t i = 0; i < next.size(); ++i)
      e.mean_change += std::abs(static_cast<double>(next.value()[i]) - current.value()[i]);
    e.mean_change /= static_cast<double>(next.size());
    if (target) {
      e.task_loss = adapter.loss(adapter.run(next), *target).item();
      Tensor<float> clear({truth->size(), 3, hazy.dim(2), hazy.dim(3)});
      const std::size_t M = 3 * hazy.dim(2) * hazy.dim(3);
      for (std::size_t n = 0; n < truth->size(); ++n)
        std::copy_n((*truth)[n]->clear.data(), M, clear.data() + n * M);
      e.psnr = metrics::psnr(next.value().template cast<float>(), clear);
    }
    r.trace.push_back(e);
    current = next;
  }
  r.output = current;
  r.task_output = adapter.run(current);
  return r;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  long epoch;
  std::string split;
  double l1 = 0, ratio = 0, mcr = 0, down = 0, total = 0, ordering = 0;
};

using LogSink = std::function<void(const EpochLog&)>;

inline std::string log_header() { return "epoch,split,l1,ratio,mcr,down,total,ordering_fraction"; }

inline std::string log_line(const EpochLog& e) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%ld,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", e.epoch, e.split.c_str(), e.l1, e.ratio,
                e.mcr, e.down, e.total, e.ordering);
  return buf;
}

inline void write_log(const std::string& path, const std::vector<EpochLog>& log) {
  auto os = io::detail::open_out(path);
  os << log_header() << '\n';
  for (const auto& e : log) os << log_line(e) << '\n';
  if (!os) throw IoError("write failed: " + path);
}

namespace detail {
inline void require_data(const Dataset& data) {
  if (data.empty()) throw IoError("dataset is empty");
}
inline void check_loss(double v, long epoch, std::size_t batch, const std::string& parts) {
  if (!std::isfinite(v))
    throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                       " (" + parts + ")");
}
}  // namespace detail

/// Stage 1: IDN on l1 + lambda * contrastive ratio. ordering_fraction reports the share
/// of samples whose output beats the hazy input in l1.
template <class T>
std::vector<EpochLog> train_stage1(System<T>& sys, const Dataset& data, const LogSink& sink = {}) {
  detail::require_data(data);
  const auto& c = sys.cfg;
  LossWeights{c.lambda, c.beta1, c.beta2, c.gamma}.validate();
  auto& idn = *sys.idn;
  idn.params().set_trainable(true);
  Adam<T> opt(idn.params().vars());
  Rng rng = Rng(c.seed).split("stage1");
  const std::size_t per_epoch = (data.size() + c.batch - 1) / c.batch;
  const long total_steps = c.epochs * static_cast<long>(per_epoch);
  long step = 0;
  std::vector<EpochLog> log;
  for (long epoch = 1; epoch <= c.epochs; ++epoch) {
    Rng er = rng.split(static_cast<std::uint64_t>(epoch));
    EpochLog e{epoch, "train"};
    std::size_t seen = 0, ordered = 0, bi = 0;
    for (const auto& idx : batches(permutation(data.size(), er), c.batch)) {
      auto b = make_batch(data, idx, er, c.flip, c.crop);
      auto hazy = stack_images<T>(b.hazy);
      auto clear = stack_images<T>(b.clear);
      opt.zero_grad();
      auto pred = idn.forward(hazy);
      auto l1 = l1_loss(pred, clear);
      Var<T> total = l1;
      double ratio = 0;
      if (c.lambda > 0) {
        auto r = contrastive_ratio(clear, pred, hazy, *sys.extractor);
        ratio = r.item();
        total = ops::add(l1, ops::scale(r, static_cast<T>(c.lambda)));
      }
      detail::check_loss(total.item(), epoch, bi, "l1=" + std::to_string(l1.item()) + " ratio=" + std::to_string(ratio));
      const auto lp = per_sample_l1(pred.value(), clear.value());
      const auto lh = per_sample_l1(hazy.value(), clear.value());
      for (std::size_t n = 0; n < lp.size(); ++n) ordered += lp[n] < lh[n];
      const double w = static_cast<double>(idx.size());
      e.l1 += l1.item() * w;
      e.ratio += ratio * w;
      e.total += total.item() * w;
      seen += idx.size();
      backward(total);
      opt.step(cosine_lr(c.lr, step++, total_steps));
      ++bi;
    }
    e.l1 /= seen;
    e.ratio /= seen;
    e.total /= seen;
    e.ordering = static_cast<double>(ordered) / seen;
    log.push_back(e);
    if (sink) sink(e);
  }
  idn.params().set_trainable(false);
  return log;
}

/// Fits each toy task head on clear images, then freezes it. Returns the last-epoch loss per task.
template <class T>
std::vector<double> fit_task_heads(System<T>& sys, const Dataset& data, std::ostream* progress = nullptr) {
  detail::require_data(data);
  const auto& c = sys.cfg;
  std::vector<double> finals;
  for (auto& entry : sys.tasks->entries()) {
    auto& a = *entry.adapter;
    a.params().set_trainable(true);
    Adam<T> opt(a.params().vars());
    Rng rng = Rng(c.seed).split("tasks.fit").split(a.name());
    const std::size_t per_epoch = (data.size() + c.batch - 1) / c.batch;
    const long total_steps = std::max<long>(1, c.task_epochs * static_cast<long>(per_epoch));
    long step = 0;
    double last = 0;
    for (long epoch = 1; epoch <= c.task_epochs; ++epoch) {
      Rng er = rng.split(static_cast<std::uint64_t>(epoch));
      double sum = 0;
      std::size_t seen = 0;
      for (const auto& idx : batches(permutation(data.size(), er), c.batch)) {
        auto b = make_batch(data, idx, er, c.flip, c.crop);
        auto x = stack_images<T>(b.clear);
        opt.zero_grad();
        auto l = a.loss(a.run(x), a.target(b.truth));
        detail::check_loss(l.item(), epoch, step, "task " + a.name());
        sum += l.item() * idx.size();
        seen += idx.size();
        backward(l);
        opt.step(cosine_lr(c.task_lr, step++, total_steps));
      }
      last = sum / seen;
      if (progress) *progress << "task " << a.name() << " epoch " << epoch << " loss " << last << '\n';
    }
    a.params().set_trainable(false);
    finals.push_back(last);
  }
  return finals;
}

/// Stage 2: TFGA and IGM on the frozen IDN and frozen task heads; tasks alternate per batch.
template <class T>
std::vector<EpochLog> train_stage2(System<T>& sys, const Dataset& data, const LogSink& sink = {}) {
  detail::require_data(data);
  const auto& c = sys.cfg;
  LossWeights{c.lambda, c.beta1, c.beta2, c.gamma}.validate();
  if (sys.tasks->empty()) throw ConfigError("stage 2 needs at least one task adapter");
  if (!c.use_tfga && !c.use_igm) throw ConfigError("stage 2 needs loop.use_tfga or loop.use_igm");
  sys.idn->params().set_trainable(false);
  for (auto& e : sys.tasks->entries()) e.adapter->params().set_trainable(false);
  std::vector<Var<T>> params;
  if (c.use_tfga) {
    sys.tfga->params().set_trainable(true);
    auto v = sys.tfga->params().vars();
    params.insert(params.end(), v.begin(), v.end());
  }
  if (c.use_igm) {
    sys.igm->params().set_trainable(true);
    auto v = sys.igm->params().vars();
    params.insert(params.end(), v.begin(), v.end());
  }
  const auto idn_hash = param_hash(sys.idn->params(), "idn.");

  std::vector<std::vector<float>> embeddings;
  for (const auto& e : sys.tasks->entries()) embeddings.push_back(sys.text->encode(e.canonical_instruction));

  Adam<T> opt(params);
  Rng rng = Rng(c.seed).split("stage2");
  const std::size_t per_epoch = (data.size() + c.batch - 1) / c.batch;
  const long total_steps = c.epochs * static_cast<long>(per_epoch);
  long step = 0;
  std::vector<EpochLog> log;
  for (long epoch = 1; epoch <= c.epochs; ++epoch) {
    Rng er = rng.split(static_cast<std::uint64_t>(epoch));
    EpochLog e{epoch, "train"};
    std::size_t seen = 0, ordered = 0, bi = 0;
    for (const auto& idx : batches(permutation(data.size(), er), c.batch)) {
      const std::size_t ti = static_cast<std::size_t>(step) % sys.tasks->size();
      auto& adapter = *sys.tasks->entries()[ti].adapter;
      auto b = make_batch(data, idx, er, c.flip, c.crop);
      auto hazy = stack_images<T>(b.hazy);
      auto clear = stack_images<T>(b.clear);
      EncoderFeatures<T> f;
      Var<T> initial;
      {
        NoGradGuard ng;
        f = sys.idn->encode(hazy);
        initial = sys.idn->decode(f);
      }
      const auto lp = per_sample_l1(initial.value(), clear.value());
      const auto lh = per_sample_l1(hazy.value(), clear.value());
      opt.zero_grad();
      auto jw = modulated_decode(sys, f, initial, adapter, embedding_batch<T>(embeddings[ti], idx.size()));
      auto l1 = l1_loss(jw, clear);
      Var<T> dehaze = l1;
      double ratio = 0;
      if (c.lambda > 0) {
        auto r = contrastive_ratio(clear, jw, hazy, *sys.extractor);
        ratio = r.item();
        dehaze = ops::add(l1, ops::scale(r, static_cast<T>(c.lambda)));
      }
      auto mcr = mcr_loss_batch(jw, clear.value(), lp, lh, c.beta1, c.beta2);
      auto down = adapter.loss(adapter.run(jw), adapter.target(b.truth));
      auto total = total_loss(dehaze, mcr, std::optional<Var<T>>(down), c.gamma);
      detail::check_loss(total.item(), epoch, bi,
                         "dehaze=" + std::to_string(dehaze.item()) + " mcr=" + std::to_string(mcr.item()) +
                             " down=" + std::to_string(down.item()));
      const auto lw = per_sample_l1(jw.value(), clear.value());
      for (std::size_t n = 0; n < lw.size(); ++n) ordered += lw[n] < lp[n] && lp[n] < lh[n];
      const double w = static_cast<double>(idx.size());
      e.l1 += l1.item() * w;
      e.ratio += ratio * w;
      e.mcr += mcr.item() * w;
      e.down += down.item() * w;
      e.total += total.item() * w;
      seen += idx.size();
      backward(total);
      opt.step(cosine_lr(c.lr, step++, total_steps));
      ++bi;
    }
    for (double* v : {&e.l1, &e.ratio, &e.mcr, &e.down, &e.total}) *v /= seen;
    e.ordering = static_cast<double>(ordered) / seen;
    log.push_back(e);
    if (sink) sink(e);
  }
  sys.tfga->params().set_trainable(false);
  sys.igm->params().set_trainable(false);
  if (param_hash(sys.idn->params(), "idn.") != idn_hash)
    throw std::logic_error("stage 2 modified IDN parameters");
  return log;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Report {
  std::vector<std::string> columns;  // after image_id
  std::vector<std::pair<std::string, std::vector<double>>> rows;

  std::size_t index(const std::string& col) const {
    auto it = std::find(columns.begin(), columns.end(), col);
    if (it == columns.end()) throw LookupError("report has no column " + col);
    return static_cast<std::size_t>(it - columns.begin());
  }
  bool has(const std::string& col) const { return std::find(columns.begin(), columns.end(), col) != columns.end(); }
  std::vector<double> column(const std::string& col) const {
    const auto i = index(col);
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(r.second[i]);
    return out;
  }
  double mean(const std::string& col) const {
    const auto v = column(col);
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  }
};

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// One row per sample and a final `mean` row.
inline void write_report(const std::string& path, const Report& r) {
  auto os = io::detail::open_out(path);
  os << "image_id";
  for (const auto& c : r.columns) os << ',' << c;
  os << '\n';
  for (const auto& [id, vals] : r.rows) {
    os << id;
    for (double v : vals) os << ',' << format_number(v);
    os << '\n';
  }
  os << "mean";
  for (const auto& c : r.columns) os << ',' << format_number(r.mean(c));
  os << '\n';
  if (!os) throw IoError("write failed: " + path);
}

namespace detail {

template <class T>
void task_columns(const TaskAdapter<T>& a, const TaskOutput<T>& out, const TaskTarget<T>& gt,
                  const std::string& prefix, std::vector<std::pair<std::string, double>>& row) {
  const auto m = a.metric(out, gt);
  const std::string p = prefix + a.name() + "_";
  switch (a.kind()) {
    case TaskKind::Seg: row.emplace_back(p + "miou", m.at("miou")); break;
    case TaskKind::Depth:
      row.emplace_back(p + "absrel", m.at("absrel"));
      row.emplace_back(p + "rmse", m.at("rmse"));
      break;
    case TaskKind::Det: row.emplace_back(p + "ap50", m.at("ap50")); break;
  }
  row.emplace_back(p + "loss", a.loss(out, gt).item());
}

}  // namespace detail

/// Image metrics for J' (and the hazy input) on every sample; toy task metrics on J' when
/// task heads are available; per-task closed-loop columns `cl_<task>_*` when stage 2 is.
template <class T>
Report evaluate(const System<T>& sys, const Dataset& data, bool with_tasks, bool with_closed_loop) {
  detail::require_data(data);
  const auto& c = sys.cfg;
  NoGradGuard ng;
  Report rep;
  for (const auto& smp : data) {
    std::vector<std::pair<std::string, double>> row;
    std::vector<const Tensor<float>*> one_h{&smp.hazy}, one_c{&smp.truth.clear};
    std::vector<const SceneTruth*> truth{&smp.truth};
    auto hazy = stack_images<T>(one_h);
    auto clear = stack_images<T>(one_c);
    const auto f = sys.idn->encode(hazy);
    auto initial = sys.idn->decode(f);
    detail::require_finite(initial, "dehazing " + smp.id);
    const auto jp = initial.value().template cast<float>().reshaped(smp.hazy.shape());
    row.emplace_back("psnr", metrics::psnr(jp, smp.truth.clear));
    row.emplace_back("ssim", metrics::ssim(jp, smp.truth.clear));
    row.emplace_back("perceptual",
                     metrics::perceptual_distance(initial.value(), clear.value(), *sys.extractor));
    row.emplace_back("hazy_psnr", metrics::psnr(smp.hazy, smp.truth.clear));
    const double lp = per_sample_l1(initial.value(), clear.value())[0];
    const double lh = per_sample_l1(hazy.value(), clear.value())[0];
    row.emplace_back("l_p", lp);
    row.emplace_back("l_h", lh);
    if (with_tasks)
      for (const auto& e : sys.tasks->entries()) {
        const auto& a = *e.adapter;
        detail::task_columns(a, a.run(initial), a.target(truth), "", row);
      }
    if (with_closed_loop)
      for (const auto& e : sys.tasks->entries()) {
        const auto r = closed_loop_infer(sys, hazy, e.canonical_instruction, c.k_max);
        const auto& a = route_instruction(*sys.tasks, e.canonical_instruction);
        const std::string p = "cl_" + a.name() + "_";
        const auto jw = r.output.value().template cast<float>().reshaped(smp.hazy.shape());
        row.emplace_back(p + "psnr", metrics::psnr(jw, smp.truth.clear));
        row.emplace_back(p + "ssim", metrics::ssim(jw, smp.truth.clear));
        row.emplace_back(p + "perceptual",
                         metrics::perceptual_distance(r.output.value(), clear.value(), *sys.extractor));
        const auto gt = a.target(truth);
        detail::task_columns(a, r.task_output, gt, "cl_", row);
        const double lw = per_sample_l1(r.output.value(), clear.value())[0];
        const double dehaze = predeh_loss(r.output, clear, hazy, *sys.extractor, c.lambda).item();
        const double down = a.loss(r.task_output, gt).item();
        row.emplace_back(p + "l_w", lw);
        row.emplace_back(p + "total", dehaze + mcr_loss(lw, lp, lh, c.beta1, c.beta2) + c.gamma * down);
        row.emplace_back(p + "ordered", (lw < lp && lp < lh) ? 1.0 : 0.0);
      }
    if (rep.columns.empty())
      for (const auto& [k, v] : row) rep.columns.push_back(k);
    std::vector<double> vals;
    for (const auto& [k, v] : row) vals.push_back(v);
    rep.rows.emplace_back(smp.id, std::move(vals));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Command-level drivers

inline Dataset run_synth(const Settings& s, std::ostream& out) {
  auto data = synthesize_dataset(s);
  write_dataset(s.out_dir, data);
  out << "wrote " << data.size() << " samples to " << s.out_dir << '\n';
  return data;
}

/// Trains the configured stage and writes its checkpoint(s) and log.
inline void run_train(const Settings& s, std::ostream& out) {
  const auto data = load_dataset(s.manifest, s);
  System<float> sys(s);
  auto sink = [&out](const EpochLog& e) { out << log_line(e) << '\n'; };
  out << log_header() << '\n';
  if (s.stage == 1) {
    const auto log = train_stage1(sys, data, sink);
    sys.save_idn();
    write_log(sys.path("stage1_log.csv"), log);
    out << "saved " << sys.path("idn.ckpt") << '\n';
    return;
  }
  sys.load_idn();
  if (!sys.load_tasks()) {
    fit_task_heads(sys, data);
    sys.save_tasks();
  }
  const auto before = param_hash(sys.idn->params(), "idn.");
  const auto log = train_stage2(sys, data, sink);
  if (param_hash(sys.idn->params(), "idn.") != before) throw std::logic_error("IDN parameters changed in stage 2");
  sys.save_stage2();
  write_log(sys.path("stage2_log.csv"), log);
  out << "saved " << sys.path("stage2.ckpt") << " (idn hash " << std::hex << before << std::dec << " unchanged)\n";
}

inline Report run_eval(const Settings& s, std::ostream& out) {
  const auto data = load_dataset(s.manifest, s);
  System<float> sys(s);
  sys.load_idn();
  const bool tasks = sys.load_tasks();
  const bool stage2 = tasks && sys.load_stage2();
  if (!tasks) out << "note: no tasks.ckpt in " << s.ckpt_dir << "; task columns omitted\n";
  if (tasks && !stage2) out << "note: no stage2.ckpt in " << s.ckpt_dir << "; closed-loop columns omitted\n";
  const auto rep = evaluate(sys, data, tasks, stage2);
  write_report(s.report, rep);
  out << "wrote " << rep.rows.size() << " rows to " << s.report << "; mean psnr " << rep.mean("psnr")
      << " (hazy " << rep.mean("hazy_psnr") << ")\n";
  return rep;
}

struct InferResult {
  std::string task;
  bool closed_loop = false;
  std::vector<TraceEntry> trace;
};

/// Dehazes one image; closed loop when a stage-2 checkpoint exists, otherwise open loop.
inline InferResult run_infer(const Settings& s, const std::string& image, const std::string& instruction,
                             const std::string& output, std::ostream& out, std::ostream& warn) {
  System<float> sys(s);
  auto& adapter = route_instruction(*sys.tasks, instruction);
  sys.load_idn();
  const auto img = io::read_image(image);
  const std::size_t H = img.dim(1), W = img.dim(2);
  const std::size_t Hp = (H + 3) / 4 * 4, Wp = (W + 3) / 4 * 4;
  const auto hazy = ops::pad_bottom_right(Var<float>(img.reshaped({1, 3, H, W})), Hp, Wp);
  InferResult res;
  res.task = adapter.name();
  Var<float> result;
  if (sys.load_tasks() && sys.load_stage2()) {
    auto r = closed_loop_infer(sys, hazy, instruction, s.k_max);
    result = r.output;
    res.trace = r.trace;
    res.closed_loop = true;
  } else {
    warn << "warning: no stage-2 checkpoint in " << s.ckpt_dir << "; writing the open-loop result\n";
    NoGradGuard ng;
    result = sys.idn->forward(hazy);
    detail::require_finite(result, "dehazing");
  }
  io::write_image(output, ops::crop_top_left(result, H, W).value().reshaped({3, H, W}));
  const std::string trace_path = output + ".trace.csv";
  auto os = io::detail::open_out(trace_path);
  os << "iteration,task,mean_change,task_loss,psnr\n";
  for (const auto& e : res.trace)
    os << e.iteration << ',' << e.task << ',' << format_number(e.mean_change) << ',' << format_number(e.task_loss)
       << ',' << format_number(e.psnr) << '\n';
  if (res.trace.empty()) os << "0," << res.task << ",0,nan,nan\n";
  out << "task " << res.task << (res.closed_loop ? " (closed loop)" : " (open loop)") << " -> " << output << '\n';
  return res;
}

}  // namespace dehaze
