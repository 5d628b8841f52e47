// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance            all criteria
//   acceptance 4 6 10     a subset (criteria 5-7 and 10 share the training run of 4)

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "dehaze/pipeline.hpp"
#include "gradcheck.hpp"

using namespace dehaze;
using testutil::gradcheck;
using testutil::project;
using testutil::random_tensor;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail) {
  std::printf("%s %2d %s: %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dehaze_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// ---------------------------------------------------------------------------

void haze_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  double worst = 0, t_least = 1;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t H = 4 + static_cast<std::size_t>(rng.uniform_int(0, 12));
    const std::size_t W = 4 + static_cast<std::size_t>(rng.uniform_int(0, 12));
    Tensor<float> j({3, H, W}), d({H, W});
    for (auto& v : j.values()) v = static_cast<float>(rng.uniform());
    HazeParams p;
    p.beta = rng.uniform(0.0, 1.6);
    for (auto& a : p.airlight) a = rng.uniform(0.7, 1.0);
    // Depth bounded so that t = exp(-beta d) >= 0.05.
    const double d_max = p.beta > 0 ? std::min(5.0, -std::log(0.05) / p.beta) : 5.0;
    for (auto& v : d.values()) v = static_cast<float>(rng.uniform(0.05, d_max));
    DepthMap<float> depth(d);
    const auto tm = transmission(depth, p.beta);
    for (float t : tm.values.values()) t_least = std::min<double>(t_least, t);
    const auto back = invert_haze(synthesize_haze(j, depth, p), depth, p);
    worst = std::max<double>(worst, back.max_abs_diff(j));
  }
  const double secs = seconds_since(t0);
  report(1, "haze oracle", worst <= 1e-5 && t_least >= 0.05 && secs < 10,
         fmt("max |invert(synthesize(J)) - J| = %.3g over 100 cases, min t = %.4f, %.2f s", worst, t_least, secs));
}

// ---------------------------------------------------------------------------

struct GradSuite {
  double worst = 0;
  std::string worst_name;
  std::size_t checks = 0;
  void add(const std::string& name, double err) {
    ++checks;
    if (err > worst || worst_name.empty()) {
      worst = std::max(worst, err);
      worst_name = name;
    }
    if (err > 1e-3) std::printf("     gradient check %s: rel error %.3g\n", name.c_str(), err);
  }
};

template <class Store>
void randomize(Store& store, Rng& rng, std::initializer_list<const char*> parts, double r) {
  for (const auto& [name, p] : store.entries()) {
    bool hit = false;
    for (const char* s : parts) hit |= name.find(s) != std::string::npos;
    if (!hit) continue;
    auto v = p;
    for (auto& x : v.mutable_value().values()) x = rng.uniform(-r, r);
  }
}

std::vector<Var<double>> join(std::vector<Var<double>> a, std::initializer_list<Var<double>> b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

void gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  GradSuite g;
  Rng rng(202);
  auto leaf = [&](Shape s, double lo = -1, double hi = 1) { return Var<double>(random_tensor(std::move(s), rng, lo, hi), true); };

  {
    nn::ParamStore<double> store;
    TransformerBlock<double> block(store, "blk", 4, 2, rng);
    auto x = leaf({1, 4, 5, 4});
    g.add("transformer block", gradcheck([&] { return project(block(x)); }, join(store.vars(), {x})).rel_error);
  }
  {
    nn::ParamStore<double> store;
    FeatureFusion<double> ffm(store, "ffm", 8, rng);
    auto a = leaf({1, 8, 4, 4}), b = leaf({1, 8, 4, 4}), m = leaf({1, 8, 4, 4});
    g.add("ffm", gradcheck([&] { return project(ffm(a, b, m)); }, join(store.vars(), {a, b, m})).rel_error);
  }
  {
    Idn<double> idn(IdnConfig{{4, 8, 8}, 2}, Rng(203));
    auto x = Var<double>(random_tensor({1, 3, 8, 8}, rng, 0.3, 0.7));
    // Small residual keeps every output pixel away from the clamp kink.
    for (auto& w : idn.params().find("idn.head.weight").mutable_value().values()) w *= 0.02;
    for (const auto& [name, p] : idn.params().entries())
      g.add(name, gradcheck([&] { return project(idn.forward(x)); }, {p}, 6).rel_error);
  }
  {
    Tfga<double> tfga(TfgaConfig{4, 2, 1, 3}, Rng(204));
    randomize(tfga.params(), rng, {"weights.", "inject"}, 0.3);
    auto params = tfga.params().vars();
    auto img = leaf({1, 3, 8, 8}, 0, 1), f_id = leaf({1, 4, 2, 2}), f_down = leaf({1, 4, 2, 2});
    g.add("tfga image adapter", gradcheck([&] { return project(tfga.feature_adapt_image(img)); }, join(params, {img})).rel_error);
    TaskFeedback<double> seg{FeedbackKind::SegLogits, leaf({1, 2, 8, 8})};
    g.add("tfga feedback adapter",
          gradcheck([&] { return project(tfga.feature_adapt_feedback(seg, 2, 2)); }, join(params, {seg.payload})).rel_error);
    g.add("tfga cross attention", gradcheck([&] {
            auto o = tfga.bidirectional_cross_attention(f_id, f_down);
            return ops::add(ops::add(project(o.id_to_c, 1), project(o.c_to_id, 2)),
                            ops::add(project(o.down_to_c, 3), project(o.c_to_down, 4)));
          }, join(params, {f_id, f_down})).rel_error);
    g.add("tfga cffb", gradcheck([&] { return project(tfga.cffb(0)(f_id)); }, join(params, {f_id})).rel_error);
    g.add("tfga weight generation",
          gradcheck([&] { return project(tfga.weight_generation(f_id).q_id); }, join(params, {f_id})).rel_error);
    g.add("tfga fuse", gradcheck([&] { return project(tfga.fuse(f_id, f_down)); }, join(params, {f_id, f_down})).rel_error);
    TaskFeedback<double> det{FeedbackKind::BackboneFeatures, Var<double>(random_tensor({1, 3, 2, 2}, rng))};
    g.add("tfga full", gradcheck([&] { return project(tfga(img, det, f_id)); }, join(params, {img, f_id})).rel_error);
  }
  {
    nn::ParamStore<double> store;
    IgmSite<double> site(store, "s", 4, 6, 8, rng);
    randomize(store, rng, {".wgb.fc2", ".cffb.conv"}, 0.4);
    auto params = store.vars();
    auto f = leaf({2, 4, 4, 4}), t = leaf({2, 6});
    g.add("igm text adapter", gradcheck([&] { return project(site.text_adapter(t)); }, join(params, {t})).rel_error);
    g.add("igm image refine", gradcheck([&] { return project(site.image_feature_refine(f)); }, join(params, {f})).rel_error);
    g.add("igm weights", gradcheck([&] { return project(site.modulation_weights(f, t)); }, join(params, {f, t})).rel_error);
    g.add("igm site", gradcheck([&] { return project(site(f, t)); }, join(params, {f, t})).rel_error);
  }
  {
    auto ext = PerceptualExtractor<double>::toy({4, 6, 8}, {0.25, 0.5, 1.0});
    auto pred = leaf({2, 3, 8, 8}, 0, 1);
    Var<double> clear(random_tensor({2, 3, 8, 8}, rng, 0, 1)), hazy(random_tensor({2, 3, 8, 8}, rng, 0, 1));
    const std::vector<double> lp{0.2, 0.5}, lh{0.3, 0.9};
    g.add("l1", gradcheck([&] { return l1_loss(pred, clear); }, {pred}).rel_error);
    g.add("contrastive ratio", gradcheck([&] { return contrastive_ratio(clear, pred, hazy, ext); }, {pred}).rel_error);
    g.add("predeh", gradcheck([&] { return predeh_loss(pred, clear, hazy, ext, 0.1); }, {pred}).rel_error);
    g.add("mcr", gradcheck([&] { return mcr_loss_batch(pred, clear.value(), lp, lh, 0.1, 0.3); }, {pred}).rel_error);
    g.add("total", gradcheck([&] {
            auto d = dehaze_loss(pred, clear, hazy, ext, 0.1);
            auto m = mcr_loss_batch(pred, clear.value(), lp, lh, 0.1, 0.3);
            return total_loss(d, m, std::optional<Var<double>>(ops::mean(ops::mul(pred, pred))), 0.01);
          }, {pred}).rel_error);
  }
  {
    auto reg = TaskRegistry<double>::toy(Rng(205));
    Rng srng(206);
    std::vector<SceneTruth> scenes{make_scene(8, srng)};
    std::vector<const SceneTruth*> ptrs{&scenes[0]};
    Var<double> img(scenes[0].clear.cast<double>().reshaped({1, 3, 8, 8}), true);
    for (const auto& e : reg.entries()) {
      auto& a = *e.adapter;
      const auto target = a.target(ptrs);
      g.add("task " + a.name(), gradcheck([&] { return a.loss(a.run(img), target); }, join(a.params().vars(), {img}), 12).rel_error);
    }
  }
  const double secs = seconds_since(t0);
  report(2, "gradient suite", g.worst <= 1e-3 && secs < 300,
         fmt("%zu checks, worst rel error %.3g (%s), %.1f s", g.checks, g.worst, g.worst_name.c_str(), secs));
}

// ---------------------------------------------------------------------------

void identity_at_init() {
  Config c;
  c.set("train.seed", "303");
  System<float> sys(Settings::from(c));
  Rng rng(304);
  std::size_t same = 0, total = 0;
  for (int i = 0; i < 20; ++i) {
    auto hazy = Var<float>(random_tensor({1, 3, 32, 32}, rng, 0, 1).cast<float>());
    const auto open = sys.idn->forward(hazy).value();
    for (const auto& e : sys.tasks->entries()) {
      same += closed_loop_infer(sys, hazy, e.canonical_instruction, 1).output.value() == open;
      ++total;
    }
  }
  report(3, "identity at init", same == total, fmt("%zu/%zu closed-loop outputs bit-identical to open loop", same, total));
}

// ---------------------------------------------------------------------------

void tfga_weights_sum_to_one() {
  Tfga<double> tfga(TfgaConfig{}, Rng(801));
  Rng rng(802);
  // The weight heads start at zero (Q = 1/2 everywhere); move them off zero first.
  randomize(tfga.params(), rng, {"weights."}, 0.5);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t s = 1 + static_cast<std::size_t>(rng.uniform_int(0, 4));
    auto q = tfga.weight_generation(Var<double>(random_tensor({1, tfga.config().channels, s, s}, rng, -3, 3)));
    for (std::size_t i = 0; i < q.q_id.size(); ++i)
      worst = std::max(worst, std::abs(q.q_id.value()[i] + q.q_down.value()[i] - 1.0));
  }
  report(8, "tfga weights sum to one", worst <= 1e-6, fmt("max |Q_id + Q_down - 1| = %.3g over 1000 inputs", worst));
}

// ---------------------------------------------------------------------------

void metric_hand_cases() {
  Tensor<double> a({3, 8, 8}, 0.3), b({3, 8, 8}, 0.4);
  const double p = metrics::psnr(a, b);
  const double m = miou({0, 1, 1, 1}, {0, 0, 1, 1}, 2);
  const std::vector<double> gt{1, 2}, pred{1.1, 1.8};
  const double absrel = depth_metrics<double>(pred, gt).at("absrel");
  const double mcr_hi = mcr_loss(0.5, 0.3, 0.4, 0.1, 0.3);
  const double mcr_lo = mcr_loss(0.1, 0.3, 0.5, 0.1, 0.3);
  const bool pass = std::abs(p - 20) <= 1e-6 && std::abs(m - 7.0 / 12.0) <= 1e-6 && std::abs(absrel - 0.1) <= 1e-6 &&
                    mcr_hi == 0.7 && mcr_lo == 0.0;
  report(9, "metric hand cases", pass,
         fmt("psnr %.9f dB, miou %.9f (7/12), absrel %.9f, mcr %.15g and %.15g", p, m, absrel, mcr_hi, mcr_lo));
}

// ---------------------------------------------------------------------------

struct Benchmark {
  Settings base;
  Dataset train, held;
  fs::path dir;
};

Benchmark make_benchmark() {
  Benchmark b;
  b.dir = scratch("bench");
  Config c;
  c.set("data.out_dir", b.dir.string());
  c.set("train.seed", "1");
  c.set("train.lr", "1e-4");
  c.set("train.epochs", "30");
  b.base = Settings::from(c);
  for (std::size_t i = 0; i < 200; ++i) b.train.push_back(procedural_sample(b.base, i));
  for (std::size_t i = 0; i < 50; ++i) b.held.push_back(procedural_sample(b.base, 10000 + i));
  return b;
}

void stage1_trend(const Benchmark& b) {
  const auto t0 = std::chrono::steady_clock::now();
  System<float> sys(b.base);
  train_stage1(sys, b.train, [&](const EpochLog& e) {
    std::printf("     stage 1 epoch %ld: l1 %.4f total %.4f (%.0f s)\n", e.epoch, e.l1, e.total, seconds_since(t0));
    std::fflush(stdout);
  });
  const double secs = seconds_since(t0);
  sys.save_idn();
  const auto r = evaluate(sys, b.held, false, false);
  const auto p = r.column("psnr"), h = r.column("hazy_psnr");
  std::size_t wins = 0;
  for (std::size_t i = 0; i < p.size(); ++i) wins += p[i] > h[i];
  const double gain = r.mean("psnr") - r.mean("hazy_psnr");
  report(4, "stage-1 trend", wins >= 45 && gain >= 3 && secs <= 1800,
         fmt("%zu/50 held-out wins, mean PSNR %.2f vs hazy %.2f (gain %+.2f dB), trained in %.0f s", wins, r.mean("psnr"),
             r.mean("hazy_psnr"), gain, secs));
}

struct Stage2Run {
  Report report;
  double mean_total = 0;
};

Stage2Run stage2_variant(const Benchmark& b, bool use_igm, bool use_tfga, bool check_freeze) {
  Settings s = b.base;
  s.use_igm = use_igm;
  s.use_tfga = use_tfga;
  s.epochs = 20;
  System<float> sys(s);
  sys.load_idn();
  if (!sys.load_tasks()) {
    fit_task_heads(sys, b.train);
    sys.save_tasks();
  }
  const auto before = param_hash(sys.idn->params(), "idn.");
  const auto ckpt_before = slurp(sys.path("idn.ckpt"));
  const auto t0 = std::chrono::steady_clock::now();
  train_stage2(sys, b.train, [&](const EpochLog& e) {
    std::printf("     stage 2 (igm %d, tfga %d) epoch %ld: l1 %.4f mcr %.4f down %.4f total %.4f (%.0f s)\n", use_igm,
                use_tfga, e.epoch, e.l1, e.mcr, e.down, e.total, seconds_since(t0));
    std::fflush(stdout);
  });
  if (check_freeze) {
    const auto after = param_hash(sys.idn->params(), "idn.");
    sys.save_idn();
    const bool same_file = slurp(sys.path("idn.ckpt")) == ckpt_before;
    report(5, "stage-2 freeze", before == after && same_file,
           fmt("idn.* hash %016llx before, %016llx after; checkpoint bytes %s", static_cast<unsigned long long>(before),
               static_cast<unsigned long long>(after), same_file ? "identical" : "differ"));
  }
  Stage2Run out;
  out.report = evaluate(sys, b.held, true, true);
  for (const auto& e : sys.tasks->entries()) out.mean_total += out.report.mean("cl_" + e.adapter->name() + "_total");
  out.mean_total /= static_cast<double>(sys.tasks->size());
  return out;
}

void ordering(const Report& r) {
  bool pass = true;
  std::string detail;
  for (const char* task : {"seg", "depth", "det"}) {
    const double f = r.mean(std::string("cl_") + task + "_ordered");
    pass &= f >= 0.9;
    detail += fmt("%s %.2f  ", task, f);
  }
  report(6, "l_w < l_p < l_h ordering", pass, "held-out fraction per instruction: " + detail);
}

void closed_loop_gain(const Report& r) {
  bool pass = true;
  std::string detail;
  for (const char* task : {"seg", "depth", "det"}) {
    const double open = r.mean(std::string(task) + "_loss"), closed = r.mean(std::string("cl_") + task + "_loss");
    pass &= closed <= open;
    detail += fmt("%s loss %.4f -> %.4f, ", task, open, closed);
  }
  const double dm = r.mean("cl_seg_miou") - r.mean("seg_miou");
  pass &= dm >= 0.01;
  report(7, "closed-loop gain", pass, detail + fmt("seg mIoU %.4f -> %.4f (%+.4f)", r.mean("seg_miou"), r.mean("cl_seg_miou"), dm));
}

void trained_criteria(const std::set<int>& want) {
  auto b = make_benchmark();
  stage1_trend(b);
  if (!(want.count(5) || want.count(6) || want.count(7) || want.count(10))) return;
  const auto full = stage2_variant(b, true, true, true);
  ordering(full.report);
  closed_loop_gain(full.report);
  write_report((b.dir / "full.csv").string(), full.report);
  if (!want.count(10)) return;
  const auto no_igm = stage2_variant(b, false, true, false);
  const auto no_tfga = stage2_variant(b, true, false, false);
  report(10, "ablations", full.mean_total <= no_igm.mean_total && full.mean_total <= no_tfga.mean_total,
         fmt("held-out l_total: full %.5f, without IGM %.5f, without TFGA %.5f", full.mean_total, no_igm.mean_total,
             no_tfga.mean_total));
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> end_to_end(const fs::path& dir) {
  Config c;
  c.set("data.out_dir", dir.string());
  c.set("model.channels", "4,8,8");
  c.set("synth.count", "6");
  c.set("synth.size", "16");
  c.set("train.batch", "3");
  c.set("train.epochs", "2");
  c.set("train.task_epochs", "2");
  c.set("train.seed", "1101");
  std::ostringstream sink;
  run_synth(Settings::from(c), sink);
  run_train(Settings::from(c), sink);
  c.set("train.stage", "2");
  run_train(Settings::from(c), sink);
  run_eval(Settings::from(c), sink);
  std::map<std::string, std::string> files;
  for (const char* f : {"idn.ckpt", "tasks.ckpt", "stage2.ckpt", "report.csv", "stage1_log.csv", "stage2_log.csv", "meta.tsv"})
    files[f] = slurp(dir / f);
  return files;
}

void determinism() {
  const auto a = end_to_end(scratch("run_a")), b = end_to_end(scratch("run_b"));
  std::string differ;
  bool empty = false;
  for (const auto& [name, bytes] : a) {
    empty |= bytes.empty();
    if (b.at(name) != bytes) differ += " " + name;
  }
  report(11, "determinism", differ.empty() && !empty,
         differ.empty() ? fmt("%zu artifacts byte-identical across two runs", a.size()) : "differ:" + differ);
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> want;
  for (int i = 1; i < argc; ++i) want.insert(std::atoi(argv[i]));
  if (want.empty())
    for (int i = 1; i <= 11; ++i) want.insert(i);
  try {
    if (want.count(1)) haze_oracle();
    if (want.count(2)) gradient_suite();
    if (want.count(3)) identity_at_init();
    if (want.count(8)) tfga_weights_sum_to_one();
    if (want.count(9)) metric_hand_cases();
    if (want.count(11)) determinism();
    if (want.count(4) || want.count(5) || want.count(6) || want.count(7) || want.count(10)) trained_criteria(want);
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%d criteria failed\n", failures);
  return failures ? 1 : 0;
}
