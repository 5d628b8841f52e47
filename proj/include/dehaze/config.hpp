#pragma once

// Flat `key = value` configuration with documented defaults, plus the typed view the
// pipeline consumes.

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dehaze/tensor.hpp"

namespace dehaze {

class Config {
 public:
  struct Key {
    const char* name;
    const char* fallback;  // empty: derived from other keys
    const char* help;
  };

  static const std::vector<Key>& keys() {
    static const std::vector<Key> k{
        {"data.manifest", "", "dataset manifest (default <data.out_dir>/manifest.tsv)"},
        {"data.out_dir", "run", "output directory for synth data, reports and default checkpoints"},
        {"haze.beta_min", "0.4", "scattering coefficient lower bound"},
        {"haze.beta_max", "1.6", "scattering coefficient upper bound"},
        {"haze.A_min", "0.7", "airlight lower bound per channel"},
        {"haze.A_max", "1.0", "airlight upper bound per channel"},
        {"model.channels", "16,32,64", "IDN channels per scale"},
        {"model.heads", "2", "attention heads per transformer block"},
        {"train.stage", "1", "1: IDN, 2: TFGA + IGM on the frozen IDN"},
        {"train.epochs", "", "epochs (default 300 for stage 1, 100 for stage 2)"},
        {"train.lr", "1e-4", "initial learning rate, cosine annealed to zero"},
        {"train.batch", "8", "batch size"},
        {"train.seed", "0", "root seed for every random draw"},
        {"train.flip", "1", "random horizontal flips"},
        {"train.crop", "0", "random square crop size, 0 disables"},
        {"train.task_epochs", "20", "epochs for fitting the toy task heads on clear images"},
        {"train.task_lr", "1e-2", "learning rate for the toy task heads"},
        {"loss.lambda", "0.1", "contrastive ratio weight"},
        {"loss.beta1", "0.1", "ranking margin against the initial result"},
        {"loss.beta2", "0.3", "ranking margin against the hazy input"},
        {"loss.gamma", "0.01", "downstream task loss weight"},
        {"perceptual.kind", "toy", "toy | file"},
        {"perceptual.file", "", "extractor weights (checkpoint format) for perceptual.kind=file"},
        {"text.kind", "toy", "toy | file"},
        {"text.file", "", "instruction embedding file for text.kind=file"},
        {"loop.k_max", "1", "closed-loop iterations"},
        {"loop.use_tfga", "1", "enable the task feedback branch"},
        {"loop.use_igm", "1", "enable the instruction branch"},
        {"synth.count", "200", "procedural scenes to generate"},
        {"synth.size", "32", "scene side length in pixels"},
        {"synth.offset", "0", "scene index offset (disjoint held-out sets)"},
        {"ckpt.dir", "", "checkpoint directory (default <data.out_dir>)"},
        {"eval.report", "", "report path (default <data.out_dir>/report.csv)"},
    };
    return k;
  }

  static bool known(const std::string& key) {
    const auto& k = keys();
    return std::any_of(k.begin(), k.end(), [&](const Key& x) { return key == x.name; });
  }

  Config() = default;

  static Config from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path);
    Config c;
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
      ++n;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(path + ":" + std::to_string(n) + ": expected key = value");
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw ConfigError("unknown config key: " + key);
    values_[key] = value;
  }

  /// `key=value` form used by command-line overrides.
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got " + assignment);
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key) const {
    if (!known(key)) throw ConfigError("unknown config key: " + key);
    if (auto it = values_.find(key); it != values_.end()) return it->second;
    if (key == "data.manifest") return get("data.out_dir") + "/manifest.tsv";
    if (key == "ckpt.dir") return get("data.out_dir");
    if (key == "eval.report") return get("data.out_dir") + "/report.csv";
    if (key == "train.epochs") return integer("train.stage") == 1 ? "300" : "100";
    for (const auto& k : keys())
      if (key == k.name) return k.fallback;
    return {};
  }

  double number(const std::string& key) const {
    const auto s = get(key);
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": not a number: '" + s + "'");
    return v;
  }

  long integer(const std::string& key) const {
    const auto s = get(key);
    long v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": not an integer: '" + s + "'");
    return v;
  }

  bool flag(const std::string& key) const {
    const auto s = get(key);
    if (s == "1" || s == "true" || s == "on") return true;
    if (s == "0" || s == "false" || s == "off") return false;
    throw ConfigError(key + ": expected 0/1, got '" + s + "'");
  }

  /// Every key with defaults applied, one `key = value` per line.
  std::string resolved() const {
    std::ostringstream os;
    for (const auto& k : keys()) os << k.name << " = " << get(k.name) << '\n';
    return os.str();
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

 private:
  std::map<std::string, std::string> values_;
};

/// Typed, validated view of a Config.
struct Settings {
  std::string manifest, out_dir, ckpt_dir, report;
  double beta_min, beta_max, a_min, a_max;
  std::array<std::size_t, 3> channels;
  std::size_t heads;
  int stage;
  long epochs;
  double lr;
  std::size_t batch;
  std::uint64_t seed;
  bool flip;
  std::size_t crop;
  long task_epochs;
  double task_lr;
  double lambda, beta1, beta2, gamma;
  std::string perceptual_kind, perceptual_file, text_kind, text_file;
  long k_max;
  bool use_tfga, use_igm;
  std::size_t synth_count, synth_size, synth_offset;

  static Settings from(const Config& c) {
    Settings s;
    s.manifest = c.get("data.manifest");
    s.out_dir = c.get("data.out_dir");
    s.ckpt_dir = c.get("ckpt.dir");
    s.report = c.get("eval.report");
    s.beta_min = c.number("haze.beta_min");
    s.beta_max = c.number("haze.beta_max");
    s.a_min = c.number("haze.A_min");
    s.a_max = c.number("haze.A_max");
    s.channels = parse_channels(c.get("model.channels"));
    s.heads = positive(c, "model.heads");
    s.stage = static_cast<int>(c.integer("train.stage"));
    s.epochs = c.integer("train.epochs");
    s.lr = c.number("train.lr");
    s.batch = positive(c, "train.batch");
    const long seed = c.integer("train.seed");
    if (seed < 0) throw ConfigError("train.seed must be >= 0");
    s.seed = static_cast<std::uint64_t>(seed);
    s.flip = c.flag("train.flip");
    const long crop = c.integer("train.crop");
    if (crop < 0 || crop % 4) throw ConfigError("train.crop must be 0 or a positive multiple of 4");
    s.crop = static_cast<std::size_t>(crop);
    s.task_epochs = c.integer("train.task_epochs");
    s.task_lr = c.number("train.task_lr");
    s.lambda = c.number("loss.lambda");
    s.beta1 = c.number("loss.beta1");
    s.beta2 = c.number("loss.beta2");
    s.gamma = c.number("loss.gamma");
    s.perceptual_kind = c.get("perceptual.kind");
    s.perceptual_file = c.get("perceptual.file");
    s.text_kind = c.get("text.kind");
    s.text_file = c.get("text.file");
    s.k_max = c.integer("loop.k_max");
    s.use_tfga = c.flag("loop.use_tfga");
    s.use_igm = c.flag("loop.use_igm");
    s.synth_count = positive(c, "synth.count");
    s.synth_size = positive(c, "synth.size");
    const long off = c.integer("synth.offset");
    if (off < 0) throw ConfigError("synth.offset must be >= 0");
    s.synth_offset = static_cast<std::size_t>(off);
    s.validate();
    return s;
  }

  void validate() const {
    if (!(beta_min >= 0 && beta_min <= beta_max)) throw ConfigError("need 0 <= haze.beta_min <= haze.beta_max");
    if (!(a_min >= 0 && a_min <= a_max && a_max <= 1)) throw ConfigError("need 0 <= haze.A_min <= haze.A_max <= 1");
    if (stage != 1 && stage != 2) throw ConfigError("train.stage must be 1 or 2");
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (task_epochs < 0) throw ConfigError("train.task_epochs must be >= 0");
    if (!(lr > 0) || !(task_lr > 0)) throw ConfigError("learning rates must be positive");
    if (!(lambda >= 0)) throw ConfigError("loss.lambda must be >= 0");
    if (!(gamma >= 0)) throw ConfigError("loss.gamma must be >= 0");
    if (!(beta1 >= 0 && beta1 < beta2)) throw ConfigError("need 0 <= loss.beta1 < loss.beta2");
    if (perceptual_kind != "toy" && perceptual_kind != "file") throw ConfigError("perceptual.kind must be toy or file");
    if (perceptual_kind == "file" && perceptual_file.empty()) throw ConfigError("perceptual.kind=file needs perceptual.file");
    if (text_kind != "toy" && text_kind != "file") throw ConfigError("text.kind must be toy or file");
    if (text_kind == "file" && text_file.empty()) throw ConfigError("text.kind=file needs text.file");
    if (k_max < 1) throw ConfigError("loop.k_max must be >= 1");
    if (synth_size < 8 || synth_size % 4) throw ConfigError("synth.size must be a multiple of 4 and at least 8");
    if (channels[2] % 2) throw ConfigError("model.channels: deepest scale must be even");
  }

 private:
  static std::size_t positive(const Config& c, const std::string& key) {
    const long v = c.integer(key);
    if (v < 1) throw ConfigError(key + " must be >= 1");
    return static_cast<std::size_t>(v);
  }

  static std::array<std::size_t, 3> parse_channels(const std::string& s) {
    std::array<std::size_t, 3> out{};
    std::stringstream ss(s);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',')) {
      if (i >= 3) throw ConfigError("model.channels needs exactly three values");
      item = Config::trim(item);
      long v = 0;
      auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (ec != std::errc() || p != item.data() + item.size() || v < 1)
        throw ConfigError("model.channels: bad value '" + item + "'");
      out[i++] = static_cast<std::size_t>(v);
    }
    if (i != 3) throw ConfigError("model.channels needs exactly three values");
    return out;
  }
};

}  // namespace dehaze
