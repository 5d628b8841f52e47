#pragma once

// On-disk formats: tensor checkpoints, instruction-embedding tables, PNM/PNG images,
// 16-bit depth PGMs and the dataset manifest.

#include <png.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dehaze/haze_model.hpp"
#include "dehaze/tensor.hpp"

namespace dehaze::io {

namespace fs = std::filesystem;

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

inline constexpr std::array<char, 8> kCheckpointMagic{'L', 'L', 'C', 'K', 'P', 'T', '1', '\0'};
inline constexpr std::array<char, 7> kEmbeddingMagic{'L', 'L', 'E', 'M', 'B', '1', '\0'};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated file: " + path);
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(std::istream& is, const std::string& path) {
  return std::bit_cast<float>(get_u32(is, path));
}

inline void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, const std::string& path) {
  const auto n = get_u32(is, path);
  if (n > (1u << 20)) throw IoError("implausible string length in " + path);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw IoError("truncated file: " + path);
  return s;
}

inline std::ofstream open_out(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) {
    std::error_code ec;
    fs::create_directories(parent, ec);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  return is;
}

inline std::string lower_ext(const std::string& path) {
  auto e = fs::path(path).extension().string();
  for (auto& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return e;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Checkpoints: magic, u32 count, then per tensor name / rank / shape / f32 payload.

inline void write_checkpoint(const std::string& path, const NamedTensors& tensors) {
  auto os = detail::open_out(path);
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_string(os, name);
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : t.values()) detail::put_f32(os, v);
  }
  if (!os) throw IoError("write failed: " + path);
}

inline NamedTensors read_checkpoint(const std::string& path) {
  auto is = detail::open_in(path);
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic)
    throw IoError("not a checkpoint file: " + path);
  const auto count = detail::get_u32(is, path);
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = detail::get_string(is, path);
    const auto rank = detail::get_u32(is, path);
    if (rank > 8) throw IoError("implausible tensor rank in " + path);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_u32(is, path);
    Tensor<float> t(shape);
    for (auto& v : t.values()) v = detail::get_f32(is, path);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding tables: magic, then entries (instruction, u32 dim, f32 vector) until EOF.

inline void write_embeddings(const std::string& path, const std::map<std::string, std::vector<float>>& table) {
  auto os = detail::open_out(path);
  os.write(kEmbeddingMagic.data(), kEmbeddingMagic.size());
  for (const auto& [text, vec] : table) {
    detail::put_string(os, text);
    detail::put_u32(os, static_cast<std::uint32_t>(vec.size()));
    for (float v : vec) detail::put_f32(os, v);
  }
  if (!os) throw IoError("write failed: " + path);
}

inline std::map<std::string, std::vector<float>> read_embeddings(const std::string& path) {
  auto is = detail::open_in(path);
  std::array<char, 7> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kEmbeddingMagic)
    throw IoError("not an embedding file: " + path);
  std::map<std::string, std::vector<float>> table;
  while (is.peek() != std::char_traits<char>::eof()) {
    auto text = detail::get_string(is, path);
    const auto dim = detail::get_u32(is, path);
    if (dim == 0 || dim > (1u << 16)) throw IoError("implausible embedding dimension in " + path);
    std::vector<float> v(dim);
    for (auto& x : v) x = detail::get_f32(is, path);
    table.emplace(std::move(text), std::move(v));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Images. RGB tensors are 3 x H x W floats in [0,1].

namespace detail {

inline std::string pnm_token(std::istream& is, const std::string& path) {
  std::string tok;
  char c;
  while (is.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(c);
  }
  if (tok.empty()) throw IoError("malformed PNM header: " + path);
  return tok;
}

struct Pnm {
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  std::vector<std::uint16_t> samples;
};

inline Pnm read_pnm(const std::string& path) {
  auto is = open_in(path);
  Pnm p;
  p.magic = pnm_token(is, path);
  if (p.magic != "P5" && p.magic != "P6") throw IoError("unsupported PNM type " + p.magic + ": " + path);
  try {
    p.width = std::stoul(pnm_token(is, path));
    p.height = std::stoul(pnm_token(is, path));
    p.maxval = std::stoul(pnm_token(is, path));
  } catch (const std::logic_error&) {
    throw IoError("malformed PNM header: " + path);
  }
  if (p.maxval == 0 || p.maxval > 65535) throw IoError("bad PNM maxval: " + path);
  const std::size_t channels = p.magic == "P6" ? 3 : 1;
  const std::size_t n = p.width * p.height * channels;
  const std::size_t bps = p.maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(n * bps);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw IoError("truncated PNM data: " + path);
  p.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    p.samples[i] = bps == 2 ? static_cast<std::uint16_t>(raw[2 * i] << 8 | raw[2 * i + 1]) : raw[i];
  return p;
}

inline void write_pnm(const std::string& path, const char* magic, std::size_t w, std::size_t h,
                      std::size_t maxval, const std::vector<std::uint16_t>& samples) {
  auto os = open_out(path);
  os << magic << '\n' << w << ' ' << h << '\n' << maxval << '\n';
  const bool wide = maxval > 255;
  std::vector<unsigned char> raw;
  raw.reserve(samples.size() * (wide ? 2 : 1));
  for (auto s : samples) {
    if (wide) raw.push_back(static_cast<unsigned char>(s >> 8));
    raw.push_back(static_cast<unsigned char>(s & 0xFF));
  }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw IoError("write failed: " + path);
}

inline std::uint8_t to_u8(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace detail

inline Tensor<float> read_image(const std::string& path) {
  const auto ext = detail::lower_ext(path);
  if (ext == ".png") {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str()))
      throw IoError("cannot read PNG " + path + ": " + img.message);
    img.format = PNG_FORMAT_RGB;
    std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
      png_image_free(&img);
      throw IoError("cannot decode PNG " + path + ": " + img.message);
    }
    const std::size_t H = img.height, W = img.width;
    Tensor<float> t({3, H, W});
    for (std::size_t p = 0; p < H * W; ++p)
      for (std::size_t c = 0; c < 3; ++c) t[c * H * W + p] = buf[p * 3 + c] / 255.0f;
    return t;
  }
  const auto pnm = detail::read_pnm(path);
  if (pnm.magic != "P6") throw IoError("expected an RGB image (P6 or PNG): " + path);
  const std::size_t H = pnm.height, W = pnm.width;
  Tensor<float> t({3, H, W});
  for (std::size_t p = 0; p < H * W; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      t[c * H * W + p] = static_cast<float>(pnm.samples[p * 3 + c]) / static_cast<float>(pnm.maxval);
  return t;
}

/// 8-bit output; format from the extension (.png, else binary PPM).
inline void write_image(const std::string& path, const Tensor<float>& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw InputError("write_image expects 3 x H x W");
  const std::size_t H = img.dim(1), W = img.dim(2);
  if (detail::lower_ext(path) == ".png") {
    std::vector<unsigned char> buf(H * W * 3);
    for (std::size_t p = 0; p < H * W; ++p)
      for (std::size_t c = 0; c < 3; ++c) buf[p * 3 + c] = detail::to_u8(img[c * H * W + p]);
    png_image pimg;
    std::memset(&pimg, 0, sizeof pimg);
    pimg.version = PNG_IMAGE_VERSION;
    pimg.width = static_cast<png_uint_32>(W);
    pimg.height = static_cast<png_uint_32>(H);
    pimg.format = PNG_FORMAT_RGB;
    const auto parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    if (!png_image_write_to_file(&pimg, path.c_str(), 0, buf.data(), 0, nullptr))
      throw IoError("cannot write PNG " + path + ": " + pimg.message);
    return;
  }
  std::vector<std::uint16_t> samples(H * W * 3);
  for (std::size_t p = 0; p < H * W; ++p)
    for (std::size_t c = 0; c < 3; ++c) samples[p * 3 + c] = detail::to_u8(img[c * H * W + p]);
  detail::write_pnm(path, "P6", W, H, 255, samples);
}

/// Decode-quantize to the 8-bit grid, as a round trip through write_image would.
inline Tensor<float> quantize8(const Tensor<float>& img) {
  Tensor<float> q(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) q[i] = detail::to_u8(img[i]) / 255.0f;
  return q;
}

/// Depth as a 16-bit PGM storing millimetres.
inline void write_depth(const std::string& path, const DepthMap<float>& depth) {
  const auto& v = depth.values();
  std::vector<std::uint16_t> samples(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    samples[i] = static_cast<std::uint16_t>(std::clamp(std::lround(v[i] * 1000.0), 1L, 65535L));
  detail::write_pnm(path, "P5", depth.width(), depth.height(), 65535, samples);
}

inline DepthMap<float> read_depth(const std::string& path) {
  const auto pnm = detail::read_pnm(path);
  if (pnm.magic != "P5" || pnm.maxval <= 255) throw IoError("expected a 16-bit PGM depth map: " + path);
  Tensor<float> t({pnm.height, pnm.width});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(pnm.samples[i]) / 1000.0f;
  try {
    return DepthMap<float>(std::move(t));
  } catch (const InputError& e) {
    throw IoError(std::string("invalid depth map ") + path + ": " + e.what());
  }
}

/// Binary label mask as an 8-bit PGM (0 / 255).
inline void write_mask(const std::string& path, const std::vector<int>& labels, std::size_t H, std::size_t W) {
  std::vector<std::uint16_t> samples(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) samples[i] = labels[i] ? 255 : 0;
  detail::write_pnm(path, "P5", W, H, 255, samples);
}

// ---------------------------------------------------------------------------
// Manifest: one `clear_path<TAB>depth_path` per line, relative paths resolved
// against the manifest's directory.

struct ManifestEntry {
  std::string clear_path;
  std::string depth_path;
};

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  auto is = detail::open_in(path);
  const auto base = fs::path(path).parent_path();
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
      throw IoError(path + ":" + std::to_string(lineno) + ": expected clear_path<TAB>depth_path");
    auto resolve = [&](std::string p) {
      fs::path fp(p);
      return fp.is_absolute() ? p : (base / fp).string();
    };
    out.push_back({resolve(line.substr(0, tab)), resolve(line.substr(tab + 1))});
  }
  return out;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  auto os = detail::open_out(path);
  for (const auto& e : entries) os << e.clear_path << '\t' << e.depth_path << '\n';
  if (!os) throw IoError("write failed: " + path);
}

/// Bounding boxes `x,y,w,h` in pixels, one per line.
struct Box {
  double x = 0, y = 0, w = 0, h = 0;
  double score = 1.0;
};

inline void write_boxes(const std::string& path, const std::vector<Box>& boxes) {
  auto os = detail::open_out(path);
  for (const auto& b : boxes) os << b.x << ',' << b.y << ',' << b.w << ',' << b.h << '\n';
  if (!os) throw IoError("write failed: " + path);
}

inline std::vector<Box> read_boxes(const std::string& path) {
  auto is = detail::open_in(path);
  std::vector<Box> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    Box b;
    if (!(ls >> b.x >> b.y >> b.w >> b.h)) throw IoError("malformed box line in " + path + ": " + line);
    out.push_back(b);
  }
  return out;
}

}  // namespace dehaze::io
