#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dehaze/checkpoint.hpp"
#include "dehaze/nn.hpp"
#include "dehaze/synthetic.hpp"

using namespace dehaze;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("dehaze_io_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& n) const { return (path / n).string(); }
};

}  // namespace

TEST(Checkpoint, RoundTripBitExact) {
  TempDir d;
  Rng rng(1);
  Tensor<float> a({2, 3}), b({4});
  for (auto& v : a.values()) v = static_cast<float>(rng.normal());
  for (auto& v : b.values()) v = static_cast<float>(rng.normal());
  io::write_checkpoint(d / "x.ckpt", {{"a", a}, {"b.c", b}});
  auto r = io::read_checkpoint(d / "x.ckpt");
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].first, "a");
  EXPECT_EQ(r[0].second, a);
  EXPECT_EQ(r[1].first, "b.c");
  EXPECT_EQ(r[1].second, b);
}

TEST(Checkpoint, CorruptAndMissingFiles) {
  TempDir d;
  EXPECT_THROW(io::read_checkpoint(d / "missing.ckpt"), IoError);
  std::ofstream(d / "junk.ckpt") << "not a checkpoint";
  EXPECT_THROW(io::read_checkpoint(d / "junk.ckpt"), IoError);
  io::write_checkpoint(d / "t.ckpt", {{"a", Tensor<float>({64}, 1.0f)}});
  fs::resize_file(d / "t.ckpt", fs::file_size(d / "t.ckpt") - 8);
  EXPECT_THROW(io::read_checkpoint(d / "t.ckpt"), IoError);
}

TEST(Checkpoint, ParamStoreImportExport) {
  TempDir d;
  nn::ParamStore<float> s1, s2;
  Rng r1(2), r2(3);
  nn::Conv2d<float> c1(s1, "m.c", 3, 4, 3, 1, r1);
  nn::Conv2d<float> c2(s2, "m.c", 3, 4, 3, 1, r2);
  EXPECT_NE(param_hash(s1, "m."), param_hash(s2, "m."));
  io::write_checkpoint(d / "m.ckpt", export_params(s1));
  import_params(s2, io::read_checkpoint(d / "m.ckpt"));
  EXPECT_EQ(param_hash(s1, "m."), param_hash(s2, "m."));
  nn::ParamStore<float> s3;
  nn::Conv2d<float> c3(s3, "m.c", 3, 8, 3, 1, r1);
  EXPECT_THROW(import_params(s3, export_params(s1)), IoError);
  nn::ParamStore<float> s4;
  nn::Conv2d<float> c4(s4, "other", 3, 4, 3, 1, r1);
  EXPECT_THROW(import_params(s4, export_params(s1)), IoError);
}

TEST(Embeddings, RoundTrip) {
  TempDir d;
  std::map<std::string, std::vector<float>> t{{"estimate depth", {0.f, 0.6f, 0.8f}}, {"segment", {1.f, 0.f, 0.f}}};
  io::write_embeddings(d / "e.bin", t);
  EXPECT_EQ(io::read_embeddings(d / "e.bin"), t);
  std::ofstream(d / "bad.bin") << "xx";
  EXPECT_THROW(io::read_embeddings(d / "bad.bin"), IoError);
}

TEST(Images, PngAndPpmRoundTripOnTheEightBitGrid) {
  TempDir d;
  Rng rng(4);
  Tensor<float> img({3, 5, 7});
  for (auto& v : img.values()) v = static_cast<float>(rng.uniform());
  const auto q = io::quantize8(img);
  for (const char* name : {"a.png", "a.ppm", "sub/dir/a.png"}) {
    io::write_image(d / name, img);
    auto r = io::read_image(d / name);
    EXPECT_EQ(r.shape(), img.shape()) << name;
    EXPECT_EQ(r, q) << name;
    EXPECT_LE(r.max_abs_diff(img), 0.5 / 255 + 1e-6);
  }
  EXPECT_THROW(io::read_image(d / "none.png"), IoError);
  std::ofstream(d / "bad.png") << "garbage";
  EXPECT_THROW(io::read_image(d / "bad.png"), IoError);
  EXPECT_THROW(io::write_image(d / "x.png", Tensor<float>({1, 4, 4})), InputError);
}

TEST(Depth, MillimetreRoundTrip) {
  TempDir d;
  Rng rng(5);
  auto s = make_scene(16, rng);
  io::write_depth(d / "d.pgm", s.depth);
  auto r = io::read_depth(d / "d.pgm");
  EXPECT_LE(r.values().max_abs_diff(s.depth.values()), 0.0005 + 1e-6);
  io::write_mask(d / "m.pgm", std::vector<int>(16, 1), 4, 4);
  EXPECT_THROW(io::read_depth(d / "m.pgm"), IoError);
}

TEST(Manifest, RelativePathsResolved) {
  TempDir d;
  io::write_manifest(d / "m.tsv", {{"clear/0.png", "depth/0.pgm"}, {"/abs/c.png", "/abs/d.pgm"}});
  auto m = io::read_manifest(d / "m.tsv");
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m[0].clear_path, d / "clear/0.png");
  EXPECT_EQ(m[0].depth_path, d / "depth/0.pgm");
  EXPECT_EQ(m[1].clear_path, "/abs/c.png");
  std::ofstream(d / "bad.tsv") << "only_one_column\n";
  EXPECT_THROW(io::read_manifest(d / "bad.tsv"), IoError);
  EXPECT_THROW(io::read_manifest(d / "missing.tsv"), IoError);
}

TEST(Boxes, RoundTrip) {
  TempDir d;
  std::vector<io::Box> b{{1, 2, 3, 4}, {10.5, 0, 6, 6}};
  io::write_boxes(d / "b.csv", b);
  auto r = io::read_boxes(d / "b.csv");
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[1].x, 10.5);
  EXPECT_EQ(r[0].h, 4);
  std::ofstream(d / "bad.csv") << "1,2\n";
  EXPECT_THROW(io::read_boxes(d / "bad.csv"), IoError);
}
