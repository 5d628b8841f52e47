#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dehaze/config.hpp"

using namespace dehaze;

TEST(ConfigTest, DefaultsResolve) {
  Config c;
  auto s = Settings::from(c);
  EXPECT_DOUBLE_EQ(s.lambda, 0.1);
  EXPECT_DOUBLE_EQ(s.beta1, 0.1);
  EXPECT_DOUBLE_EQ(s.beta2, 0.3);
  EXPECT_DOUBLE_EQ(s.gamma, 0.01);
  EXPECT_DOUBLE_EQ(s.lr, 1e-4);
  EXPECT_EQ(s.epochs, 300);
  EXPECT_EQ(s.k_max, 1);
  EXPECT_EQ(s.channels, (std::array<std::size_t, 3>{16, 32, 64}));
  EXPECT_EQ(s.manifest, "run/manifest.tsv");
  EXPECT_EQ(s.ckpt_dir, "run");
  c.set("train.stage", "2");
  EXPECT_EQ(Settings::from(c).epochs, 100);
  c.set("train.epochs=7");
  EXPECT_EQ(Settings::from(c).epochs, 7);
}

TEST(ConfigTest, UnknownAndMalformedRejected) {
  Config c;
  EXPECT_THROW(c.set("train.momentum", "0.9"), ConfigError);
  EXPECT_THROW(c.set("no_equals_sign"), ConfigError);
  c.set("train.lr", "fast");
  EXPECT_THROW(Settings::from(c), ConfigError);
  Config d;
  d.set("model.channels", "16,32");
  EXPECT_THROW(Settings::from(d), ConfigError);
}

TEST(ConfigTest, InvariantsEnforced) {
  auto bad = [](const char* k, const char* v) {
    Config c;
    c.set(k, v);
    return c;
  };
  EXPECT_THROW(Settings::from(bad("loss.beta1", "0.3")), ConfigError);
  EXPECT_THROW(Settings::from(bad("loss.beta1", "0.5")), ConfigError);
  EXPECT_THROW(Settings::from(bad("loss.lambda", "-0.1")), ConfigError);
  EXPECT_THROW(Settings::from(bad("loss.gamma", "-1")), ConfigError);
  EXPECT_THROW(Settings::from(bad("train.epochs", "0")), ConfigError);
  EXPECT_THROW(Settings::from(bad("train.stage", "3")), ConfigError);
  EXPECT_THROW(Settings::from(bad("loop.k_max", "0")), ConfigError);
  EXPECT_THROW(Settings::from(bad("haze.A_max", "1.5")), ConfigError);
  EXPECT_THROW(Settings::from(bad("text.kind", "file")), ConfigError);
  for (const char* v : {"0", "0.01", "0.1", "1"}) {
    Config c;
    c.set("loss.lambda", v);
    c.set("loss.gamma", v);
    EXPECT_NO_THROW(Settings::from(c));
  }
}

TEST(ConfigTest, FileParsingAndResolvedDump) {
  const auto path = (std::filesystem::temp_directory_path() / "dehaze_cfg_test.cfg").string();
  {
    std::ofstream os(path);
    os << "# comment\n\ntrain.seed = 42   # trailing\n data.out_dir=/tmp/x \n";
  }
  auto c = Config::from_file(path);
  auto s = Settings::from(c);
  EXPECT_EQ(s.seed, 42u);
  EXPECT_EQ(s.manifest, "/tmp/x/manifest.tsv");
  const auto dump = c.resolved();
  EXPECT_NE(dump.find("train.seed = 42\n"), std::string::npos);
  EXPECT_NE(dump.find("loss.gamma = 0.01\n"), std::string::npos);
  EXPECT_NE(dump.find("train.epochs = 300\n"), std::string::npos);
  for (const auto& k : Config::keys()) EXPECT_NE(dump.find(std::string(k.name) + " = "), std::string::npos);
  {
    std::ofstream os(path);
    os << "bogus.key = 1\n";
  }
  EXPECT_THROW(Config::from_file(path), ConfigError);
  std::filesystem::remove(path);
  EXPECT_THROW(Config::from_file(path), IoError);
}
