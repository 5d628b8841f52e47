#include <gtest/gtest.h>

#include "dehaze/losses.hpp"
#include "gradcheck.hpp"

using namespace dehaze;
using testutil::gradcheck;
using testutil::random_tensor;

namespace {

Var<double> constant(double v, Shape s = {1, 3, 4, 4}) { return Var<double>(Tensor<double>(std::move(s), v)); }

/// One level, a single 1x1 "identity" conv per channel, linear.
PerceptualExtractor<double> identity_extractor() {
  Tensor<double> w({3, 3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) w[((c * 3 + c) * 3 + 1) * 3 + 1] = 1;
  io::NamedTensors t{{"perceptual.l1.weight", w.cast<float>()}};
  return PerceptualExtractor<double>::from_tensors(t, {1.0}, true);
}

}  // namespace

TEST(L1, Cases) {
  EXPECT_EQ(l1_loss(constant(0.3), constant(0.3)).item(), 0.0);
  EXPECT_NEAR(l1_loss(constant(0.2), constant(0.5)).item(), 0.3, 1e-15);
  Rng rng(1);
  Var<double> a(random_tensor({1, 3, 4, 4}, rng)), b(random_tensor({1, 3, 4, 4}, rng));
  EXPECT_DOUBLE_EQ(l1_loss(a, b).item(), l1_loss(b, a).item());
  EXPECT_THROW(l1_loss(a, constant(0, {1, 3, 4, 5})), InputError);
}

TEST(ContrastiveRatio, Cases) {
  auto ext = identity_extractor();
  // 0.1 / 0.4, with the epsilon guard in the denominator
  EXPECT_NEAR(contrastive_ratio(constant(0.0), constant(0.1), constant(0.5), ext).item(), 0.1 / (0.4 + kRatioEpsilon), 1e-12);
  EXPECT_NEAR(contrastive_ratio(constant(0.0), constant(0.1), constant(0.5), ext).item(), 0.25, 1e-7);
  EXPECT_EQ(contrastive_ratio(constant(0.4), constant(0.4), constant(0.9), ext).item(), 0.0);
  const double degenerate = contrastive_ratio(constant(0.0), constant(0.5), constant(0.5), ext).item();
  EXPECT_TRUE(std::isfinite(degenerate));
  EXPECT_GT(degenerate, 1e6);
}

TEST(ContrastiveRatio, NonNegativeWithToyExtractor) {
  auto ext = PerceptualExtractor<double>::toy();
  Rng rng(2);
  for (int i = 0; i < 5; ++i) {
    Var<double> j(random_tensor({1, 3, 16, 16}, rng, 0, 1)), p(random_tensor({1, 3, 16, 16}, rng, 0, 1)),
        h(random_tensor({1, 3, 16, 16}, rng, 0, 1));
    EXPECT_GE(contrastive_ratio(j, p, h, ext).item(), 0.0);
  }
}

TEST(PredehLoss, Cases) {
  auto ext = identity_extractor();
  EXPECT_NEAR(predeh_loss(constant(0.1), constant(0.0), constant(0.5), ext, 0.1).item(), 0.125, 1e-8);
  EXPECT_NEAR(predeh_loss(constant(0.1), constant(0.0), constant(0.5), ext, 0.0).item(), 0.1, 1e-15);
  EXPECT_EQ(predeh_loss(constant(0.3), constant(0.3), constant(0.8), ext, 0.1).item(), 0.0);
  EXPECT_NEAR(dehaze_loss(constant(0.1), constant(0.0), constant(0.5), ext, 0.1).item(), 0.125, 1e-8);
  EXPECT_EQ(dehaze_loss(constant(0.3), constant(0.3), constant(0.8), ext, 0.1).item(), 0.0);
  EXPECT_THROW(predeh_loss(constant(0.1), constant(0.0), constant(0.5), ext, -1.0), ConfigError);
}

TEST(Mcr, HandCases) {
  EXPECT_EQ(mcr_loss(0.1, 0.3, 0.6, 0.1, 0.3), 0.0);
  EXPECT_NEAR(mcr_loss(0.5, 0.3, 0.4, 0.1, 0.3), 0.7, 1e-15);
  EXPECT_NEAR(mcr_loss(0.0, 0.0, 0.0, 0.1, 0.3), 0.4, 1e-15);
  EXPECT_THROW(mcr_loss(0.1, 0.2, 0.3, 0.3, 0.3), ConfigError);
  EXPECT_THROW(mcr_loss(0.1, 0.2, 0.3, 0.4, 0.3), ConfigError);
  Var<double> lw(Tensor<double>({1}, 0.5));
  EXPECT_NEAR(mcr_loss(lw, 0.3, 0.4, 0.1, 0.3).item(), 0.7, 1e-15);
}

TEST(Mcr, HingeCharacterization) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double lw = rng.uniform(0, 0.5), lp = rng.uniform(0, 0.5), lh = rng.uniform(0, 0.8);
    const bool zero = mcr_loss(lw, lp, lh, 0.1, 0.3) == 0.0;
    EXPECT_EQ(zero, lw <= lp - 0.1 && lw <= lh - 0.3);
  }
}

TEST(Mcr, BatchMatchesScalarForm) {
  Rng rng(4);
  Var<double> pred(random_tensor({3, 3, 4, 4}, rng, 0, 1), true);
  auto clear = random_tensor({3, 3, 4, 4}, rng, 0, 1);
  const std::vector<double> lp{0.2, 0.5, 0.9}, lh{0.3, 0.9, 1.2};
  const auto lw = per_sample_l1(pred.value(), clear);
  double expect = 0;
  for (int n = 0; n < 3; ++n) expect += mcr_loss(lw[n], lp[n], lh[n], 0.1, 0.3) / 3;
  EXPECT_NEAR(mcr_loss_batch(pred, clear, lp, lh, 0.1, 0.3).item(), expect, 1e-12);
  EXPECT_LE(gradcheck([&] { return mcr_loss_batch(pred, clear, lp, lh, 0.1, 0.3); }, {pred}).rel_error, 1e-3);
}

TEST(TotalLoss, Cases) {
  Var<double> d(Tensor<double>({1}, 0.2)), m(Tensor<double>({1}, 0.1)), down(Tensor<double>({1}, 3.0));
  EXPECT_NEAR(total_loss(d, m, std::optional<Var<double>>(down), 0.01).item(), 0.33, 1e-12);
  EXPECT_NEAR(total_loss(d, m, std::optional<Var<double>>(down), 0.0).item(), 0.3, 1e-12);
  EXPECT_THROW(total_loss(d, m, std::optional<Var<double>>(down), -0.5), ConfigError);
  auto b = make_breakdown(0.15, 0.5, 0.1, 0.1, 3.0, 0.01);
  EXPECT_NEAR(b.dehaze, 0.2, 1e-15);
  EXPECT_NEAR(b.total, 0.33, 1e-12);
  EXPECT_TRUE(b.consistent(0.01));
}

TEST(LossWeightsTest, Validation) {
  LossWeights w;
  EXPECT_NO_THROW(w.validate());
  EXPECT_DOUBLE_EQ(w.lambda, 0.1);
  EXPECT_DOUBLE_EQ(w.beta1, 0.1);
  EXPECT_DOUBLE_EQ(w.beta2, 0.3);
  EXPECT_DOUBLE_EQ(w.gamma, 0.01);
  for (double v : {0.0, 0.01, 0.1, 1.0}) {
    w.lambda = v;
    w.gamma = v;
    EXPECT_NO_THROW(w.validate());
  }
  w.beta1 = 0.3;
  EXPECT_THROW(w.validate(), ConfigError);
}

TEST(LossGrad, AllLossesOnEightByEight) {
  Rng rng(5);
  auto ext = PerceptualExtractor<double>::toy({4, 6, 8}, {0.25, 0.5, 1.0});
  Var<double> pred(random_tensor({1, 3, 8, 8}, rng, 0, 1), true);
  Var<double> clear(random_tensor({1, 3, 8, 8}, rng, 0, 1)), hazy(random_tensor({1, 3, 8, 8}, rng, 0, 1));
  EXPECT_LE(gradcheck([&] { return l1_loss(pred, clear); }, {pred}).rel_error, 1e-3);
  EXPECT_LE(gradcheck([&] { return contrastive_ratio(clear, pred, hazy, ext); }, {pred}).rel_error, 1e-3);
  EXPECT_LE(gradcheck([&] { return predeh_loss(pred, clear, hazy, ext, 0.1); }, {pred}).rel_error, 1e-3);
  EXPECT_LE(gradcheck([&] { return dehaze_loss(pred, clear, hazy, ext, 1.0); }, {pred}).rel_error, 1e-3);
  EXPECT_LE(gradcheck([&] { return mcr_loss(l1_loss(pred, clear), 0.3, 0.4, 0.1, 0.3); }, {pred}).rel_error, 1e-3);
  EXPECT_LE(gradcheck([&] {
              auto d = dehaze_loss(pred, clear, hazy, ext, 0.1);
              auto m = mcr_loss(l1_loss(pred, clear), 0.3, 0.4, 0.1, 0.3);
              return total_loss(d, m, std::optional<Var<double>>(ops::mean(ops::mul(pred, pred))), 0.01);
            }, {pred}).rel_error, 1e-3);
}

TEST(Extractor, FrozenDeterministicRoundTrip) {
  auto a = PerceptualExtractor<float>::toy();
  auto b = PerceptualExtractor<float>::toy();
  EXPECT_EQ(a.levels(), 5u);
  Var<float> x(Tensor<float>({1, 3, 16, 16}, 0.3f));
  auto fa = a.features(x), fb = b.features(x);
  for (std::size_t v = 0; v < fa.size(); ++v) {
    EXPECT_EQ(fa[v].value(), fb[v].value());
    EXPECT_FALSE(fa[v].requires_grad());
  }
  auto c = PerceptualExtractor<float>::from_tensors(a.to_tensors());
  EXPECT_EQ(c.features(x).back().value(), fa.back().value());
  EXPECT_THROW(PerceptualExtractor<float>::toy({4, 4}, {1.0}), ConfigError);
  EXPECT_THROW(PerceptualExtractor<float>::toy({4}, {0.0}), ConfigError);
}
