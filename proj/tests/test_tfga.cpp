#include <gtest/gtest.h>

#include "dehaze/tfga.hpp"
#include "gradcheck.hpp"

using namespace dehaze;
using testutil::gradcheck;
using testutil::project;
using testutil::random_tensor;

namespace {

template <class T>
Var<T> rand_var(Shape s, Rng& rng, double lo = -1, double hi = 1, bool grad = false) {
  return Var<T>(random_tensor(std::move(s), rng, lo, hi).template cast<T>(), grad);
}

void set_identity(nn::Conv2d<double>& conv) {
  auto& w = conv.weight.mutable_value();
  w.fill(0);
  const std::size_t C = w.dim(0), k = w.dim(2);
  for (std::size_t c = 0; c < C; ++c) w[((c * C + c) * k + k / 2) * k + k / 2] = 1;
  conv.bias.mutable_value().fill(0);
}

}  // namespace

TEST(Tfga, AdapterShapes) {
  Tfga<float> tfga(TfgaConfig{}, Rng(1));
  Rng rng(2);
  EXPECT_EQ(tfga.feature_adapt_image(rand_var<float>({1, 3, 32, 32}, rng, 0, 1)).shape(), (Shape{1, 64, 8, 8}));
  TaskFeedback<float> seg{FeedbackKind::SegLogits, rand_var<float>({1, 2, 32, 32}, rng)};
  EXPECT_EQ(tfga.feature_adapt_feedback(seg, 8, 8).shape(), (Shape{1, 64, 8, 8}));
  TaskFeedback<float> det{FeedbackKind::BackboneFeatures, rand_var<float>({1, 16, 8, 8}, rng)};
  EXPECT_EQ(tfga.feature_adapt_feedback(det, 8, 8).shape(), (Shape{1, 64, 8, 8}));
  EXPECT_THROW(tfga.feature_adapt_image(rand_var<float>({1, 3, 30, 32}, rng)), InputError);
}

TEST(Tfga, FeedbackAdapterErrors) {
  Tfga<float> tfga(TfgaConfig{}, Rng(1));
  Rng rng(3);
  TaskFeedback<float> wrong{FeedbackKind::DepthMap, rand_var<float>({1, 2, 32, 32}, rng)};
  EXPECT_THROW(tfga.feature_adapt_feedback(wrong, 8, 8), AdapterError);
  TaskFeedback<float> unknown{static_cast<FeedbackKind>(42), rand_var<float>({1, 1, 8, 8}, rng)};
  EXPECT_THROW(tfga.feature_adapt_feedback(unknown, 8, 8), AdapterError);
}

TEST(Tfga, ConstantAndDistinctFeedback) {
  Tfga<float> tfga(TfgaConfig{}, Rng(4));
  TaskFeedback<float> c{FeedbackKind::DepthMap, Var<float>(Tensor<float>({1, 1, 32, 32}, 0.8f))};
  EXPECT_TRUE(tfga.feature_adapt_feedback(c, 8, 8).value().all_finite());
  Rng rng(5);
  TaskFeedback<float> a{FeedbackKind::SegLogits, rand_var<float>({1, 2, 16, 16}, rng)};
  TaskFeedback<float> b{FeedbackKind::SegLogits, rand_var<float>({1, 2, 16, 16}, rng)};
  EXPECT_GT(tfga.feature_adapt_feedback(a, 4, 4).value().max_abs_diff(tfga.feature_adapt_feedback(b, 4, 4).value()), 0.0f);
}

TEST(Tfga, SingleTokenAttentionIsValue) {
  nn::ParamStore<double> store;
  Rng rng(6);
  CrossAttention<double> att(store, "att", 2, rng);
  auto q = rand_var<double>({1, 2, 1, 1}, rng), kv = rand_var<double>({1, 2, 1, 1}, rng);
  auto y = att(q, kv).value();
  // out(V(kv)) by hand.
  const auto& Wv = att.value_proj().weight.value();
  const auto& Wo = att.out_proj().weight.value();
  const auto& bo = att.out_proj().bias.value();
  double v[2];
  for (int i = 0; i < 2; ++i) v[i] = Wv[i * 2] * kv.value()[0] + Wv[i * 2 + 1] * kv.value()[1];
  for (int o = 0; o < 2; ++o) EXPECT_NEAR(y[o], Wo[o * 2] * v[0] + Wo[o * 2 + 1] * v[1] + bo[o], 1e-12);
}

TEST(Tfga, CrossAttentionPermutationEquivariant) {
  nn::ParamStore<double> store;
  Rng rng(7);
  CrossAttention<double> att(store, "att", 3, rng);
  auto q = random_tensor({1, 3, 2, 3}, rng), kv = random_tensor({1, 3, 2, 3}, rng);
  const std::vector<std::size_t> perm{4, 0, 5, 2, 1, 3};
  auto permute = [&](const Tensor<double>& t) {
    Tensor<double> out(t.shape());
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 6; ++p) out[c * 6 + p] = t[c * 6 + perm[p]];
    return out;
  };
  auto y = att(Var<double>(q), Var<double>(kv)).value();
  auto yp = att(Var<double>(permute(q)), Var<double>(permute(kv))).value();
  EXPECT_LE(yp.max_abs_diff(permute(y)), 1e-12);
}

TEST(Tfga, BidirectionalShapes) {
  Tfga<float> tfga(TfgaConfig{}, Rng(8));
  Rng rng(9);
  auto a = rand_var<float>({1, 64, 8, 8}, rng), b = rand_var<float>({1, 64, 8, 8}, rng);
  auto o = tfga.bidirectional_cross_attention(a, b);
  for (const auto* v : {&o.id_to_c, &o.c_to_id, &o.down_to_c, &o.c_to_down}) EXPECT_EQ(v->shape(), a.shape());
  EXPECT_THROW(tfga.bidirectional_cross_attention(a, rand_var<float>({1, 64, 4, 4}, rng)), InputError);
}

TEST(Tfga, CffbZeroInZeroOut) {
  nn::ParamStore<double> store;
  Rng rng(10);
  Cffb<double> with_res(store, "a", 8, true, rng), no_res(store, "b", 8, false, rng);
  Var<double> z(Tensor<double>({1, 8, 4, 4}));
  const auto a = with_res(z).value(), b = no_res(z).value();
  for (double v : a.values()) EXPECT_EQ(v, 0.0);
  for (double v : b.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(with_res(rand_var<double>({2, 8, 3, 3}, rng)).shape(), (Shape{2, 8, 3, 3}));
}

TEST(Tfga, ZeroInitWeightsAreHalf) {
  Tfga<double> tfga(TfgaConfig{}, Rng(11));
  Rng rng(12);
  auto q = tfga.weight_generation(rand_var<double>({1, 64, 4, 4}, rng));
  for (std::size_t i = 0; i < q.q_id.size(); ++i) {
    EXPECT_EQ(q.q_id.value()[i], 0.5);
    EXPECT_EQ(q.q_down.value()[i], 0.5);
  }
}

TEST(Tfga, CombineIdentityWeighting) {
  Tfga<double> tfga(TfgaConfig{8}, Rng(13));
  set_identity(tfga.out_conv());
  Rng rng(14);
  auto f_id = rand_var<double>({1, 8, 4, 4}, rng), f_down = rand_var<double>({1, 8, 4, 4}, rng);
  Var<double> zero(Tensor<double>({1, 8, 4, 4}));
  WeightPair<double> one_zero{Var<double>(Tensor<double>({1, 8, 4, 4}, 1.0)), zero};
  EXPECT_LE(tfga.combine(f_id, f_down, one_zero, zero).value().max_abs_diff(f_id.value()), 1e-15);
  Var<double> half(Tensor<double>({1, 8, 4, 4}, 0.5));
  auto mean = tfga.combine(f_id, f_down, {half, half}, zero).value();
  for (std::size_t i = 0; i < mean.size(); ++i)
    EXPECT_NEAR(mean[i], 0.5 * (f_id.value()[i] + f_down.value()[i]), 1e-15);
}

TEST(Tfga, ZeroInitInjectionAndGradientFlow) {
  Tfga<double> tfga(TfgaConfig{8}, Rng(15));
  Rng rng(16);
  auto f = rand_var<double>({1, 8, 4, 4}, rng, -1, 1, true), e = rand_var<double>({1, 8, 4, 4}, rng, -1, 1, true);
  auto inj = tfga.inject_to_ffm(f, e);
  for (double v : inj.value().values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(tfga.inject_to_ffm(f, rand_var<double>({1, 8, 2, 2}, rng)), InputError);
  // Give the zero-initialized conv some weight so gradients reach both inputs.
  auto w = tfga.params().find("tfga.inject.weight");
  for (auto& v : w.mutable_value().values()) v = rng.uniform(-0.1, 0.1);
  backward(project(tfga.inject_to_ffm(f, e)));
  ASSERT_TRUE(f.has_grad() && e.has_grad());
  EXPECT_GT(f.grad().max_abs_diff(Tensor<double>(f.shape())), 0.0);
  EXPECT_GT(e.grad().max_abs_diff(Tensor<double>(e.shape())), 0.0);
}

TEST(TfgaGrad, SubBlocks) {
  Tfga<double> tfga(TfgaConfig{4, 2, 1, 3}, Rng(17));
  Rng rng(18);
  // Move the zero-initialized heads off zero so their gradients are informative.
  for (const auto& [name, p] : tfga.params().entries()) {
    if (name.find("weights.") == std::string::npos && name.find("inject") == std::string::npos) continue;
    auto v = p;
    for (auto& x : v.mutable_value().values()) x = rng.uniform(-0.3, 0.3);
  }
  auto img = rand_var<double>({1, 3, 16, 16}, rng, 0, 1, true);
  auto f_id = rand_var<double>({1, 4, 4, 4}, rng, -1, 1, true), f_down = rand_var<double>({1, 4, 4, 4}, rng, -1, 1, true);
  auto params = tfga.params().vars();

  auto with = [&](std::vector<Var<double>> extra) {
    auto v = params;
    v.insert(v.end(), extra.begin(), extra.end());
    return v;
  };
  EXPECT_LE(gradcheck([&] { return project(tfga.feature_adapt_image(img)); }, with({img})).rel_error, 1e-3);
  TaskFeedback<double> fb{FeedbackKind::SegLogits, rand_var<double>({1, 2, 16, 16}, rng, -1, 1, true)};
  EXPECT_LE(gradcheck([&] { return project(tfga.feature_adapt_feedback(fb, 4, 4)); }, with({fb.payload})).rel_error, 1e-3);
  EXPECT_LE(gradcheck([&] {
              auto o = tfga.bidirectional_cross_attention(f_id, f_down);
              return ops::add(ops::add(project(o.id_to_c, 1), project(o.c_to_id, 2)),
                              ops::add(project(o.down_to_c, 3), project(o.c_to_down, 4)));
            }, with({f_id, f_down})).rel_error, 1e-3);
  EXPECT_LE(gradcheck([&] { return project(tfga.cffb(0)(f_id)); }, with({f_id})).rel_error, 1e-3);
  EXPECT_LE(gradcheck([&] { return project(tfga.weight_generation(f_id).q_id); }, with({f_id})).rel_error, 1e-3);
  EXPECT_LE(gradcheck([&] { return project(tfga.fuse(f_id, f_down)); }, with({f_id, f_down})).rel_error, 1e-3);
  TaskFeedback<double> det{FeedbackKind::BackboneFeatures, rand_var<double>({1, 3, 4, 4}, rng)};
  EXPECT_LE(gradcheck([&] { return project(tfga(img, det, f_id)); }, with({img, f_id})).rel_error, 1e-3);
}

TEST(Tfga, WeightsSumToOne) {
  Tfga<double> tfga(TfgaConfig{8}, Rng(19));
  Rng rng(20);
  for (const auto& [name, p] : tfga.params().entries()) {
    if (name.find("weights.") == std::string::npos) continue;
    auto v = p;
    for (auto& x : v.mutable_value().values()) x = rng.uniform(-0.5, 0.5);
  }
  for (int trial = 0; trial < 20; ++trial) {
    auto q = tfga.weight_generation(rand_var<double>({1, 8, 3, 3}, rng, -2, 2));
    for (std::size_t i = 0; i < q.q_id.size(); ++i) {
      EXPECT_NEAR(q.q_id.value()[i] + q.q_down.value()[i], 1.0, 1e-12);
      EXPECT_GT(q.q_id.value()[i], 0.0);
      EXPECT_LT(q.q_id.value()[i], 1.0);
    }
  }
}
