#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "grad_check.hpp"
#include "lapig/data.hpp"
#include "lapig/identity.hpp"

using namespace lapig;

namespace {

// Independent scalar evaluation of the margin softmax for one row.
double margin_loss_oracle(const std::vector<double>& cosines, std::size_t y, double s, double m) {
  const double theta = std::acos(cosines[y]);
  const double target = theta + m <= std::numbers::pi ? std::cos(theta + m) : cosines[y] - m * std::sin(m);
  double denom = std::exp(s * target);
  for (std::size_t j = 0; j < cosines.size(); ++j)
    if (j != y) denom += std::exp(s * cosines[j]);
  return -std::log(std::exp(s * target) / denom);
}

Var<double> as_rows(const std::vector<std::vector<double>>& rows) {
  Tensor<double> t({rows.size(), rows[0].size()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[0].size(); ++j) t[i * rows[0].size() + j] = rows[i][j];
  return leaf(t);
}

}  // namespace

TEST(ArcFace, HandEvaluatedExample) {
  // One sample, two classes, cos to target 1 and to the other 0, s=2, m=pi/3.
  Var<double> emb = as_rows({{1, 0}});
  Var<double> w = as_rows({{1, 0}, {0, 1}});
  const double loss = arcface_loss(emb, {0}, w, ArcFaceConfig{2.0, std::numbers::pi / 3, 2}).item();
  EXPECT_NEAR(loss, -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)), 1e-12);
  EXPECT_NEAR(loss, 0.3133, 5e-5);
}

TEST(ArcFace, ZeroMarginIsCrossEntropy) {
  Rng rng(1);
  auto e = l2_normalize_rows(constant(randn<double>({4, 6}, rng))).value();
  auto w = l2_normalize_rows(constant(randn<double>({3, 6}, rng))).value();
  std::vector<std::size_t> labels{0, 2, 1, 2};
  const double got = arcface_loss(constant(e), labels, constant(w), ArcFaceConfig{1.0, 0.0, 3}).item();
  double ref = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<double> logits(3);
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 6; ++k) logits[j] += e[i * 6 + k] * w[j * 6 + k];
    double z = 0;
    for (double l : logits) z += std::exp(l);
    ref += std::log(z) - logits[labels[i]];
  }
  EXPECT_NEAR(got, ref / 4, 1e-12);
}

TEST(ArcFace, SingleClassIsZero) {
  Rng rng(2);
  for (int t = 0; t < 5; ++t) {
    auto e = l2_normalize_rows(constant(randn<double>({3, 5}, rng)));
    auto w = l2_normalize_rows(constant(randn<double>({1, 5}, rng)));
    EXPECT_NEAR(arcface_loss(e, {0, 0, 0}, w, ArcFaceConfig{64, 0.5, 1}).item(), 0.0, 1e-12);
  }
}

TEST(ArcFace, MatchesScalarOracleIncludingFallback) {
  Rng rng(3);
  std::uniform_real_distribution<double> u(-0.999, 0.999);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> cos{u(rng), u(rng), u(rng), u(rng)};
    const std::size_t y = static_cast<std::size_t>(t % 4);
    Tensor<double> c({1, 4}, cos);
    const double got = cross_entropy_rows(margin_logits(constant(c), {y}, 8.0, 0.5), {y}).item();
    EXPECT_NEAR(got, margin_loss_oracle(cos, y, 8.0, 0.5), 1e-10);
  }
}

TEST(ArcFace, NonNegativeAndDecreasingInTargetCosine) {
  std::vector<double> prev_loss;
  double prev = 1e300;
  for (double c = -0.8; c <= 0.95; c += 0.05) {
    Tensor<double> cos({1, 3}, std::vector<double>{c, 0.1, -0.3});
    const double l = cross_entropy_rows(margin_logits(constant(cos), {0}, 64.0, 0.5), {0}).item();
    EXPECT_GE(l, 0.0);
    EXPECT_LT(l, prev) << "at cos " << c;
    prev = l;
  }
}

TEST(ArcFace, GradientMatchesFiniteDifferences) {
  // 3 classes, 2 samples, through the normalisation of embeddings and class weights.
  Rng rng(4);
  Var<double> emb = leaf(randn<double>({2, 4}, rng));
  Var<double> w = leaf(randn<double>({3, 4}, rng));
  auto f = [&] { return arcface_loss(l2_normalize_rows(emb), {2, 0}, l2_normalize_rows(w), ArcFaceConfig{4.0, 0.5, 3}); };
  EXPECT_LT(lapig::testing::gradient_rel_error(f, {emb, w}, 1e-6), 1e-4);
}

TEST(ArcFace, LabelOutOfRange) {
  Var<double> emb = as_rows({{1, 0}});
  Var<double> w = as_rows({{1, 0}, {0, 1}});
  EXPECT_THROW(arcface_loss(emb, {2}, w, ArcFaceConfig{1, 0.5, 2}), std::out_of_range);
}

TEST(PadIdentity, Contract) {
  Rng rng(5);
  auto u = randn<double>({512}, rng);
  EXPECT_EQ(pad_identity(u, 512), u);
  const auto p = pad_identity(u, 768);
  ASSERT_EQ(p.size(), 768u);
  for (std::size_t i = 0; i < 512; ++i) EXPECT_EQ(p[i], u[i]);
  for (std::size_t i = 512; i < 768; ++i) EXPECT_EQ(p[i], 0.0);
  double n1 = 0, n2 = 0;
  for (double v : u.values()) n1 += v * v;
  for (double v : p.values()) n2 += v * v;
  EXPECT_DOUBLE_EQ(n1, n2);

  Tensor<double> one({512});
  one[0] = 1;
  const auto q = pad_identity(one, 640);
  EXPECT_EQ(std::count_if(q.values().begin(), q.values().end(), [](double v) { return v != 0; }), 1);
  EXPECT_EQ(q[0], 1.0);
  EXPECT_THROW(pad_identity(u, 256), std::invalid_argument);
}

TEST(IdentityEncoder, UnitNormAndDeterministic) {
  IdentityEncoderConfig cfg;
  cfg.num_classes = 3;
  IdentityEncoder<float> enc(cfg, 6);
  Rng rng(7);
  for (int t = 0; t < 3; ++t) {
    auto x = rand_uniform<float>({3, 64, 64}, rng, -1, 1);
    const auto u = extract_identity(enc, x);
    ASSERT_EQ(u.size(), kIdentityDim);
    double n = 0;
    for (float v : u.values()) n += static_cast<double>(v) * v;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
    EXPECT_EQ(extract_identity(enc, x), u);
  }
  auto grey = rand_uniform<float>({1, 64, 64}, rng, -1, 1);
  EXPECT_EQ(extract_identity(enc, grey).size(), kIdentityDim);
}

TEST(IdentityEncoder, NonFiniteInputRaises) {
  IdentityEncoderConfig cfg;
  IdentityEncoder<float> enc(cfg, 6);
  Tensor<float> x({3, 32, 32});
  x[5] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(extract_identity(enc, x), NonFiniteError);
}

TEST(IdentityEncoder, TrainingSeparatesHeldOutIdentities) {
  // Small version of the separation property: 24 train identities, 8 held out.
  SyntheticDataConfig dc;
  dc.n_identities = 32;
  dc.image_size = 32;
  dc.seed = 8;
  std::vector<Tensor<float>> train_x, test_x;
  std::vector<std::size_t> train_y;
  std::vector<int> test_id;
  for (int id = 0; id < 32; ++id) {
    const auto p = identity_params(dc.seed, id);
    for (View v : kAllViews) {
      const auto pair = render_face(p, v, 32);
      auto vis = normalize<float>(pair.visible);
      if (id < 24) {
        train_x.push_back(vis);
        train_y.push_back(static_cast<std::size_t>(id));
      } else {
        test_x.push_back(vis);
        test_id.push_back(id);
      }
    }
  }
  IdentityEncoderConfig cfg;
  cfg.widths = {8, 16, 32};
  cfg.num_classes = 24;
  cfg.scale = 16;
  cfg.margin = 0.3;
  IdentityEncoder<float> enc(cfg, 9);
  auto embed_all = [&] {
    std::vector<Tensor<float>> e;
    for (const auto& x : test_x) e.push_back(enc.extract(x));
    return e;
  };
  const double before = identity_margin(embed_all(), test_id);
  IdentityTrainConfig tc;
  tc.epochs = 15;
  tc.lr = 2e-3;
  tc.batch_size = 8;
  tc.seed = 10;
  const auto hist = train_identity_encoder(enc, train_x, train_y, tc);
  EXPECT_LT(hist.back(), hist.front());
  const double after = identity_margin(embed_all(), test_id);
  EXPECT_GT(after, before);
  EXPECT_GT(after, 0.1);
}
