#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "lapig/metrics.hpp"
#include "lapig/nn.hpp"

using namespace lapig;

namespace {

FeatureSet gaussian_1d(std::size_t n, double mu, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd(mu, sigma);
  FeatureSet f(n);
  for (auto& v : f) v = {nd(rng)};
  return f;
}

}  // namespace

TEST(Ssim, IdentityIsOne) {
  Rng rng(1);
  auto x = rand_uniform<double>({3, 16, 16}, rng, -1, 1);
  EXPECT_DOUBLE_EQ(ssim(x, x), 1.0);
}

TEST(Ssim, ConstantImagesClosedForm) {
  SsimParams p;
  const double c1 = (0.01 * 2) * (0.01 * 2);
  EXPECT_DOUBLE_EQ(p.c1(), c1);
  const double expect = (2 * 0 * 1 + c1) / (0.0 + 1.0 + c1);  // contrast-structure term is c2/c2
  EXPECT_NEAR(ssim(Tensor<double>({1, 8, 8}, 0.0), Tensor<double>({1, 8, 8}, 1.0), p), expect, 1e-12);
  EXPECT_NEAR(expect, 3.998e-4, 1e-7);
}

TEST(Ssim, SymmetricAndBounded) {
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    auto a = rand_uniform<double>({1, 9, 11}, rng, -1, 1), b = rand_uniform<double>({1, 9, 11}, rng, -1, 1);
    const double s = ssim(a, b);
    EXPECT_NEAR(s, ssim(b, a), 1e-15);
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
    EXPECT_LT(s, 1.0 - 1e-9);
  }
}

TEST(Ssim, RejectsBadInputs) {
  EXPECT_THROW(ssim(Tensor<double>({1, 8, 8}), Tensor<double>({1, 8, 7})), ShapeError);
  EXPECT_THROW(ssim(Tensor<double>({1, 5, 5}), Tensor<double>({1, 5, 5})), std::invalid_argument);
  EXPECT_THROW(ssim(Tensor<double>({1, 8, 8}), Tensor<double>({1, 8, 8}), 4, 1e-4, 9e-4), std::invalid_argument);
}

TEST(Fid, IdenticalSetsAreZero) {
  Rng rng(3);
  FeatureSet f(40);
  std::normal_distribution<double> nd;
  for (auto& v : f) v = {nd(rng), nd(rng), nd(rng), nd(rng)};
  EXPECT_LE(fid(f, f), 1e-6);
}

TEST(Fid, ShiftedMeansMatchAnalyticDistance) {
  // 1-D Frechet distance: (mu1 - mu2)^2 + (sigma1 - sigma2)^2 = 9.
  EXPECT_NEAR(fid(gaussian_1d(10000, 0, 1, 4), gaussian_1d(10000, 3, 1, 5)), 9.0, 0.5);
}

TEST(Fid, DifferentSpreadsMatchAnalyticDistance) {
  EXPECT_NEAR(fid(gaussian_1d(10000, 0, 1, 6), gaussian_1d(10000, 0, 2, 7)), 1.0, 0.2);
}

TEST(Fid, SymmetricAndNonNegative) {
  Rng rng(8);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 5; ++trial) {
    FeatureSet a(30), b(30);
    for (auto& v : a) v = {nd(rng), nd(rng), 0.5 * nd(rng)};
    for (auto& v : b) v = {nd(rng) + 1, 2 * nd(rng), nd(rng)};
    const double ab = fid(a, b), ba = fid(b, a);
    EXPECT_GE(ab, 0.0);
    EXPECT_NEAR(ab, ba, 1e-9 * std::max(1.0, ab));
  }
}

TEST(Fid, RejectsInsufficientSamplesAndDimensionMismatch) {
  FeatureSet small(3, std::vector<double>(4, 0.0));
  EXPECT_THROW(fid(small, small), std::invalid_argument);
  EXPECT_THROW(fid(gaussian_1d(10, 0, 1, 1), FeatureSet(10, std::vector<double>(2, 0.0))), std::invalid_argument);
}

TEST(Verification, PerfectSeparation) {
  ScorePair sp{{0.9, 0.95, 0.99}, {0.1, 0.2, 0.3, 0.5}};
  auto r = verification_metrics(sp);
  EXPECT_DOUBLE_EQ(r.vr_at_far.at(0.01), 1.0);
  EXPECT_DOUBLE_EQ(r.vr_at_far.at(0.001), 1.0);
}

TEST(Verification, HandEnumeratedThreshold) {
  ScorePair sp;
  for (int i = 1; i <= 10; ++i) sp.impostor.push_back(i / 10.0);
  sp.genuine = {0.95, 1.0};
  auto r = verification_metrics(sp, {0.1});
  EXPECT_DOUBLE_EQ(r.threshold.at(0.1), 1.0);
  EXPECT_DOUBLE_EQ(r.vr_at_far.at(0.1), 0.5);
}

TEST(Verification, ChanceLevelMatchesFar) {
  Rng rng(9);
  std::normal_distribution<double> nd;
  const std::size_t n = 10000;
  ScorePair sp;
  for (std::size_t i = 0; i < n; ++i) {
    sp.genuine.push_back(nd(rng));
    sp.impostor.push_back(nd(rng));
  }
  auto r = verification_metrics(sp);
  for (double far : {0.001, 0.01}) {
    const double band = 3 * std::sqrt(far * (1 - far) * 2.0 / n);  // genuine sample plus threshold estimate
    EXPECT_NEAR(r.vr_at_far.at(far), far, band) << far;
  }
}

TEST(Verification, MonotoneInFar) {
  Rng rng(10);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 10; ++trial) {
    ScorePair sp;
    for (int i = 0; i < 500; ++i) {
      sp.genuine.push_back(nd(rng) + 1.0);
      sp.impostor.push_back(nd(rng));
    }
    auto r = verification_metrics(sp, {0.001, 0.005, 0.01, 0.05, 0.1});
    double prev = -1;
    for (auto [far, vr] : r.vr_at_far) {
      EXPECT_GE(vr, prev);
      prev = vr;
    }
  }
}

TEST(Verification, RejectsEmpty) {
  EXPECT_THROW(verification_metrics(ScorePair{{}, {0.1}}), std::invalid_argument);
  EXPECT_THROW(verification_metrics(ScorePair{{0.1}, {}}), std::invalid_argument);
}

TEST(Rank1, SelfMatch) {
  Rng rng(11);
  std::normal_distribution<double> nd;
  FeatureSet g(12);
  for (auto& v : g) v = {nd(rng), nd(rng), nd(rng)};
  std::vector<int> labels{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
  EXPECT_DOUBLE_EQ(rank1(g, labels, g, labels).rank1, 1.0);
}

TEST(Rank1, OneHotShuffledLabelsAgainstBruteForce) {
  const int k = 8;
  FeatureSet onehot(k, std::vector<double>(k, 0.0));
  for (int i = 0; i < k; ++i) onehot[i][i] = 1.0;
  std::vector<int> gallery_labels(k), probe_labels(k);
  std::iota(gallery_labels.begin(), gallery_labels.end(), 0);
  probe_labels = gallery_labels;
  Rng rng(12);
  std::shuffle(probe_labels.begin(), probe_labels.end(), rng);
  // Probe i's nearest gallery item is gallery i, so a hit iff labels agree.
  int hits = 0;
  for (int i = 0; i < k; ++i) hits += probe_labels[i] == gallery_labels[i];
  EXPECT_DOUBLE_EQ(rank1(onehot, gallery_labels, onehot, probe_labels).rank1, static_cast<double>(hits) / k);
}

TEST(Rank1, SingleProbeAndMissingLabel) {
  FeatureSet g{{1.0, 0.0}};
  EXPECT_DOUBLE_EQ(rank1(g, {3}, FeatureSet{{0.7, 0.1}}, {3}).rank1, 1.0);
  auto r = rank1(g, {3}, FeatureSet{{0.7, 0.1}, {1.0, 0.0}}, {3, 9});
  EXPECT_DOUBLE_EQ(r.rank1, 0.5);
  EXPECT_EQ(r.probes_without_gallery_label, 1u);
}

TEST(EvalReport, JsonRoundTripAndTable) {
  EvalReport r;
  r.ssim_mean = 0.5;
  r.fid = 12.25;
  r.rank1 = 0.75;
  r.vr_at_far = {{0.001, 0.25}, {0.01, 0.5}};
  r.n_pairs = 8;
  r.feature_extractor = "identity-encoder/penultimate";
  r.config = {{"a", 1}};
  r.config_hash = "abc";
  auto back = EvalReport::from_json(nlohmann::json::parse(r.to_json().dump()));
  EXPECT_EQ(back.to_json(), r.to_json());
  const std::string table = r.to_table();
  EXPECT_NE(table.find("25.00"), std::string::npos);
  EXPECT_NE(table.find("0.5000"), std::string::npos);
}

TEST(Psnr, ClosedFormAndEdgeCases) {
  Tensor<double> a({1, 2, 2}, std::vector<double>{0, 0, 0, 0}), b({1, 2, 2}, std::vector<double>{0.2, -0.2, 0.2, -0.2});
  // mse 0.04, range 2: 10 log10(4 / 0.04) = 20 dB
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-12);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  EXPECT_THROW(psnr(a, Tensor<double>({1, 2, 3})), ShapeError);
}
