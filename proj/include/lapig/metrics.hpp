#pragma once

// Evaluation metrics: SSIM, Frechet distance between feature sets, and the
// verification protocol (VR@FAR, Rank-1).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "lapig/tensor.hpp"

namespace lapig {

struct SsimParams {
  std::size_t window = 7;
  double dynamic_range = 2.0;  // images in [-1, 1]
  double k1 = 0.01;
  double k2 = 0.03;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
};

// Mean SSIM over all fully-contained uniform windows, averaged over channels.
template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, std::size_t window, double c1, double c2) {
  require_same_shape(a.shape(), b.shape(), "ssim");
  if (a.rank() != 3) throw ShapeError("ssim expects (C,H,W) images");
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
  if (window == 0 || window % 2 == 0) throw std::invalid_argument("ssim window must be odd");
  if (window > h || window > w) throw std::invalid_argument("ssim window exceeds image size");
  const double n = static_cast<double>(window * window);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y + window <= h; ++y)
      for (std::size_t x = 0; x + window <= w; ++x) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            const double va = a.at(ch, y + dy, x + dx), vb = b.at(ch, y + dy, x + dx);
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
          }
        const double ma = sa / n, mb = sb / n;
        const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return total / static_cast<double>(count);
}

template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimParams& p = {}) {
  return ssim(a, b, p.window, p.c1(), p.c2());
}

// Peak signal-to-noise ratio in dB; +inf for identical images.
template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double dynamic_range = 2.0) {
  if (a.shape() != b.shape()) throw ShapeError("psnr: shapes differ");
  if (a.size() == 0) throw std::invalid_argument("psnr: empty images");
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(dynamic_range * dynamic_range / mse);
}

// ---------------------------------------------------------------- FID

using FeatureSet = std::vector<std::vector<double>>;

namespace detail {

inline Eigen::MatrixXd to_matrix(const FeatureSet& f) {
  const std::size_t d = f.front().size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(f.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f[i].size() != d) throw std::invalid_argument("feature vectors of differing dimension");
    for (std::size_t j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = f[i][j];
  }
  return m;
}

// Symmetric PSD square root with negative eigenvalues clamped to zero.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// ||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^{1/2}), with the cross term
// evaluated as Tr((S_r^{1/2} S_g S_r^{1/2})^{1/2}).
inline double fid(const FeatureSet& real, const FeatureSet& gen) {
  if (real.empty() || gen.empty()) throw std::invalid_argument("fid: empty feature set");
  const std::size_t d = real.front().size();
  if (gen.front().size() != d) throw std::invalid_argument("fid: dimension mismatch");
  if (real.size() < d + 1 || gen.size() < d + 1)
    throw std::invalid_argument("fid: need at least dim+1 samples per set (dim " + std::to_string(d) + ")");
  const Eigen::MatrixXd r = detail::to_matrix(real), g = detail::to_matrix(gen);
  const Eigen::RowVectorXd mr = r.colwise().mean(), mg = g.colwise().mean();
  const Eigen::MatrixXd rc = r.rowwise() - mr, gc = g.rowwise() - mg;
  const Eigen::MatrixXd sr = rc.transpose() * rc / static_cast<double>(r.rows() - 1);
  const Eigen::MatrixXd sg = gc.transpose() * gc / static_cast<double>(g.rows() - 1);
  const Eigen::MatrixXd root_r = detail::psd_sqrt(sr);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(root_r * sg * root_r, Eigen::EigenvaluesOnly);
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (mr - mg).squaredNorm() + sr.trace() + sg.trace() - 2.0 * cross;
  return std::max(0.0, value);
}

// ---------------------------------------------------------------- verification

struct ScorePair {
  std::vector<double> genuine;
  std::vector<double> impostor;
};

struct VerificationResult {
  std::map<double, double> vr_at_far;
  std::map<double, double> threshold;
};

// For each target FAR the threshold is the smallest impostor score tau with
// fraction(impostor >= tau) <= FAR; if none qualifies, tau sits just above the
// largest impostor score. VR is the fraction of genuine scores >= tau.
inline VerificationResult verification_metrics(const ScorePair& pairs, const std::vector<double>& fars = {0.001, 0.01}) {
  if (pairs.genuine.empty() || pairs.impostor.empty()) throw std::invalid_argument("verification needs genuine and impostor scores");
  std::vector<double> imp = pairs.impostor, gen = pairs.genuine;
  std::sort(imp.begin(), imp.end());
  std::sort(gen.begin(), gen.end());
  const double n_imp = static_cast<double>(imp.size());
  VerificationResult out;
  for (double far : fars) {
    double tau = std::nextafter(imp.back(), std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < imp.size(); ++i) {
      if (i > 0 && imp[i] == imp[i - 1]) continue;
      const double frac = static_cast<double>(imp.size() - i) / n_imp;  // imp[i..] are >= imp[i]
      if (frac <= far) {
        tau = imp[i];
        break;
      }
    }
    const auto first = std::lower_bound(gen.begin(), gen.end(), tau);
    out.threshold[far] = tau;
    out.vr_at_far[far] = static_cast<double>(gen.end() - first) / static_cast<double>(gen.size());
  }
  return out;
}

struct RankResult {
  double rank1 = 0;
  std::size_t probes_without_gallery_label = 0;
};

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return d / std::max(std::sqrt(na * nb), 1e-300);
}

// Fraction of probes whose most cosine-similar gallery entry shares their label.
// Probes whose label never appears in the gallery count as misses and are tallied.
inline RankResult rank1(const FeatureSet& gallery, const std::vector<int>& gallery_labels, const FeatureSet& probes,
                        const std::vector<int>& probe_labels) {
  if (gallery.size() != gallery_labels.size() || probes.size() != probe_labels.size())
    throw std::invalid_argument("rank1: embeddings and labels differ in length");
  if (gallery.empty() || probes.empty()) throw std::invalid_argument("rank1: empty gallery or probe set");
  RankResult r;
  std::size_t hits = 0;
  for (std::size_t p = 0; p < probes.size(); ++p) {
    if (std::find(gallery_labels.begin(), gallery_labels.end(), probe_labels[p]) == gallery_labels.end())
      ++r.probes_without_gallery_label;
    std::size_t best = 0;
    double best_s = -std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < gallery.size(); ++g) {
      const double s = cosine(probes[p], gallery[g]);
      if (s > best_s) {
        best_s = s;
        best = g;
      }
    }
    if (gallery_labels[best] == probe_labels[p]) ++hits;
  }
  r.rank1 = static_cast<double>(hits) / static_cast<double>(probes.size());
  return r;
}

// Genuine = same label, impostor = different label, over all probe x gallery pairs.
inline ScorePair score_pairs(const FeatureSet& gallery, const std::vector<int>& gallery_labels, const FeatureSet& probes,
                             const std::vector<int>& probe_labels) {
  ScorePair sp;
  for (std::size_t p = 0; p < probes.size(); ++p)
    for (std::size_t g = 0; g < gallery.size(); ++g)
      (probe_labels[p] == gallery_labels[g] ? sp.genuine : sp.impostor).push_back(cosine(probes[p], gallery[g]));
  return sp;
}

// ---------------------------------------------------------------- report

struct EvalReport {
  static constexpr int kSchemaVersion = 1;
  double ssim_mean = 0;
  double fid = 0;
  double rank1 = 0;
  std::map<double, double> vr_at_far{{0.001, 0.0}, {0.01, 0.0}};
  std::size_t n_pairs = 0;
  std::string feature_extractor;
  nlohmann::json config;  // snapshot of the settings that produced the numbers
  std::string config_hash;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema_version"] = kSchemaVersion;
    j["ssim_mean"] = ssim_mean;
    j["fid"] = fid;
    j["rank1"] = rank1;
    j["vr_at_far"] = {{"0.001", vr_at_far.at(0.001)}, {"0.01", vr_at_far.at(0.01)}};
    j["n_pairs"] = n_pairs;
    j["feature_extractor"] = feature_extractor;
    j["config_hash"] = config_hash;
    j["config"] = config;
    return j;
  }

  static EvalReport from_json(const nlohmann::json& j) {
    if (j.at("schema_version").get<int>() != kSchemaVersion) throw std::runtime_error("unsupported report schema version");
    EvalReport r;
    r.ssim_mean = j.at("ssim_mean").get<double>();
    r.fid = j.at("fid").get<double>();
    r.rank1 = j.at("rank1").get<double>();
    r.vr_at_far[0.001] = j.at("vr_at_far").at("0.001").get<double>();
    r.vr_at_far[0.01] = j.at("vr_at_far").at("0.01").get<double>();
    r.n_pairs = j.at("n_pairs").get<std::size_t>();
    r.feature_extractor = j.at("feature_extractor").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.config = j.at("config");
    return r;
  }

  // Column layout follows the usual VR / SSIM / FID results table.
  std::string to_table() const {
    std::ostringstream os;
    os << std::fixed;
    os << "| Variant | VR@FAR=0.1% (up) | VR@FAR=1% (up) | SSIM (up) | FID (down) | Rank-1 (up) |\n";
    os << "|---------|------------------|----------------|-----------|------------|-------------|\n";
    os << "| ours    | " << std::setprecision(2) << std::setw(16) << 100.0 * vr_at_far.at(0.001) << " | " << std::setw(14)
       << 100.0 * vr_at_far.at(0.01) << " | " << std::setprecision(4) << std::setw(9) << ssim_mean << " | "
       << std::setprecision(2) << std::setw(10) << fid << " | " << std::setprecision(2) << std::setw(11) << 100.0 * rank1
       << " |\n";
    os << "\npairs: " << n_pairs << "  feature extractor: " << feature_extractor << "  config: " << config_hash << "\n";
    return os.str();
  }
};

}  // namespace lapig
