#pragma once

// Face identity embedding: a small conv backbone trained with an additive
// angular margin softmax, plus helpers to turn an embedding into a token.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "lapig/image_io.hpp"
#include "lapig/nn.hpp"

namespace lapig {

inline constexpr std::size_t kIdentityDim = 512;

struct ArcFaceConfig {
  double scale = 64.0;
  double margin = 0.5;  // radians
  std::size_t num_classes = 1;
};

namespace detail {

// Margin-adjusted target cosine. Falls back to cos(theta) - m sin(m) once
// theta + m would pass pi so the logit stays monotone in cos(theta).
inline double margin_cos(double c, double m, double* dc) {
  c = std::clamp(c, -1.0, 1.0);
  if (c >= -std::cos(m)) {
    const double s = std::sqrt(std::clamp(1.0 - c * c, 0.0, 1.0));
    if (dc) *dc = std::cos(m) + (s > 1e-12 ? c * std::sin(m) / s : 0.0);
    return c * std::cos(m) - s * std::sin(m);
  }
  if (dc) *dc = 1.0;
  return c - m * std::sin(m);
}

}  // namespace detail

// cos (N, C) -> logits s*cos with the target column replaced by s*cos(theta + m).
template <class T>
Var<T> margin_logits(const Var<T>& cosines, const std::vector<std::size_t>& labels, double s, double m) {
  if (cosines.value().rank() != 2) throw ShapeError("margin_logits expects (N, C)");
  const std::size_t n = cosines.shape()[0], c = cosines.shape()[1];
  if (labels.size() != n) throw ShapeError("margin_logits: label count mismatch");
  for (std::size_t y : labels)
    if (y >= c) throw std::out_of_range("label " + std::to_string(y) + " out of range for " + std::to_string(c) + " classes");
  Tensor<T> out(cosines.shape());
  auto slope = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double v = static_cast<double>(cosines.value()[i * c + j]);
      out[i * c + j] = static_cast<T>(s * (j == labels[i] ? detail::margin_cos(v, m, &(*slope)[i]) : v));
    }
  return detail::make_result<T>(std::move(out), {cosines}, [cosines, labels, slope, s, n, c](const Tensor<T>& g) {
    auto& gc = cosines.node()->grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j)
        gc[i * c + j] += static_cast<T>(s * (j == labels[i] ? (*slope)[i] : 1.0)) * g[i * c + j];
  });
}

// Mean margin softmax loss. embeddings (N, D) and class_weights (C, D) are
// expected to be unit rows so that their products are cosines.
template <class T>
Var<T> arcface_loss(const Var<T>& embeddings, const std::vector<std::size_t>& labels, const Var<T>& class_weights,
                    const ArcFaceConfig& cfg) {
  if (class_weights.shape().at(0) != cfg.num_classes) throw ShapeError("classifier rows do not match num_classes");
  Var<T> cosines = matmul(embeddings, class_weights, false, true);
  return cross_entropy_rows(margin_logits(cosines, labels, cfg.scale, cfg.margin), labels);
}

// Appends zeros to reach token_dim.
template <class T>
Tensor<T> pad_identity(const Tensor<T>& u, std::size_t token_dim) {
  if (u.rank() != 1) throw ShapeError("identity vector must be rank 1");
  if (token_dim < u.size())
    throw std::invalid_argument("token_dim " + std::to_string(token_dim) + " is smaller than the identity dimension " + std::to_string(u.size()));
  Tensor<T> out({token_dim});
  std::copy(u.data(), u.data() + u.size(), out.data());
  return out;
}

struct IdentityEncoderConfig {
  std::vector<std::size_t> widths{16, 32, 64, 64};  // one stride-2 block each
  std::size_t embed_dim = kIdentityDim;
  std::size_t num_classes = 1;
  double scale = 64.0;
  double margin = 0.5;

  ArcFaceConfig arcface() const { return {scale, margin, num_classes}; }

  nlohmann::json to_json() const {
    return {{"widths", widths}, {"embed_dim", embed_dim}, {"num_classes", num_classes}, {"scale", scale}, {"margin", margin}};
  }
  static IdentityEncoderConfig from_json(const nlohmann::json& j) {
    IdentityEncoderConfig c;
    c.widths = j.at("widths").get<std::vector<std::size_t>>();
    c.embed_dim = j.at("embed_dim");
    c.num_classes = j.at("num_classes");
    c.scale = j.at("scale");
    c.margin = j.at("margin");
    return c;
  }
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
class IdentityEncoder {
 public:
  IdentityEncoder(IdentityEncoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.widths.empty()) throw std::invalid_argument("identity backbone needs at least one block");
    if (cfg_.num_classes == 0) throw std::invalid_argument("num_classes must be positive");
    Rng rng(seed);
    std::size_t in = 3;
    for (std::size_t b = 0; b < cfg_.widths.size(); ++b) {
      const std::string name = "block" + std::to_string(b);
      const std::size_t w = cfg_.widths[b];
      convs_.emplace_back(params_, name + ".conv1", in, w, 3, 1, 1, rng);
      convs_.emplace_back(params_, name + ".conv2", w, w, 3, 2, 1, rng);
      norms_.emplace_back(params_, name + ".norm", w, std::min<std::size_t>(4, w));
      in = w;
    }
    head_ = Linear<T>(params_, "head", in, cfg_.embed_dim, rng);
    classes_ = params_.add("classifier", randn<T>({cfg_.num_classes, cfg_.embed_dim}, rng));
  }

  const IdentityEncoderConfig& config() const { return cfg_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }
  const Var<T>& class_weights() const { return classes_; }

  // Pooled backbone activations, the layer before the embedding head.
  Var<T> features(const Var<T>& x) const {
    if (x.value().rank() != 3) throw ShapeError("identity encoder expects (C,H,W), got " + shape_str(x.shape()));
    Var<T> h = x.shape()[0] == 1 ? constant(replicate_to_rgb(x.value())) : x;
    if (h.shape()[0] != 3) throw ShapeError("identity encoder expects 1 or 3 channels");
    for (std::size_t b = 0; b < norms_.size(); ++b) {
      h = silu(convs_[2 * b](h));
      h = silu(norms_[b](convs_[2 * b + 1](h)));
    }
    return global_avg_pool(h);
  }

  // Unnormalised embedding (embed_dim).
  Var<T> embed(const Var<T>& x) const { return head_(features(x)); }

  // Unit-norm identity vector; throws on non-finite activations.
  Tensor<T> extract(const Tensor<T>& image) const {
    Tensor<T> e = embed(constant(image)).value();
    if (!e.all_finite()) throw NonFiniteError("identity encoder produced non-finite activations");
    double n2 = 0;
    for (T v : e.values()) n2 += static_cast<double>(v) * v;
    const double n = std::sqrt(n2);
    if (!(n > 0) || !std::isfinite(n)) throw NonFiniteError("identity embedding has zero or non-finite norm");
    for (auto& v : e.values()) v = static_cast<T>(v / n);
    return e;
  }

  Tensor<T> feature_vector(const Tensor<T>& image) const {
    Tensor<T> f = features(constant(image)).value();
    if (!f.all_finite()) throw NonFiniteError("identity encoder produced non-finite features");
    return f;
  }

  // Margin loss for a batch of images with class labels.
  Var<T> loss(const std::vector<Tensor<T>>& images, const std::vector<std::size_t>& labels) const {
    std::vector<Var<T>> rows;
    rows.reserve(images.size());
    for (const auto& im : images) rows.push_back(reshape(embed(constant(im)), {1, cfg_.embed_dim}));
    return arcface_loss(l2_normalize_rows(concat(rows)), labels, l2_normalize_rows(classes_), cfg_.arcface());
  }

 private:
  IdentityEncoderConfig cfg_;
  ParameterSet<T> params_;
  std::vector<Conv2d<T>> convs_;
  std::vector<GroupNorm<T>> norms_;
  Linear<T> head_;
  Var<T> classes_;
};

template <class T>
Tensor<T> extract_identity(const IdentityEncoder<T>& enc, const Tensor<T>& image) {
  return enc.extract(image);
}

struct IdentityTrainConfig {
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  int max_shift = 3;  // random translation augmentation, pixels
};

// Shifts by (dy, dx), filling exposed borders with edge pixels.
template <class T>
Tensor<T> shift_image(const Tensor<T>& x, int dy, int dx) {
  const long c = static_cast<long>(x.dim(0)), h = static_cast<long>(x.dim(1)), w = static_cast<long>(x.dim(2));
  Tensor<T> out(x.shape());
  for (long k = 0; k < c; ++k)
    for (long y = 0; y < h; ++y)
      for (long xx = 0; xx < w; ++xx) {
        const long sy = std::clamp(y - dy, 0L, h - 1), sx = std::clamp(xx - dx, 0L, w - 1);
        out[static_cast<std::size_t>((k * h + y) * w + xx)] = x[static_cast<std::size_t>((k * h + sy) * w + sx)];
      }
  return out;
}

template <class T>
std::vector<double> train_identity_encoder(IdentityEncoder<T>& enc, const std::vector<Tensor<T>>& images,
                                           const std::vector<std::size_t>& labels, const IdentityTrainConfig& cfg,
                                           const std::function<void(std::size_t, double)>& on_epoch = {}) {
  if (images.empty()) throw std::invalid_argument("empty dataset");
  if (images.size() != labels.size()) throw std::invalid_argument("image and label counts differ");
  for (std::size_t y : labels)
    if (y >= enc.config().num_classes) throw std::out_of_range("label out of range");
  Rng rng(cfg.seed);
  AdamConfig ac;
  ac.lr = cfg.lr;
  Adam<T> opt(enc.parameters(), ac);
  std::uniform_int_distribution<int> shift(-cfg.max_shift, cfg.max_shift);
  std::vector<std::size_t> order(images.size());
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<Tensor<T>> batch;
      std::vector<std::size_t> ys;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) {
        const int dy = shift(rng), dx = shift(rng);
        batch.push_back(cfg.max_shift > 0 ? shift_image(images[order[i]], dy, dx) : images[order[i]]);
        ys.push_back(labels[order[i]]);
      }
      Var<T> l = enc.loss(batch, ys);
      l.backward();
      opt.step();
      total += static_cast<double>(l.item());
      ++batches;
    }
    history.push_back(total / static_cast<double>(batches));
    if (on_epoch) on_epoch(epoch + 1, history.back());
  }
  return history;
}

// Mean intra-identity minus mean inter-identity cosine over all pairs.
template <class T>
double identity_margin(const std::vector<Tensor<T>>& embeddings, const std::vector<int>& ids) {
  double intra = 0, inter = 0;
  std::size_t ni = 0, ne = 0;
  for (std::size_t i = 0; i < embeddings.size(); ++i)
    for (std::size_t j = i + 1; j < embeddings.size(); ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < embeddings[i].size(); ++k) dot += static_cast<double>(embeddings[i][k]) * embeddings[j][k];
      if (ids[i] == ids[j]) {
        intra += dot;
        ++ni;
      } else {
        inter += dot;
        ++ne;
      }
    }
  if (!ni || !ne) throw std::invalid_argument("identity margin needs both same-identity and different-identity pairs");
  return intra / static_cast<double>(ni) - inter / static_cast<double>(ne);
}

}  // namespace lapig
