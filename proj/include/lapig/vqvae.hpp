#pragma once

// Vector-quantised autoencoder shared by visible and thermal images.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "lapig/hashing.hpp"
#include "lapig/image_io.hpp"
#include "lapig/nn.hpp"

namespace lapig {

template <class T>
struct Quantized {
  Var<T> straight_through;  // value = codebook entries, gradient = identity onto z
  Var<T> penalty;           // mean ||sg(z) - e||^2 + commitment * mean ||z - sg(e)||^2
  std::vector<std::size_t> indices;
};

// Nearest codebook row (Euclidean) for every spatial position of z (d,h,w).
template <class T>
std::vector<std::size_t> nearest_codes(const Tensor<T>& z, const Tensor<T>& codebook) {
  if (codebook.rank() != 2 || codebook.dim(0) == 0) throw std::invalid_argument("codebook is empty");
  const std::size_t k = codebook.dim(0), d = codebook.dim(1);
  if (z.rank() != 3 || z.dim(0) != d)
    throw ShapeError("latent " + shape_str(z.shape()) + " does not match codebook dimension " + std::to_string(d));
  const std::size_t n = z.dim(1) * z.dim(2);
  std::vector<std::size_t> out(n);
  for (std::size_t p = 0; p < n; ++p) {
    T best = std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      T dist = 0;
      for (std::size_t c = 0; c < d; ++c) {
        const T diff = z[c * n + p] - codebook[j * d + c];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        out[p] = j;
      }
    }
  }
  return out;
}

// Forward value is `value`; the incoming gradient flows unchanged to z.
template <class T>
Var<T> straight_through(const Var<T>& z, Tensor<T> value) {
  require_same_shape(z.shape(), value.shape(), "straight_through");
  return detail::make_result<T>(std::move(value), {z}, [z](const Tensor<T>& g) { z.node()->grad_buffer() += g; });
}

template <class T>
Quantized<T> vector_quantize(const Var<T>& z, const Var<T>& codebook, T commitment = T(0.25)) {
  Quantized<T> q;
  q.indices = nearest_codes(z.value(), codebook.value());
  const std::size_t d = z.shape()[0], h = z.shape()[1], w = z.shape()[2];
  Var<T> e = reshape(transpose(embedding(codebook, q.indices)), {d, h, w});
  q.straight_through = straight_through(z, e.value());
  q.penalty = add(mse(constant(z.value()), e), scale(mse(z, constant(e.value())), commitment));
  return q;
}

struct VqVaeConfig {
  std::size_t in_channels = 3;
  std::size_t factor = 8;  // spatial downsampling, a power of two
  std::size_t codebook_size = 256;
  std::size_t code_dim = 4;
  std::vector<std::size_t> widths{32, 64, 64};  // channels at full res, then per downsampling stage
  double commitment = 0.25;

  nlohmann::json to_json() const {
    return {{"in_channels", in_channels}, {"factor", factor},   {"codebook_size", codebook_size},
            {"code_dim", code_dim},       {"widths", widths},   {"commitment", commitment}};
  }
  static VqVaeConfig from_json(const nlohmann::json& j) {
    VqVaeConfig c;
    c.in_channels = j.at("in_channels");
    c.factor = j.at("factor");
    c.codebook_size = j.at("codebook_size");
    c.code_dim = j.at("code_dim");
    c.widths = j.at("widths").get<std::vector<std::size_t>>();
    c.commitment = j.at("commitment");
    return c;
  }
};

template <class T>
class VqVae {
 public:
  VqVae(VqVaeConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.factor == 0 || (cfg_.factor & (cfg_.factor - 1))) throw std::invalid_argument("factor must be a power of two");
    if (cfg_.codebook_size == 0) throw std::invalid_argument("codebook is empty");
    if (cfg_.code_dim == 0) throw std::invalid_argument("code dimension must be positive");
    stages_ = 0;
    for (std::size_t f = cfg_.factor; f > 1; f /= 2) ++stages_;
    if (cfg_.widths.size() < 2) throw std::invalid_argument("need at least two widths");
    Rng rng(seed);
    auto width = [&](std::size_t s) { return cfg_.widths[std::min(s, cfg_.widths.size() - 1)]; };
    enc_in_ = Conv2d<T>(params_, "enc.in", cfg_.in_channels, width(0), 3, 1, 1, rng);
    for (std::size_t s = 0; s < stages_; ++s)
      enc_down_.emplace_back(params_, "enc.down" + std::to_string(s), width(s), width(s + 1), 3, 2, 1, rng);
    enc_mid_ = Conv2d<T>(params_, "enc.mid", width(stages_), width(stages_), 3, 1, 1, rng);
    enc_out_ = Conv2d<T>(params_, "enc.out", width(stages_), cfg_.code_dim, 1, 1, 0, rng);
    codebook_ = params_.add("codebook", rand_uniform<T>({cfg_.codebook_size, cfg_.code_dim}, rng,
                                                        -1.0 / static_cast<double>(cfg_.codebook_size),
                                                        1.0 / static_cast<double>(cfg_.codebook_size)));
    dec_in_ = Conv2d<T>(params_, "dec.in", cfg_.code_dim, width(stages_), 3, 1, 1, rng);
    dec_mid_ = Conv2d<T>(params_, "dec.mid", width(stages_), width(stages_), 3, 1, 1, rng);
    for (std::size_t s = stages_; s > 0; --s)
      dec_up_.emplace_back(params_, "dec.up" + std::to_string(s - 1), width(s), width(s - 1), 3, 1, 1, rng);
    dec_out_ = Conv2d<T>(params_, "dec.out", width(0), cfg_.in_channels, 3, 1, 1, rng);
  }

  const VqVaeConfig& config() const { return cfg_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }
  const Var<T>& codebook() const { return codebook_; }

  Var<T> encode(const Var<T>& x) const {
    const auto& s = x.shape();
    if (s.size() != 3 || s[0] != cfg_.in_channels) throw ShapeError("encoder expects (" + std::to_string(cfg_.in_channels) + ",H,W), got " + shape_str(s));
    if (s[1] % cfg_.factor || s[2] % cfg_.factor)
      throw std::invalid_argument("dims not divisible by factor " + std::to_string(cfg_.factor) + ": " + shape_str(s));
    Var<T> h = silu(enc_in_(x));
    for (const auto& c : enc_down_) h = silu(c(h));
    h = silu(enc_mid_(h));
    return enc_out_(h);
  }

  Quantized<T> quantize(const Var<T>& z) const { return vector_quantize(z, codebook_, static_cast<T>(cfg_.commitment)); }

  Var<T> decode(const Var<T>& zq) const {
    if (zq.value().rank() != 3 || zq.shape()[0] != cfg_.code_dim)
      throw ShapeError("decoder expects (" + std::to_string(cfg_.code_dim) + ",h,w), got " + shape_str(zq.shape()));
    Var<T> h = silu(dec_in_(zq));
    h = silu(dec_mid_(h));
    for (const auto& c : dec_up_) h = silu(c(upsample2x(h)));
    return lapig::tanh(dec_out_(h));
  }

  // Encoder output snapped to the codebook, no graph.
  Tensor<T> encode_quantized(const Tensor<T>& x) const { return quantize(encode(constant(x))).straight_through.value(); }
  Tensor<T> reconstruct(const Tensor<T>& x) const { return decode(constant(encode_quantized(x))).value(); }
  // Replaces every latent vector by its nearest codebook entry.
  Tensor<T> snap(const Tensor<T>& z) const { return quantize(constant(z)).straight_through.value(); }

  std::string weights_hash() const { return params_.hash(); }

 private:
  VqVaeConfig cfg_;
  std::size_t stages_ = 0;
  ParameterSet<T> params_;
  Conv2d<T> enc_in_, enc_mid_, enc_out_, dec_in_, dec_mid_, dec_out_;
  std::vector<Conv2d<T>> enc_down_, dec_up_;
  Var<T> codebook_;
};

struct VqTrainConfig {
  std::size_t epochs = 500;
  double lr = 4.5e-6;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  bool init_codebook_from_data = true;
};

struct VqEpochStats {
  std::size_t epoch = 0;
  double loss = 0;       // reconstruction + quantisation penalty
  double recon_mse = 0;
  std::size_t codes_used = 0;
};

// Trains on every image (C,H,W) in [-1,1]; single-channel inputs are replicated.
template <class T>
std::vector<VqEpochStats> train_vqvae(VqVae<T>& model, const std::vector<Tensor<T>>& images, const VqTrainConfig& cfg,
                                      const std::function<void(const VqEpochStats&)>& on_epoch = {}) {
  if (images.empty()) throw std::invalid_argument("empty dataset");
  if (cfg.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<Tensor<T>> data;
  data.reserve(images.size());
  for (const auto& im : images) data.push_back(im.dim(0) == 1 && model.config().in_channels == 3 ? replicate_to_rgb(im) : im);
  Rng rng(cfg.seed);
  if (cfg.init_codebook_from_data) {
    // Seed every entry with an encoder output so that no entry starts far from the data.
    auto& cb = model.parameters().get("codebook").mutable_value();
    const std::size_t k = cb.dim(0), d = cb.dim(1);
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    for (std::size_t j = 0; j < k;) {
      const Tensor<T> z = model.encode(constant(data[pick(rng)])).value();
      const std::size_t n = z.dim(1) * z.dim(2);
      std::uniform_int_distribution<std::size_t> pos(0, n - 1);
      for (std::size_t r = 0; r < std::min<std::size_t>(4, k - j); ++r, ++j) {
        const std::size_t p = pos(rng);
        for (std::size_t c = 0; c < d; ++c) cb[j * d + c] = z[c * n + p];
      }
    }
  }
  AdamConfig ac;
  ac.lr = cfg.lr;
  Adam<T> opt(model.parameters(), ac);
  std::vector<std::size_t> order(data.size());
  std::vector<VqEpochStats> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    VqEpochStats st;
    st.epoch = epoch + 1;
    std::vector<bool> used(model.config().codebook_size, false);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      const T w = T(1) / static_cast<T>(e - b);
      for (std::size_t i = b; i < e; ++i) {
        Var<T> z = model.encode(constant(data[order[i]]));
        auto q = model.quantize(z);
        for (std::size_t idx : q.indices) used[idx] = true;
        Var<T> recon = mse(model.decode(q.straight_through), constant(data[order[i]]));
        Var<T> loss = scale(add(recon, q.penalty), w);
        loss.backward();
        st.recon_mse += static_cast<double>(recon.item());
        st.loss += static_cast<double>(recon.item() + q.penalty.item());
      }
      opt.step();
    }
    st.recon_mse /= static_cast<double>(data.size());
    st.loss /= static_cast<double>(data.size());
    st.codes_used = static_cast<std::size_t>(std::count(used.begin(), used.end(), true));
    history.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return history;
}

template <class T>
std::size_t codebook_usage(const VqVae<T>& model, const std::vector<Tensor<T>>& images) {
  std::vector<bool> used(model.config().codebook_size, false);
  for (const auto& im : images) {
    const Tensor<T> x = im.dim(0) == 1 && model.config().in_channels == 3 ? replicate_to_rgb(im) : im;
    for (std::size_t idx : nearest_codes(model.encode(constant(x)).value(), model.codebook().value())) used[idx] = true;
  }
  return static_cast<std::size_t>(std::count(used.begin(), used.end(), true));
}

}  // namespace lapig
