#pragma once

// Visible-to-thermal translation by latent diffusion. Both modalities go
// through the shared, frozen VQ-VAE encoder; the denoiser sees the noisy
// thermal latent stacked with the visible latent along channels.

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "lapig/diffusion.hpp"
#include "lapig/hashing.hpp"
#include "lapig/image_io.hpp"
#include "lapig/synthesis.hpp"
#include "lapig/vqvae.hpp"

namespace lapig {

class FrozenModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct V2tModelConfig {
  UNetConfig unet;
  ScheduleConfig schedule;

  V2tModelConfig() : V2tModelConfig(4) {}
  explicit V2tModelConfig(std::size_t code_dim) {
    unet.in_channels = 2 * code_dim;
    unet.out_channels = code_dim;
    unet.base_channels = 64;
    unet.channel_mults = {1, 2};
    unet.attention_levels = {false, false};
    unet.mode = ConditioningMode::channel_concat;
  }

  nlohmann::json to_json() const { return {{"unet", unet_config_json(unet)}, {"schedule", schedule.to_json()}}; }
  static V2tModelConfig from_json(const nlohmann::json& j) {
    V2tModelConfig c;
    c.unet = unet_config_from_json(j.at("unet"));
    c.schedule = ScheduleConfig::from_json(j.at("schedule"));
    return c;
  }
};

template <class T>
struct V2tModel {
  V2tModelConfig config;
  UNet<T> unet;
  NoiseSchedule schedule;
  double latent_scale = 1.0;  // latents are multiplied by this before diffusion
  std::string vq_hash;        // VQ-VAE weights the model was trained against

  V2tModel(const V2tModelConfig& cfg, std::uint64_t seed)
      : config(cfg), unet(cfg.unet, derive_seed(seed, "v2t.unet")), schedule(cfg.schedule.make()) {
    if (cfg.unet.mode != ConditioningMode::channel_concat) throw std::invalid_argument("translation denoiser uses channel concatenation");
    if (cfg.unet.in_channels != 2 * cfg.unet.out_channels)
      throw std::invalid_argument("translation denoiser needs 2d input channels for d latent channels");
  }

  void require_vq(const VqVae<T>& vq) const {
    if (vq.config().code_dim != config.unet.out_channels) throw ShapeError("VQ-VAE latent width does not match the denoiser");
    if (!vq_hash.empty() && vq.weights_hash() != vq_hash)
      throw FrozenModelError("VQ-VAE weights differ from the ones the translator was trained against");
  }
};

struct PairedImage {
  Tensor<float> visible;  // (3,H,W)
  Tensor<float> thermal;  // (1,H,W) or (3,H,W)
};

struct V2tTrainConfig {
  std::size_t epochs = 300;
  double lr = 2e-6;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
};

struct V2tEpochStats {
  std::size_t epoch = 0;
  double loss = 0;
};

namespace detail {

template <class T>
Tensor<T> as_rgb(const Tensor<T>& x) {
  return x.dim(0) == 1 ? replicate_to_rgb(x) : x;
}

template <class T>
Tensor<T> encode_latent(const VqVae<T>& vq, const Tensor<T>& image, double scale) {
  return vq.encode(constant(as_rgb(image))).value() * static_cast<T>(scale);
}

}  // namespace detail

// Randomness protocol, one stream seeded with cfg.seed: per epoch shuffle the
// pairs, then per pair draw t ~ U{1..T} and eps ~ N(0, I) of the latent shape.
template <class T>
std::vector<V2tEpochStats> train_v2t(V2tModel<T>& model, const VqVae<T>& vq, const std::vector<PairedImage>& pairs,
                                     const V2tTrainConfig& cfg, const std::function<void(const V2tEpochStats&)>& on_epoch = {}) {
  if (pairs.empty()) throw std::invalid_argument("no training pairs");
  if (cfg.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  model.require_vq(vq);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    if (p.visible.empty() || p.thermal.empty() || p.visible.rank() != 3 || p.thermal.rank() != 3 ||
        p.visible.dim(1) != p.thermal.dim(1) || p.visible.dim(2) != p.thermal.dim(2))
      throw std::invalid_argument("pair " + std::to_string(i) + " is not a matching visible/thermal pair");
  }
  const std::string hash_before = vq.weights_hash();

  // The encoder is frozen, so latents are computed once.
  std::vector<Tensor<T>> cond, target;
  double sq = 0;
  std::size_t n = 0;
  for (const auto& p : pairs) {
    cond.push_back(detail::encode_latent(vq, p.visible.template cast<T>(), 1.0));
    target.push_back(detail::encode_latent(vq, p.thermal.template cast<T>(), 1.0));
    for (const auto* z : {&cond.back(), &target.back()})
      for (T v : z->values()) sq += static_cast<double>(v) * v, ++n;
  }
  model.latent_scale = 1.0 / std::max(std::sqrt(sq / static_cast<double>(n)), 1e-8);
  for (auto* set : {&cond, &target})
    for (auto& z : *set) z *= static_cast<T>(model.latent_scale);

  AdamConfig ac;
  ac.lr = cfg.lr;
  Adam<T> opt(model.unet.parameters(), ac);
  Rng rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick_t(1, model.schedule.steps());
  std::vector<std::size_t> order(pairs.size());
  std::vector<V2tEpochStats> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    V2tEpochStats st;
    st.epoch = epoch + 1;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      const T w = T(1) / static_cast<T>(e - b);
      for (std::size_t i = b; i < e; ++i) {
        const std::size_t k = order[i];
        const std::size_t t = pick_t(rng);
        const Tensor<T> eps = randn<T>(target[k].shape(), rng);
        Var<T> loss = diffusion_loss<T>(model.unet, target[k], {{}, constant(cond[k])}, t, eps, model.schedule);
        st.loss += static_cast<double>(loss.item());
        scale(loss, w).backward();
      }
      opt.step();
    }
    st.loss /= static_cast<double>(pairs.size());
    history.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  if (vq.weights_hash() != hash_before) throw FrozenModelError("VQ-VAE weights changed during translation training");
  model.vq_hash = hash_before;
  return history;
}

// Samples a thermal latent conditioned on the visible latent, snaps it to the
// codebook, decodes and averages channels. Returns (1,H,W) in [-1,1].
template <class T>
Tensor<T> translate(const Tensor<T>& visible, const VqVae<T>& vq, const V2tModel<T>& model, std::uint64_t seed) {
  model.require_vq(vq);
  const Tensor<T> c = detail::encode_latent(vq, visible, model.latent_scale);
  Tensor<T> z = ddpm_sample<T>(model.unet, {{}, constant(c)}, c.shape(), model.schedule, seed);
  z *= static_cast<T>(1.0 / model.latent_scale);
  const Tensor<T> rgb = vq.decode(constant(vq.snap(z))).value();
  Tensor<T> out = channel_mean(rgb);
  for (auto& v : out.values()) v = std::clamp(v, T(-1), T(1));
  return out;
}

template <class T>
struct TranslationResult {
  std::optional<Tensor<T>> thermal;
  std::string error;
  bool ok() const { return thermal.has_value(); }
};

// Item i uses derive_seed(seed, "translate", i). A failing item is reported
// in place and the rest of the batch continues.
template <class T>
std::vector<TranslationResult<T>> translate_batch(const std::vector<Tensor<T>>& visibles, const VqVae<T>& vq,
                                                  const V2tModel<T>& model, std::uint64_t seed) {
  std::vector<TranslationResult<T>> out(visibles.size());
  for (std::size_t i = 0; i < visibles.size(); ++i) {
    try {
      out[i].thermal = translate(visibles[i], vq, model, derive_seed(seed, "translate", i));
    } catch (const std::exception& e) {
      out[i].error = e.what();
    }
  }
  return out;
}

// Pixelwise mean of a set of thermal images, the reference baseline.
template <class T>
Tensor<T> mean_image(const std::vector<Tensor<T>>& images) {
  if (images.empty()) throw std::invalid_argument("mean of no images");
  Tensor<double> acc(images[0].shape());
  for (const auto& im : images) {
    require_same_shape(im.shape(), acc.shape(), "mean_image");
    for (std::size_t i = 0; i < im.size(); ++i) acc[i] += static_cast<double>(im[i]);
  }
  acc *= 1.0 / static_cast<double>(images.size());
  return acc.template cast<T>();
}

}  // namespace lapig
