#pragma once

// Identity-preserving multi-view visible face generator.
//
// A pixel-space conditional denoiser reads a text context that carries the
// identity token. Training adds a structural-similarity pose term, measured
// on the one-step clean estimate, to the usual noise-prediction loss.

#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "lapig/conditioning.hpp"
#include "lapig/diffusion.hpp"
#include "lapig/hashing.hpp"
#include "lapig/identity.hpp"
#include "lapig/metrics.hpp"

namespace lapig {

// Mean local SSIM with uniform windows, built from differentiable ops.
// Agrees with metrics' ssim() up to floating-point rounding.
template <class T>
Var<T> ssim_var(const Var<T>& a, const Var<T>& b, const SsimParams& p = {}) {
  require_same_shape(a.shape(), b.shape(), "ssim");
  const std::size_t k = p.window;
  if (k == 0 || k % 2 == 0) throw std::invalid_argument("ssim window must be odd");
  const T c1 = static_cast<T>(p.c1()), c2 = static_cast<T>(p.c2());
  Var<T> ma = box_filter(a, k), mb = box_filter(b, k);
  Var<T> va = sub(box_filter(square(a), k), square(ma));
  Var<T> vb = sub(box_filter(square(b), k), square(mb));
  Var<T> cov = sub(box_filter(mul(a, b), k), mul(ma, mb));
  Var<T> num = mul(add_scalar(scale(mul(ma, mb), T(2)), c1), add_scalar(scale(cov, T(2)), c2));
  Var<T> den = mul(add_scalar(add(square(ma), square(mb)), c1), add_scalar(add(va, vb), c2));
  return mean(div(num, den));
}

struct PoseSet {
  std::vector<View> views;
  std::vector<Tensor<float>> images;
};

// -sum_i SSIM(generated_i, reference_i) over matching view labels.
template <class T>
Var<T> pose_loss(const std::vector<Var<T>>& generated, const std::vector<View>& gen_views,
                 const std::vector<Tensor<T>>& reference, const std::vector<View>& ref_views, const SsimParams& p = {}) {
  if (generated.size() != gen_views.size() || reference.size() != ref_views.size())
    throw std::invalid_argument("pose set images and labels differ in count");
  if (gen_views != ref_views) throw std::invalid_argument("pose sets have mismatched view labels");
  if (generated.empty()) throw std::invalid_argument("empty pose set");
  Var<T> total;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    require_same_shape(generated[i].shape(), reference[i].shape(), "pose_loss");
    Var<T> s = ssim_var(generated[i], constant(reference[i]), p);
    total = total.defined() ? add(total, s) : s;
  }
  return scale(total, T(-1));
}

struct ScheduleConfig {
  std::size_t steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  NoiseSchedule make() const { return NoiseSchedule(steps, beta_start, beta_end); }
  nlohmann::json to_json() const { return {{"steps", steps}, {"beta_start", beta_start}, {"beta_end", beta_end}}; }
  static ScheduleConfig from_json(const nlohmann::json& j) { return {j.at("steps"), j.at("beta_start"), j.at("beta_end")}; }
};

inline nlohmann::json unet_config_json(const UNetConfig& c) {
  return {{"in_channels", c.in_channels},   {"out_channels", c.out_channels}, {"base_channels", c.base_channels},
          {"channel_mults", c.channel_mults}, {"attention_levels", c.attention_levels}, {"time_dim", c.time_dim},
          {"time_hidden", c.time_hidden},   {"context_dim", c.context_dim},   {"attn_dim", c.attn_dim},
          {"groups", c.groups},             {"mode", to_string(c.mode)}};
}

inline ConditioningMode parse_conditioning_mode(const std::string& s) {
  for (auto m : {ConditioningMode::none, ConditioningMode::cross_attention, ConditioningMode::channel_concat, ConditioningMode::both})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown conditioning mode " + s);
}

inline UNetConfig unet_config_from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.in_channels = j.at("in_channels");
  c.out_channels = j.at("out_channels");
  c.base_channels = j.at("base_channels");
  c.channel_mults = j.at("channel_mults").get<std::vector<std::size_t>>();
  c.attention_levels = j.at("attention_levels").get<std::vector<bool>>();
  c.time_dim = j.at("time_dim");
  c.time_hidden = j.at("time_hidden");
  c.context_dim = j.at("context_dim");
  c.attn_dim = j.at("attn_dim");
  c.groups = j.at("groups");
  c.mode = parse_conditioning_mode(j.at("mode"));
  return c;
}

struct SynthesisModelConfig {
  UNetConfig unet;
  TextEncoderConfig text;
  ScheduleConfig schedule;

  SynthesisModelConfig() {
    unet.in_channels = 3;
    unet.out_channels = 3;
    unet.base_channels = 16;
    unet.channel_mults = {1, 2, 4};
    unet.attention_levels = {false, false, true};
    unet.context_dim = text.token_dim;
    unet.attn_dim = 64;
    unet.mode = ConditioningMode::cross_attention;
  }

  nlohmann::json to_json() const {
    return {{"unet", unet_config_json(unet)}, {"text", text.to_json()}, {"schedule", schedule.to_json()}};
  }
  static SynthesisModelConfig from_json(const nlohmann::json& j) {
    SynthesisModelConfig c;
    c.unet = unet_config_from_json(j.at("unet"));
    c.text = TextEncoderConfig::from_json(j.at("text"));
    c.schedule = ScheduleConfig::from_json(j.at("schedule"));
    return c;
  }
};

template <class T>
struct SynthesisModel {
  SynthesisModelConfig config;
  UNet<T> unet;
  TextEncoder<T> text;
  NoiseSchedule schedule;

  SynthesisModel(const SynthesisModelConfig& cfg, std::uint64_t seed)
      : config(cfg),
        unet(cfg.unet, derive_seed(seed, "synthesis.unet")),
        text(cfg.text, derive_seed(seed, "synthesis.text")),
        schedule(cfg.schedule.make()) {
    if (cfg.unet.mode != ConditioningMode::cross_attention) throw std::invalid_argument("synthesis generator uses cross-attention conditioning");
    if (cfg.unet.context_dim != cfg.text.token_dim) throw std::invalid_argument("generator context width must equal token_dim");
  }

  // Conditioning context for one view.
  Var<T> context(View view, const Caption& caption, const Tensor<T>& id_token, const ViewPrefixes& prefixes) const {
    return text.encode(customize_prompt(view, caption, prefixes), id_token).embeddings;
  }
};

struct SynthesisExample {
  int identity_id = 0;
  Tensor<float> id_image;                // image the identity vector is read from
  std::map<View, Tensor<float>> targets; // one visible image per view
  Caption caption;
};

struct SynthesisTrainConfig {
  std::size_t epochs = 300;
  double lr = 2e-6;
  double lambda_pose = 0.1;
  std::size_t batch_identities = 1;  // identities per optimiser step
  std::uint64_t seed = 0;
};

struct SynthesisEpochStats {
  std::size_t epoch = 0;
  double diffusion = 0;  // mean noise-prediction loss per view
  double pose = 0;       // mean pose loss per identity
  double total = 0;
  std::size_t skipped = 0;
};

// Identity token from the frozen identity encoder.
template <class T>
Tensor<T> identity_token(const IdentityEncoder<T>& id_encoder, const Tensor<T>& id_image, std::size_t token_dim) {
  return pad_identity(id_encoder.extract(id_image), token_dim);
}

// Randomness protocol, one stream seeded with cfg.seed: per epoch the
// identity order is shuffled; then per identity and per view (front, left,
// right, up) draw t ~ U{1..T} and eps ~ N(0, I) of the image shape.
template <class T>
std::vector<SynthesisEpochStats> train_synthesis(SynthesisModel<T>& model, const IdentityEncoder<T>& id_encoder,
                                                 const std::vector<SynthesisExample>& data, const SynthesisTrainConfig& cfg,
                                                 const std::function<void(const SynthesisEpochStats&)>& on_epoch = {},
                                                 const ViewPrefixes& prefixes = default_view_prefixes()) {
  if (cfg.lambda_pose < 0) throw std::invalid_argument("lambda_pose must be non-negative");
  if (cfg.batch_identities == 0) throw std::invalid_argument("batch_identities must be positive");
  std::vector<const SynthesisExample*> usable;
  std::size_t skipped = 0;
  for (const auto& ex : data) {
    bool complete = true;
    for (View v : kAllViews) complete = complete && ex.targets.count(v);
    if (complete)
      usable.push_back(&ex);
    else
      ++skipped;
  }
  if (usable.empty()) throw std::invalid_argument("no identity has all four view targets");

  // Identity tokens come from a frozen encoder, so compute them once.
  std::vector<Tensor<T>> tokens;
  for (const auto* ex : usable) tokens.push_back(identity_token(id_encoder, ex->id_image.template cast<T>(), model.text.config().token_dim));

  ParameterSet<T> all;
  all.attach_all("unet.", model.unet.parameters());
  all.attach_all("text.", model.text.parameters());
  AdamConfig ac;
  ac.lr = cfg.lr;
  Adam<T> opt(all, ac);
  Rng rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick_t(1, model.schedule.steps());
  std::vector<std::size_t> order(usable.size());
  std::vector<SynthesisEpochStats> history;
  const T view_weight = T(1) / static_cast<T>(kAllViews.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    SynthesisEpochStats st;
    st.epoch = epoch + 1;
    st.skipped = skipped;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_identities) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_identities);
      const T batch_weight = T(1) / static_cast<T>(e - b);
      for (std::size_t i = b; i < e; ++i) {
        const auto& ex = *usable[order[i]];
        std::vector<Var<T>> x0_hat;
        std::vector<Tensor<T>> refs;
        std::vector<View> views;
        Var<T> df_total;
        for (View v : kAllViews) {
          const Tensor<T> target = ex.targets.at(v).template cast<T>();
          const std::size_t t = pick_t(rng);
          const Tensor<T> eps = randn<T>(target.shape(), rng);
          Conditioning<T> cond{model.context(v, ex.caption, tokens[order[i]], prefixes), {}};
          auto terms = diffusion_terms<T>(model.unet, target, cond, t, eps, model.schedule);
          st.diffusion += static_cast<double>(terms.loss.item());
          df_total = df_total.defined() ? add(df_total, terms.loss) : terms.loss;
          if (cfg.lambda_pose > 0) {
            x0_hat.push_back(predict_x0(terms.x_t, terms.eps_pred, t, model.schedule));
            refs.push_back(target);
            views.push_back(v);
          }
        }
        Var<T> loss = scale(df_total, view_weight);
        if (cfg.lambda_pose > 0) {
          Var<T> pl = pose_loss(x0_hat, views, refs, views);
          st.pose += static_cast<double>(pl.item());
          loss = add(loss, scale(pl, static_cast<T>(cfg.lambda_pose)));
        }
        st.total += static_cast<double>(loss.item());
        scale(loss, batch_weight).backward();
      }
      opt.step();
    }
    const double n = static_cast<double>(order.size());
    st.diffusion /= n * static_cast<double>(kAllViews.size());
    st.pose /= n;
    st.total /= n;
    history.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return history;
}

// Generates one image per view. View i samples with derive_seed(seed, "view", i).
template <class T>
PoseSet synthesize_views(const Tensor<T>& id_image, const Caption& caption, const SynthesisModel<T>& model,
                         const IdentityEncoder<T>& id_encoder, std::uint64_t seed,
                         const ViewPrefixes& prefixes = default_view_prefixes()) {
  if (caption.text.empty()) throw std::invalid_argument("caption is empty");
  const Tensor<T> token = identity_token(id_encoder, id_image, model.text.config().token_dim);
  PoseSet out;
  const Shape shape{model.config.unet.out_channels, id_image.dim(1), id_image.dim(2)};
  for (std::size_t i = 0; i < kAllViews.size(); ++i) {
    const View v = kAllViews[i];
    Conditioning<T> cond{constant(model.context(v, caption, token, prefixes).value()), {}};
    Tensor<T> img = ddpm_sample<T>(model.unet, cond, shape, model.schedule, derive_seed(seed, "view", i));
    for (auto& x : img.values()) x = std::clamp(x, T(-1), T(1));
    out.views.push_back(v);
    out.images.push_back(img.template cast<float>());
  }
  return out;
}

}  // namespace lapig
