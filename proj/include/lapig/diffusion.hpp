#pragma once

#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lapig/autograd.hpp"
#include "lapig/nn.hpp"

namespace lapig {

// ---------------------------------------------------------------- schedule

class NoiseSchedule {
 public:
  // Linear betas from beta_start (t = 1) to beta_end (t = T).
  NoiseSchedule(std::size_t steps, double beta_start, double beta_end) : beta_start_(beta_start), beta_end_(beta_end) {
    if (steps == 0) throw std::invalid_argument("noise schedule needs T >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
      throw std::invalid_argument("noise schedule needs 0 < beta_start <= beta_end < 1");
    betas_.resize(steps);
    alphas_.resize(steps);
    alpha_bars_.resize(steps);
    double prod = 1.0;
    for (std::size_t i = 0; i < steps; ++i) {
      const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
      betas_[i] = beta_start + (beta_end - beta_start) * frac;
      alphas_[i] = 1.0 - betas_[i];
      prod *= alphas_[i];
      alpha_bars_[i] = prod;
    }
  }

  std::size_t steps() const { return betas_.size(); }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  // Timesteps are 1-based, t in [1, T].
  double beta(std::size_t t) const { return betas_[index(t)]; }
  double alpha(std::size_t t) const { return alphas_[index(t)]; }
  double alpha_bar(std::size_t t) const { return alpha_bars_[index(t)]; }

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

  void check_timestep(std::size_t t) const { (void)index(t); }

 private:
  std::size_t index(std::size_t t) const {
    if (t < 1 || t > betas_.size())
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(betas_.size()) + "]");
    return t - 1;
  }

  double beta_start_, beta_end_;
  std::vector<double> betas_, alphas_, alpha_bars_;
};

inline NoiseSchedule make_noise_schedule(std::size_t steps, double beta_start, double beta_end) {
  return NoiseSchedule(steps, beta_start, beta_end);
}

// sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps
template <class T>
Tensor<T> forward_diffuse(const Tensor<T>& z0, std::size_t t, const Tensor<T>& eps, const NoiseSchedule& schedule) {
  require_same_shape(z0.shape(), eps.shape(), "forward_diffuse");
  const double ab = schedule.alpha_bar(t);
  const T a = static_cast<T>(std::sqrt(ab)), b = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(z0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

// ---------------------------------------------------------------- denoiser contract

enum class ConditioningMode { none, cross_attention, channel_concat, both };

inline const char* to_string(ConditioningMode m) {
  switch (m) {
    case ConditioningMode::none: return "none";
    case ConditioningMode::cross_attention: return "cross_attention";
    case ConditioningMode::channel_concat: return "channel_concat";
    case ConditioningMode::both: return "both";
  }
  return "?";
}

// context: (L, D) token embeddings for cross-attention.
// concat: (C, h, w) latent stacked onto the noisy input along channels.
template <class T>
struct Conditioning {
  Var<T> context;
  Var<T> concat;
};

template <class T>
void check_conditioning(ConditioningMode mode, const Conditioning<T>& c) {
  const bool want_ctx = mode == ConditioningMode::cross_attention || mode == ConditioningMode::both;
  const bool want_cat = mode == ConditioningMode::channel_concat || mode == ConditioningMode::both;
  if (want_ctx != c.context.defined() || want_cat != c.concat.defined())
    throw std::invalid_argument(std::string("conditioning does not match denoiser mode ") + to_string(mode));
}

template <class T>
class DenoiserNetwork {
 public:
  virtual ~DenoiserNetwork() = default;
  virtual ConditioningMode conditioning_mode() const = 0;
  // Predicted noise, same shape as x_t.
  virtual Var<T> predict(const Var<T>& x_t, std::size_t t, const Conditioning<T>& cond) const = 0;
  virtual ParameterSet<T>& parameters() = 0;
  virtual const ParameterSet<T>& parameters() const = 0;
};

// ---------------------------------------------------------------- losses and sampling

template <class T>
struct DiffusionTerms {
  Var<T> loss;        // mean squared error between eps and the prediction
  Var<T> eps_pred;
  Tensor<T> x_t;
};

template <class T>
DiffusionTerms<T> diffusion_terms(const DenoiserNetwork<T>& net, const Tensor<T>& z0, const Conditioning<T>& cond,
                                  std::size_t t, const Tensor<T>& eps, const NoiseSchedule& schedule) {
  check_conditioning(net.conditioning_mode(), cond);
  DiffusionTerms<T> out;
  out.x_t = forward_diffuse(z0, t, eps, schedule);
  out.eps_pred = net.predict(constant(out.x_t), t, cond);
  require_same_shape(out.eps_pred.shape(), eps.shape(), "diffusion_loss prediction");
  out.loss = mse(out.eps_pred, constant(eps));
  return out;
}

template <class T>
Var<T> diffusion_loss(const DenoiserNetwork<T>& net, const Tensor<T>& z0, const Conditioning<T>& cond, std::size_t t,
                      const Tensor<T>& eps, const NoiseSchedule& schedule) {
  return diffusion_terms(net, z0, cond, t, eps, schedule).loss;
}

// One-step clean estimate (x_t - sqrt(1 - abar_t) * eps_pred) / sqrt(abar_t), differentiable in eps_pred.
template <class T>
Var<T> predict_x0(const Tensor<T>& x_t, const Var<T>& eps_pred, std::size_t t, const NoiseSchedule& schedule) {
  const double ab = schedule.alpha_bar(t);
  const T inv = static_cast<T>(1.0 / std::sqrt(ab));
  const T k = static_cast<T>(-std::sqrt(1.0 - ab) / std::sqrt(ab));
  return add(scale(eps_pred, k), constant(x_t * inv));
}

// Ancestral DDPM sampling with reverse variance sigma_t^2 = beta_t.
template <class T>
Tensor<T> ddpm_sample(const DenoiserNetwork<T>& net, const Conditioning<T>& cond, const Shape& shape,
                      const NoiseSchedule& schedule, std::uint64_t seed) {
  check_conditioning(net.conditioning_mode(), cond);
  Rng rng(seed);
  Tensor<T> x = randn<T>(shape, rng);
  for (std::size_t t = schedule.steps(); t >= 1; --t) {
    const Tensor<T> eps = net.predict(constant(x), t, cond).value();
    require_same_shape(eps.shape(), x.shape(), "ddpm_sample prediction");
    const double beta = schedule.beta(t);
    const double coef = beta / std::sqrt(1.0 - schedule.alpha_bar(t));
    const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] = static_cast<T>(inv_sqrt_alpha * (static_cast<double>(x[i]) - coef * static_cast<double>(eps[i])));
    if (t > 1) {
      const Tensor<T> z = randn<T>(shape, rng);
      const T sigma = static_cast<T>(std::sqrt(beta));
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += sigma * z[i];
    }
  }
  return x;
}

// ---------------------------------------------------------------- timestep embedding

template <class T>
Tensor<T> timestep_embedding(std::size_t t, std::size_t dim) {
  if (dim == 0 || dim % 2) throw std::invalid_argument("timestep embedding dim must be even");
  Tensor<T> e({dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e[i] = static_cast<T>(std::sin(static_cast<double>(t) * freq));
    e[half + i] = static_cast<T>(std::cos(static_cast<double>(t) * freq));
  }
  return e;
}

// ---------------------------------------------------------------- UNet

struct UNetConfig {
  std::size_t in_channels = 4;   // includes concatenated conditioning channels
  std::size_t out_channels = 4;
  std::size_t base_channels = 32;
  std::vector<std::size_t> channel_mults{1, 2};
  std::vector<bool> attention_levels{false, true};
  std::size_t time_dim = 128;
  std::size_t time_hidden = 128;
  std::size_t context_dim = 0;   // token width for cross-attention
  std::size_t attn_dim = 64;
  std::size_t groups = 8;
  ConditioningMode mode = ConditioningMode::none;
};

namespace detail {

inline std::size_t group_count(std::size_t want, std::size_t channels) { return std::gcd(want, channels); }

template <class T>
struct ResBlock {
  GroupNorm<T> norm1, norm2;
  Conv2d<T> conv1, conv2, skip;
  Linear<T> temb;
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(ParameterSet<T>& ps, const std::string& n, std::size_t in, std::size_t out, std::size_t tdim,
           std::size_t groups, Rng& rng) {
    norm1 = GroupNorm<T>(ps, n + ".norm1", in, group_count(groups, in));
    conv1 = Conv2d<T>(ps, n + ".conv1", in, out, 3, 1, 1, rng);
    temb = Linear<T>(ps, n + ".temb", tdim, out, rng);
    norm2 = GroupNorm<T>(ps, n + ".norm2", out, group_count(groups, out));
    conv2 = Conv2d<T>(ps, n + ".conv2", out, out, 3, 1, 1, rng);
    if (in != out) {
      has_skip = true;
      skip = Conv2d<T>(ps, n + ".skip", in, out, 1, 1, 0, rng);
    }
  }

  Var<T> operator()(const Var<T>& x, const Var<T>& t) const {
    Var<T> h = conv1(silu(norm1(x)));
    h = add_channel(h, temb(silu(t)));
    h = conv2(silu(norm2(h)));
    return add(h, has_skip ? skip(x) : x);
  }
};

template <class T>
struct CrossAttention {
  GroupNorm<T> norm;
  Linear<T> q, k, v, o;
  std::size_t attn_dim = 0;

  CrossAttention() = default;
  CrossAttention(ParameterSet<T>& ps, const std::string& n, std::size_t ch, std::size_t ctx_dim, std::size_t adim,
                 std::size_t groups, Rng& rng)
      : attn_dim(adim) {
    norm = GroupNorm<T>(ps, n + ".norm", ch, group_count(groups, ch));
    q = Linear<T>(ps, n + ".q", ch, adim, rng);
    k = Linear<T>(ps, n + ".k", ctx_dim, adim, rng);
    v = Linear<T>(ps, n + ".v", ctx_dim, adim, rng);
    o = Linear<T>(ps, n + ".o", adim, ch, rng);
  }

  Var<T> operator()(const Var<T>& x, const Var<T>& ctx) const {
    const auto& s = x.shape();
    Var<T> tokens = transpose(reshape(norm(x), {s[0], s[1] * s[2]}));  // (HW, C)
    Var<T> scores = scale(matmul(q(tokens), k(ctx), false, true), static_cast<T>(1.0 / std::sqrt(double(attn_dim))));
    Var<T> attended = o(matmul(softmax_rows(scores), v(ctx)));  // (HW, C)
    return add(x, reshape(transpose(attended), s));
  }
};

}  // namespace detail

template <class T>
class UNet final : public DenoiserNetwork<T> {
 public:
  UNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.channel_mults.empty()) throw std::invalid_argument("UNet needs at least one level");
    if (cfg.attention_levels.size() != cfg.channel_mults.size())
      throw std::invalid_argument("attention_levels must have one flag per level");
    const bool ctx = uses_context();
    if (ctx && cfg.context_dim == 0) throw std::invalid_argument("cross-attention mode needs context_dim");
    Rng rng(seed);
    auto& ps = params_;
    time1_ = Linear<T>(ps, "time.fc1", cfg.time_dim, cfg.time_hidden, rng);
    time2_ = Linear<T>(ps, "time.fc2", cfg.time_hidden, cfg.time_hidden, rng);
    const std::size_t levels = cfg.channel_mults.size();
    std::vector<std::size_t> ch(levels);
    for (std::size_t i = 0; i < levels; ++i) ch[i] = cfg.base_channels * cfg.channel_mults[i];
    conv_in_ = Conv2d<T>(ps, "conv_in", cfg.in_channels, ch[0], 3, 1, 1, rng);
    std::size_t prev = ch[0];
    for (std::size_t i = 0; i < levels; ++i) {
      const std::string n = "down" + std::to_string(i);
      down_res_.emplace_back(ps, n + ".res", prev, ch[i], cfg.time_hidden, cfg.groups, rng);
      if (ctx && cfg.attention_levels[i])
        down_attn_.emplace_back(ps, n + ".attn", ch[i], cfg.context_dim, cfg.attn_dim, cfg.groups, rng);
      else
        down_attn_.emplace_back();
      if (i + 1 < levels) down_sample_.emplace_back(ps, n + ".downsample", ch[i], ch[i], 3, 2, 1, rng);
      prev = ch[i];
    }
    mid_res_ = detail::ResBlock<T>(ps, "mid.res", prev, prev, cfg.time_hidden, cfg.groups, rng);
    if (ctx) mid_attn_ = detail::CrossAttention<T>(ps, "mid.attn", prev, cfg.context_dim, cfg.attn_dim, cfg.groups, rng);
    up_res_.resize(levels);
    up_attn_.resize(levels);
    up_sample_.resize(levels);
    for (std::size_t ii = levels; ii-- > 0;) {
      const std::string n = "up" + std::to_string(ii);
      up_res_[ii] = detail::ResBlock<T>(ps, n + ".res", 2 * ch[ii], ch[ii], cfg.time_hidden, cfg.groups, rng);
      if (ctx && cfg.attention_levels[ii])
        up_attn_[ii] = detail::CrossAttention<T>(ps, n + ".attn", ch[ii], cfg.context_dim, cfg.attn_dim, cfg.groups, rng);
      if (ii > 0) up_sample_[ii] = Conv2d<T>(ps, n + ".upsample", ch[ii], ch[ii - 1], 3, 1, 1, rng);
    }
    out_norm_ = GroupNorm<T>(ps, "out.norm", ch[0], detail::group_count(cfg.groups, ch[0]));
    conv_out_ = Conv2d<T>(ps, "out.conv", ch[0], cfg.out_channels, 3, 1, 1, rng);
  }

  ConditioningMode conditioning_mode() const override { return cfg_.mode; }
  ParameterSet<T>& parameters() override { return params_; }
  const ParameterSet<T>& parameters() const override { return params_; }
  const UNetConfig& config() const { return cfg_; }

  Var<T> predict(const Var<T>& x_t, std::size_t t, const Conditioning<T>& cond) const override {
    check_conditioning(cfg_.mode, cond);
    Var<T> x = cond.concat.defined() ? concat(x_t, cond.concat) : x_t;
    if (x.shape().at(0) != cfg_.in_channels)
      throw ShapeError("UNet expects " + std::to_string(cfg_.in_channels) + " input channels, got " + shape_str(x.shape()));
    const std::size_t levels = cfg_.channel_mults.size();
    const std::size_t div = std::size_t{1} << (levels - 1);
    if (x.shape()[1] % div || x.shape()[2] % div) throw ShapeError("UNet input dims must be divisible by " + std::to_string(div));

    Var<T> temb = time2_(silu(time1_(constant(timestep_embedding<T>(t, cfg_.time_dim)))));
    const Var<T>& ctx = cond.context;
    Var<T> h = conv_in_(x);
    std::vector<Var<T>> skips;
    for (std::size_t i = 0; i < levels; ++i) {
      h = down_res_[i](h, temb);
      if (down_attn_[i].attn_dim) h = down_attn_[i](h, ctx);
      skips.push_back(h);
      if (i + 1 < levels) h = down_sample_[i](h);
    }
    h = mid_res_(h, temb);
    if (mid_attn_.attn_dim) h = mid_attn_(h, ctx);
    for (std::size_t i = levels; i-- > 0;) {
      h = up_res_[i](concat(h, skips[i]), temb);
      if (up_attn_[i].attn_dim) h = up_attn_[i](h, ctx);
      if (i > 0) h = up_sample_[i](upsample2x(h));
    }
    return conv_out_(silu(out_norm_(h)));
  }

 private:
  bool uses_context() const {
    return cfg_.mode == ConditioningMode::cross_attention || cfg_.mode == ConditioningMode::both;
  }

  UNetConfig cfg_;
  ParameterSet<T> params_;
  Linear<T> time1_, time2_;
  Conv2d<T> conv_in_, conv_out_;
  GroupNorm<T> out_norm_;
  std::vector<detail::ResBlock<T>> down_res_, up_res_;
  std::vector<detail::CrossAttention<T>> down_attn_, up_attn_;
  std::vector<Conv2d<T>> down_sample_, up_sample_;
  detail::ResBlock<T> mid_res_;
  detail::CrossAttention<T> mid_attn_;
};

// ---------------------------------------------------------------- MLP denoiser

// Row-wise denoiser for vector data: x is (N, D), every row shares t.
template <class T>
class MlpDenoiser final : public DenoiserNetwork<T> {
 public:
  MlpDenoiser(std::size_t dim, std::size_t hidden, std::size_t time_dim, std::uint64_t seed) : time_dim_(time_dim) {
    Rng rng(seed);
    in_ = Linear<T>(params_, "in", dim, hidden, rng);
    time_ = Linear<T>(params_, "time", time_dim, hidden, rng);
    mid_ = Linear<T>(params_, "mid", hidden, hidden, rng);
    out_ = Linear<T>(params_, "out", hidden, dim, rng);
  }

  ConditioningMode conditioning_mode() const override { return ConditioningMode::none; }
  ParameterSet<T>& parameters() override { return params_; }
  const ParameterSet<T>& parameters() const override { return params_; }

  Var<T> predict(const Var<T>& x_t, std::size_t t, const Conditioning<T>& cond) const override {
    check_conditioning(ConditioningMode::none, cond);
    Var<T> x = x_t.value().rank() == 2 ? x_t : reshape(x_t, {x_t.shape()[0], x_t.size() / x_t.shape()[0]});
    Var<T> te = time_(constant(timestep_embedding<T>(t, time_dim_)));
    Var<T> h = silu(add_row(in_(x), te));
    h = silu(mid_(h));
    return reshape(out_(h), x_t.shape());
  }

 private:
  std::size_t time_dim_;
  ParameterSet<T> params_;
  Linear<T> in_, time_, mid_, out_;
};

}  // namespace lapig
