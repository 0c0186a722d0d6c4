#pragma once

#include <cmath>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lapig/autograd.hpp"
#include "lapig/hashing.hpp"

namespace lapig {

using Rng = std::mt19937_64;

// Draws are made in double and cast so that float and double models built
// from one seed start from the same numbers.
template <class T>
Tensor<T> randn(const Shape& shape, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> nd(0.0, stddev);
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(nd(rng));
  return t;
}

template <class T>
Tensor<T> rand_uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> ud(lo, hi);
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(ud(rng));
  return t;
}

// Named, ordered collection of trainable leaves.
template <class T>
class ParameterSet {
 public:
  Var<T> add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, leaf(std::move(init)));
    return items_.back().second;
  }

  // Shares an existing leaf under a new name, e.g. to optimise several modules together.
  void attach(const std::string& name, const Var<T>& v) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, v);
  }

  void attach_all(const std::string& prefix, const ParameterSet& other) {
    for (const auto& [n, v] : other.items()) attach(prefix + n, v);
  }

  const std::vector<std::pair<std::string, Var<T>>>& items() const { return items_; }
  std::vector<std::pair<std::string, Var<T>>>& items() { return items_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : items_) n += v.size();
    return n;
  }

  // SHA-256 over names and raw value bytes, in registration order.
  std::string hash() const {
    std::string bytes;
    for (const auto& [name, v] : items_) {
      bytes += name;
      bytes.append(reinterpret_cast<const char*>(v.value().data()), v.size() * sizeof(T));
    }
    return sha256_hex(bytes);
  }

  void zero_grad() {
    for (auto& [_, v] : items_) v.zero_grad();
  }

  Var<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter " + name);
    return items_[it->second].second;
  }

  std::map<std::string, Tensor<T>> snapshot() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [n, v] : items_) out.emplace(n, v.value());
    return out;
  }

  void load(const std::map<std::string, Tensor<T>>& values) {
    for (auto& [n, v] : items_) {
      auto it = values.find(n);
      if (it == values.end()) throw std::runtime_error("checkpoint lacks parameter " + n);
      require_same_shape(v.shape(), it->second.shape(), ("parameter " + n).c_str());
      v.mutable_value() = it->second;
    }
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> items_;
  std::map<std::string, std::size_t> index_;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for weight and bias.
template <class T>
Tensor<T> fan_in_uniform(const Shape& s, std::size_t fan_in, Rng& rng) {
  const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rand_uniform<T>(s, rng, -b, b);
}

template <class T>
struct Linear {
  Var<T> weight;  // (out, in)
  Var<T> bias;    // (out)

  Linear() = default;
  Linear(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool zero_init = false) {
    weight = ps.add(name + ".weight", zero_init ? Tensor<T>({out, in}) : fan_in_uniform<T>({out, in}, in, rng));
    bias = ps.add(name + ".bias", zero_init ? Tensor<T>({out}) : fan_in_uniform<T>({out}, in, rng));
  }

  // x is (N, in) or (in); result keeps the same rank.
  Var<T> operator()(const Var<T>& x) const {
    const bool vec = x.value().rank() == 1;
    Var<T> m = vec ? reshape(x, {1, x.size()}) : x;
    Var<T> y = add_row(matmul(m, weight, false, true), bias);
    return vec ? reshape(y, {y.size()}) : y;
  }
};

template <class T>
struct Conv2d {
  Var<T> weight;  // (O, C, k, k)
  Var<T> bias;
  std::size_t stride = 1;
  std::size_t pad = 1;

  Conv2d() = default;
  Conv2d(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
         std::size_t stride_, std::size_t pad_, Rng& rng, bool zero_init = false)
      : stride(stride_), pad(pad_) {
    const std::size_t fan = in * k * k;
    weight = ps.add(name + ".weight", zero_init ? Tensor<T>({out, in, k, k}) : fan_in_uniform<T>({out, in, k, k}, fan, rng));
    bias = ps.add(name + ".bias", zero_init ? Tensor<T>({out}) : fan_in_uniform<T>({out}, fan, rng));
  }

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias, stride, pad); }
};

template <class T>
struct GroupNorm {
  std::size_t groups = 1;
  Var<T> gamma;
  Var<T> beta;

  GroupNorm() = default;
  GroupNorm(ParameterSet<T>& ps, const std::string& name, std::size_t channels, std::size_t groups_) : groups(groups_) {
    if (groups == 0 || channels % groups) throw std::invalid_argument("GroupNorm: channels not divisible by groups");
    gamma = ps.add(name + ".gamma", Tensor<T>({channels}, T(1)));
    beta = ps.add(name + ".beta", Tensor<T>({channels}));
  }

  Var<T> operator()(const Var<T>& x) const {
    return add_channel(mul_channel(normalize_rows(x, groups), gamma), beta);
  }
};

template <class T>
struct LayerNorm {
  Var<T> gamma;
  Var<T> beta;

  LayerNorm() = default;
  LayerNorm(ParameterSet<T>& ps, const std::string& name, std::size_t dim) {
    gamma = ps.add(name + ".gamma", Tensor<T>({dim}, T(1)));
    beta = ps.add(name + ".beta", Tensor<T>({dim}));
  }

  // x is (N, D)
  Var<T> operator()(const Var<T>& x) const {
    return add_row(mul_row(normalize_rows(x, x.shape()[0]), gamma), beta);
  }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables
};

template <class T>
class Adam {
 public:
  Adam(ParameterSet<T>& ps, AdamConfig cfg) : params_(&ps), cfg_(cfg) {
    for (const auto& [_, v] : ps.items()) {
      m_.emplace_back(v.shape());
      v_.emplace_back(v.shape());
    }
  }

  // Applies one update from the accumulated gradients, then clears them.
  void step() {
    ++t_;
    double scale_g = 1.0;
    if (cfg_.clip_norm > 0) {
      double ss = 0;
      for (auto& [_, p] : params_->items())
        for (T g : p.grad().values()) ss += static_cast<double>(g) * g;
      const double norm = std::sqrt(ss);
      if (norm > cfg_.clip_norm) scale_g = cfg_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto& items = params_->items();
    for (std::size_t k = 0; k < items.size(); ++k) {
      auto& p = items[k].second;
      auto& val = p.mutable_value();
      const auto& g = p.grad();
      for (std::size_t i = 0; i < val.size(); ++i) {
        const double gi = static_cast<double>(g[i]) * scale_g;
        m_[k][i] = static_cast<T>(cfg_.beta1 * m_[k][i] + (1 - cfg_.beta1) * gi);
        v_[k][i] = static_cast<T>(cfg_.beta2 * v_[k][i] + (1 - cfg_.beta2) * gi * gi);
        const double mh = m_[k][i] / bc1, vh = v_[k][i] / bc2;
        val[i] = static_cast<T>(val[i] - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
    params_->zero_grad();
  }

  long steps() const { return t_; }

 private:
  ParameterSet<T>* params_;
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  long t_ = 0;
};

}  // namespace lapig
