#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "lapig/autograd.hpp"

namespace lapig::testing {

// Norm-wise relative error ||analytic - numeric|| / max(||analytic||, ||numeric||)
// using central differences, taken over all entries of every input.
inline double gradient_rel_error(const std::function<Var<double>()>& f, std::vector<Var<double>> inputs,
                                 double step = 1e-3) {
  for (auto& v : inputs) v.zero_grad();
  f().backward();
  double diff = 0, na = 0, nn = 0;
  for (auto& v : inputs) {
    const Tensor<double> analytic = v.grad();
    auto& val = v.mutable_value();
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double keep = val[i];
      val[i] = keep + step;
      const double up = f().item();
      val[i] = keep - step;
      const double down = f().item();
      val[i] = keep;
      const double numeric = (up - down) / (2 * step);
      diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      na += analytic[i] * analytic[i];
      nn += numeric * numeric;
    }
  }
  const double denom = std::max(std::sqrt(std::max(na, nn)), 1e-300);
  return std::sqrt(diff) / denom;
}

}  // namespace lapig::testing
