#pragma once

#include <cmath>
#include <random>

#include "wheatnet/tensor.hpp"

namespace wheatnet {

/// Glorot/Xavier uniform: U(-a, a) with a = gain * sqrt(6 / (fan_in + fan_out)).
template <class Rng>
Tensor xavier_init(Shape shape, double fan_in, double fan_out, Rng& rng, bool requires_grad = true,
                   double gain = 1.0) {
  const double a = gain * std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (double& v : t.mutable_data()) v = dist(rng);
  return t;
}

/// Fans of a conv kernel shaped (Cout, Cin, kh, kw) under the usual
/// receptive-field convention.
template <class Rng>
Tensor xavier_init(Shape shape, Rng& rng, bool requires_grad = true, double gain = 1.0) {
  const double receptive = static_cast<double>(shape.h * shape.w);
  return xavier_init(shape, static_cast<double>(shape.c) * receptive,
                     static_cast<double>(shape.n) * receptive, rng, requires_grad, gain);
}

}  // namespace wheatnet
