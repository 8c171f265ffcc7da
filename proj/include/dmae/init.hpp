#pragma once

#include <cmath>
#include <random>

#include "dmae/tensor.hpp"

namespace dmae {

using Rng = std::mt19937_64;

/// Zero-mean normal draw with standard deviation sqrt(2 / fan_in).
template <typename T>
Tensor<T> kaiming_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> out(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : out.storage()) v = static_cast<T>(dist(rng));
  return out;
}

template <typename T>
Tensor<T> uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor<T> out(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : out.storage()) v = static_cast<T>(dist(rng));
  return out;
}

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in defaults to the leading dimension.
template <typename T>
Tensor<T> linear_init(Shape shape, Rng& rng, std::size_t fan_in = 0) {
  if (fan_in == 0) fan_in = shape.at(0);
  return uniform_init<T>(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace dmae
