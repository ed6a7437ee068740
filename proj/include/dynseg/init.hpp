#pragma once

#include <cmath>
#include <vector>

#include "dynseg/rng.hpp"
#include "dynseg/tensor.hpp"

namespace dynseg {

// He (Kaiming) normal initialisation for layers followed by (leaky) ReLU.
template <typename T>
BasicTensor<T> he_normal(const Shape& shape, Index fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<T> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
  return BasicTensor<T>(shape, std::move(v), true);
}

}  // namespace dynseg
