#pragma once

#include <cstdint>
#include <vector>

#include "tanet/tensor.hpp"

namespace tanet {

/// Moments and step counter for bias-corrected Adam.
template <typename T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

/// Applies one in-place Adam update and zeroes the gradients afterwards.
/// Throws std::logic_error if any parameter has no gradient.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state);

extern template void adam_step(std::vector<Tensor<float>>&, AdamState<float>&);
extern template void adam_step(std::vector<Tensor<double>>&, AdamState<double>&);

}  // namespace tanet
