#pragma once

// Local-binary-pattern encoded convolution: a fixed bank of sparse ternary
// 3x3 difference filters, ReLU bitmaps, and a learnable 1x1 combination.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tanet/layers.hpp"
#include "tanet/tensor.hpp"

namespace tanet {

/// m x cin x 3 x 3 filters with entries in {-1, 0, +1}. Never optimized.
struct LbpFilterBank {
  int m = 0;
  int cin = 0;
  double sparsity = 0.5;
  std::uint64_t seed = 0;
  std::vector<std::int8_t> filters;  // row-major [m, cin, 3, 3]

  std::int8_t at(int k, int c, int dy, int dx) const {
    return filters[static_cast<std::size_t>(((k * cin + c) * 3 + dy) * 3 + dx)];
  }
  /// The bank as a conv weight [m, cin, 3, 3].
  template <typename T>
  Tensor<T> as_tensor() const;
  bool operator==(const LbpFilterBank&) const = default;
};

/// Nonzeros per 3x3 slice for a given sparsity: floor(sparsity * 9).
int lbp_nonzeros_per_slice(double sparsity);

/// Deterministic bank. Each slice gets floor(sparsity*9) positions drawn
/// without replacement with signs alternating +1, -1, ... in draw order.
LbpFilterBank generate_bank(int m, int cin, double sparsity, std::uint64_t seed);

template <typename T>
class LbpLayer {
 public:
  LbpLayer() = default;
  LbpLayer(int cin, int cout, int m, double sparsity, std::uint64_t bank_seed,
           std::mt19937_64& rng);

  /// [B,Cin,H,W] -> [B,Cout,H,W]: bank (replicate border, stride 1) -> ReLU -> 1x1.
  Tensor<T> operator()(const Tensor<T>& x) const;
  /// ReLU bitmaps [B,m,H,W] before the combination.
  Tensor<T> bitmaps(const Tensor<T>& x) const;
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
  /// Rebuilds `bank` from `bank_tensor` (after loading a checkpoint).
  void sync_bank_from_tensor();

  int cout() const { return static_cast<int>(combine_weights.dim(0)); }

  LbpFilterBank bank;
  Tensor<T> combine_weights;  // [Cout, m]
  /// Mirror of the bank as a tensor, persisted with the frozen flag.
  Tensor<T> bank_tensor;
};

/// Fixed-bank difference maps [B,m,H,W] with replicated borders. Gradient
/// flows to the input only.
template <typename T>
Tensor<T> lbp_difference(const Tensor<T>& x, const LbpFilterBank& bank);

template <typename T>
Tensor<T> lbp_forward(const Tensor<T>& x, const LbpLayer<T>& layer) {
  return layer(x);
}

struct ConvLayerSpec {
  std::int64_t cin = 0;
  std::int64_t cout = 0;
  std::int64_t k = 3;
  bool bias = false;
};

std::int64_t learnable_param_count(const ConvLayerSpec& spec);
template <typename T>
std::int64_t learnable_param_count(const LbpLayer<T>& layer) {
  return static_cast<std::int64_t>(layer.combine_weights.numel());
}
/// Same as the LbpLayer overload without building the layer: cout * m.
std::int64_t lbp_param_count(std::int64_t cout, std::int64_t m);

extern template class LbpLayer<float>;
extern template class LbpLayer<double>;

}  // namespace tanet
