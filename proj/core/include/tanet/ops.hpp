#pragma once

// Differentiable operations over Tensor. Every op records its gradient rule
// on the current tape when gradient mode is on and some input requires grad.
// Layout is row-major [B,C,H,W] throughout; convolution is cross-correlation.

#include <initializer_list>
#include <optional>
#include <span>
#include <vector>

#include "tanet/tensor.hpp"

namespace tanet {

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// 2D cross-correlation. `bias` may be an undefined tensor.
/// weight is [Cout, Cin/groups, k, k]; output spatial size is
/// floor((H + 2*padding - k) / stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions options = {});

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

/// Multiplies [B,C,H,W] by a per-channel gate [B,C,1,1].
template <typename T>
Tensor<T> mul_channel_gate(const Tensor<T>& features, const Tensor<T>& gate);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> mean(const Tensor<T>& a);

/// Differentiable reshape (copies values).
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

/// Per-channel running statistics for batch normalization.
template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  static BatchNormStats identity(std::int64_t channels) {
    return {Tensor<T>::zeros({channels}), Tensor<T>::ones({channels})};
  }
};

/// Train mode normalizes with (biased) batch statistics and updates the
/// running stats with the unbiased variance; eval mode uses running stats.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormStats<T>& stats, bool training, T momentum = T(0.1),
                     T eps = T(1e-5));

/// [B,F] x [O,F]^T + [O]
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input);

/// Non-overlapping 2x2 mean pooling; H and W must be even.
template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& input);

/// Align-corners bilinear resize.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& input, std::int64_t out_h, std::int64_t out_w);

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts);

template <typename T>
Tensor<T> concat_channels(std::initializer_list<Tensor<T>> parts) {
  std::vector<Tensor<T>> v(parts);
  return concat_channels<T>(std::span<const Tensor<T>>(v));
}

/// Softmax over axis 1 of [B,C,H,W].
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits);

/// Mean over non-ignored pixels of -log softmax(logits)[label].
/// Returns 0 (with zero gradient) when every pixel is ignored.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const IntTensor& labels,
                                std::optional<int> ignore_label = std::nullopt);

/// Mean of elementwise smooth L1 (0.5 d^2 if |d| < 1, else |d| - 0.5).
/// A non-empty `mask` weights elements by 0/1 and averages over its sum.
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& pred, const Tensor<T>& target,
                    std::span<const T> mask = {});

/// Border-replicating spatial padding of [B,C,H,W].
template <typename T>
Tensor<T> pad_replicate(const Tensor<T>& input, int pad);

/// From [M, G*K, H, W] keeps channel block `group[m]` (K channels) of item m.
template <typename T>
Tensor<T> select_channel_group(const Tensor<T>& input, std::int64_t block,
                               std::span<const int> group);

}  // namespace tanet
