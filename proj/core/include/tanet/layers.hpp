#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tanet/ops.hpp"
#include "tanet/tensor.hpp"

namespace tanet {

enum class ParamRole {
  kLearnable,
  /// Persisted but never optimized (frozen filter banks, running stats).
  kFrozen,
};

template <typename T>
using ParamVisitor = std::function<void(const std::string& name, Tensor<T>& tensor, ParamRole role)>;

/// Joins a module prefix and a member name with '.'.
inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
struct Conv2dLayer {
  Tensor<T> weight;
  Tensor<T> bias;  // may be undefined
  Conv2dOptions options;

  Conv2dLayer() = default;
  /// He-normal weights, zero bias.
  Conv2dLayer(int cin, int cout, int kernel, Conv2dOptions opts, bool with_bias,
              std::mt19937_64& rng);

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, options); }
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

template <typename T>
struct BatchNorm2d {
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormStats<T> stats;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels);

  Tensor<T> operator()(const Tensor<T>& x, bool training) {
    return batch_norm(x, gamma, beta, stats, training);
  }
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

/// conv -> batch norm -> ReLU
template <typename T>
struct ConvBnRelu {
  Conv2dLayer<T> conv;
  BatchNorm2d<T> bn;

  ConvBnRelu() = default;
  ConvBnRelu(int cin, int cout, int kernel, Conv2dOptions opts, std::mt19937_64& rng)
      : conv(cin, cout, kernel, opts, true, rng), bn(cout) {}

  Tensor<T> operator()(const Tensor<T>& x, bool training) { return relu(bn(conv(x), training)); }
  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    conv.visit(join_name(prefix, "conv"), f);
    bn.visit(join_name(prefix, "bn"), f);
  }
};

template <typename T>
struct LinearLayer {
  Tensor<T> weight;
  Tensor<T> bias;

  LinearLayer() = default;
  LinearLayer(int in, int out, std::mt19937_64& rng);

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

/// Learnable tensors of a module, in visit order.
template <typename T, typename Module>
std::vector<Tensor<T>> learnable_parameters(Module& module) {
  std::vector<Tensor<T>> out;
  module.visit("", [&](const std::string&, Tensor<T>& t, ParamRole role) {
    if (role == ParamRole::kLearnable) out.push_back(t);
  });
  return out;
}

extern template struct Conv2dLayer<float>;
extern template struct Conv2dLayer<double>;
extern template struct BatchNorm2d<float>;
extern template struct BatchNorm2d<double>;
extern template struct LinearLayer<float>;
extern template struct LinearLayer<double>;

}  // namespace tanet
