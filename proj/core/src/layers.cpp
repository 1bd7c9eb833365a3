#include "tanet/layers.hpp"

#include <cmath>

namespace tanet {

template <typename T>
Conv2dLayer<T>::Conv2dLayer(int cin, int cout, int kernel, Conv2dOptions opts, bool with_bias,
                            std::mt19937_64& rng)
    : options(opts) {
  const int fan_in = (cin / opts.groups) * kernel * kernel;
  weight = Tensor<T>::randn({cout, cin / opts.groups, kernel, kernel}, rng,
                            static_cast<T>(std::sqrt(2.0 / fan_in)));
  weight.set_requires_grad(true);
  if (with_bias) {
    bias = Tensor<T>::zeros({cout});
    bias.set_requires_grad(true);
  }
}

template <typename T>
void Conv2dLayer<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  f(join_name(prefix, "weight"), weight, ParamRole::kLearnable);
  if (bias.defined()) f(join_name(prefix, "bias"), bias, ParamRole::kLearnable);
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(int channels)
    : gamma(Tensor<T>::ones({channels})),
      beta(Tensor<T>::zeros({channels})),
      stats(BatchNormStats<T>::identity(channels)) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

template <typename T>
void BatchNorm2d<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  f(join_name(prefix, "gamma"), gamma, ParamRole::kLearnable);
  f(join_name(prefix, "beta"), beta, ParamRole::kLearnable);
  f(join_name(prefix, "running_mean"), stats.running_mean, ParamRole::kFrozen);
  f(join_name(prefix, "running_var"), stats.running_var, ParamRole::kFrozen);
}

template <typename T>
LinearLayer<T>::LinearLayer(int in, int out, std::mt19937_64& rng)
    : weight(Tensor<T>::randn({out, in}, rng, static_cast<T>(std::sqrt(1.0 / in)))),
      bias(Tensor<T>::zeros({out})) {
  weight.set_requires_grad(true);
  bias.set_requires_grad(true);
}

template <typename T>
void LinearLayer<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  f(join_name(prefix, "weight"), weight, ParamRole::kLearnable);
  f(join_name(prefix, "bias"), bias, ParamRole::kLearnable);
}

template struct Conv2dLayer<float>;
template struct Conv2dLayer<double>;
template struct BatchNorm2d<float>;
template struct BatchNorm2d<double>;
template struct LinearLayer<float>;
template struct LinearLayer<double>;

}  // namespace tanet
