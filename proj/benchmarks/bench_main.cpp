#include <benchmark/benchmark.h>

#include <random>

#include "tanet/lbp.hpp"
#include "tanet/model.hpp"
#include "tanet/ops.hpp"
#include "tanet/stn.hpp"

using namespace tanet;

namespace {

Tensor<float> rand_t(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor<float>::uniform(std::move(s), rng, -1.0f, 1.0f);
}

}  // namespace

static void BM_Conv2dForward(benchmark::State& st) {
  const int c = static_cast<int>(st.range(0));
  auto x = rand_t({1, c, 64, 64}, 1), w = rand_t({c, c, 3, 3}, 2), b = rand_t({c}, 3);
  NoGradGuard ng;
  for (auto _ : st) benchmark::DoNotOptimize(conv2d(x, w, b, {1, 1, 1}));
}
BENCHMARK(BM_Conv2dForward)->Arg(16)->Arg(64);

static void BM_Conv2dForwardBackward(benchmark::State& st) {
  const int c = static_cast<int>(st.range(0));
  auto x = rand_t({1, c, 64, 64}, 1), w = rand_t({c, c, 3, 3}, 2), b = rand_t({c}, 3);
  w.set_requires_grad(true);
  for (auto _ : st) {
    Tape::current().clear();
    auto loss = sum(conv2d(x, w, b, {1, 1, 1}));
    backward(loss);
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(16)->Arg(64);

static void BM_BilinearSample(benchmark::State& st) {
  auto x = rand_t({1, 3, 64, 64}, 4);
  std::vector<AffineTheta> th(5, AffineTheta{0.5, 0.4, 0.1, -0.2});
  const auto grid = affine_grid(theta_tensor<float>(th), 64, 64);
  NoGradGuard ng;
  for (auto _ : st) benchmark::DoNotOptimize(bilinear_sample(x, grid));
}
BENCHMARK(BM_BilinearSample);

static void BM_LbpLayer(benchmark::State& st) {
  std::mt19937_64 rng(5);
  LbpLayer<float> layer(3, 32, 32, 0.5, 7, rng);
  auto x = rand_t({1, 3, 64, 64}, 6);
  NoGradGuard ng;
  for (auto _ : st) benchmark::DoNotOptimize(layer(x));
}
BENCHMARK(BM_LbpLayer);

// full model vs the same weights without transformer and LBP pathway
static void BM_PredictMasks(benchmark::State& st) {
  const bool full = st.range(0) != 0;
  TaNet<float> net(ModelConfig{});
  auto x = rand_t({1, 3, 64, 64}, 8);
  for (auto _ : st) benchmark::DoNotOptimize(net.predict_masks(x, ForwardMode{full, full}));
  st.SetLabel(full ? "tanet" : "baseline");
}
BENCHMARK(BM_PredictMasks)->Arg(1)->Arg(0)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
