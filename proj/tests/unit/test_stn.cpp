#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "tanet/gradcheck.hpp"
#include "tanet/ops.hpp"
#include "tanet/optim.hpp"
#include "tanet/stn.hpp"
#include "test_util.hpp"

namespace tanet {
namespace {

using testutil::random_tensor;

TEST(RoiSet, CardiacDefaults) {
  const auto r = RoiSet::cardiac();
  EXPECT_EQ(r.size(), 5u);
  EXPECT_EQ(r.labels, (std::vector<int>{1, 2, 3, 4, 5}));
  EXPECT_NO_THROW(r.validate());
  EXPECT_THROW((RoiSet{{1, 1}, {"a", "b"}}.validate()), std::invalid_argument);
  EXPECT_THROW((RoiSet{{0}, {"bg"}}.validate()), std::invalid_argument);
  EXPECT_THROW((RoiSet{{}, {}}.validate()), std::invalid_argument);
}

TEST(BuildTheta, IdentityRawGivesIdentity) {
  const auto raw = identity_raw_theta();
  Tensor<double> r({1, 4}, raw);
  auto th = build_theta(r);
  const std::vector<double> ref{1, 0, 0, 0, 1, 0};
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(th.data()[i], ref[i], 1e-12);
}

TEST(BuildTheta, ShapeAndStructuralZeros) {
  auto raw = random_tensor<double>({5, 4}, 1, -5, 5);
  auto th = build_theta(raw);
  ASSERT_EQ(th.shape(), (Shape{5, 2, 3}));
  for (int r = 0; r < 5; ++r) {
    EXPECT_EQ(th.data()[r * 6 + 1], 0.0);
    EXPECT_EQ(th.data()[r * 6 + 3], 0.0);
    EXPECT_GT(th.data()[r * 6 + 0], 0.0);
    EXPECT_GT(th.data()[r * 6 + 4], 0.0);
    EXPECT_LE(std::abs(th.data()[r * 6 + 2]), 1.0);
  }
  auto batched = build_theta(random_tensor<float>({2, 5, 4}, 2));
  EXPECT_EQ(batched.shape(), (Shape{2, 5, 2, 3}));
}

TEST(BuildTheta, ScaleStaysPositiveForVeryNegativeRaw) {
  Tensor<double> raw({1, 4}, std::vector<double>{-200, -50, 0, 0});
  auto th = build_theta(raw);
  EXPECT_GE(th.data()[0], kMinThetaScale);
  EXPECT_GE(th.data()[4], kMinThetaScale);
}

TEST(BuildTheta, GradientCheck) {
  for (std::uint64_t seed : {3u, 4u, 5u}) {
    std::vector<Tensor<double>> in{random_tensor<double>({3, 4}, seed, -2, 2)};
    auto w = random_tensor<double>({3, 2, 3}, seed + 100);
    auto r = grad_check([&] {
      auto th = build_theta(in[0]);
      return sum(mul_channel_gate(reshape(th, {1, 18, 1, 1}), reshape(w, {1, 18, 1, 1})));
    }, in);
    EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
  }
}

TEST(BuildTheta, AdamKeepsStructure) {
  auto raw = random_tensor<float>({5, 4}, 6);
  raw.set_requires_grad(true);
  std::vector<Tensor<float>> params{raw};
  AdamState<float> st;
  st.lr = 0.05;
  Tensor<float> target({5, 2, 3}, 0.3f);
  for (int i = 0; i < 20; ++i) {
    Tape::current().clear();
    auto loss = smooth_l1(build_theta(raw), target);
    backward(loss);
    adam_step(params, st);
  }
  Tape::current().clear();
  auto th = build_theta(raw);
  for (int r = 0; r < 5; ++r) {
    EXPECT_EQ(th.data()[r * 6 + 1], 0.0f);
    EXPECT_EQ(th.data()[r * 6 + 3], 0.0f);
  }
}

TEST(AffineGrid, IdentityCanonical3x3) {
  const std::vector<AffineTheta> id{AffineTheta::identity()};
  auto g = affine_grid(theta_tensor<double>(id), 3, 3);
  ASSERT_EQ(g.shape(), (Shape{1, 3, 3, 2}));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      EXPECT_EQ(g.data()[(i * 3 + j) * 2 + 0], -1.0 + j);
      EXPECT_EQ(g.data()[(i * 3 + j) * 2 + 1], -1.0 + i);
    }
}

TEST(AffineGrid, HandProductAtCorner) {
  const std::vector<AffineTheta> th{{0.5, 0.5, 0.2, -0.3}};
  auto g = affine_grid(theta_tensor<double>(th), 5, 5);
  const std::size_t last = (4 * 5 + 4) * 2;
  EXPECT_NEAR(g.data()[last], 0.7, 1e-15);
  EXPECT_NEAR(g.data()[last + 1], 0.2, 1e-15);
}

TEST(AffineGrid, TranslationShiftsX) {
  const std::vector<AffineTheta> id{AffineTheta::identity()}, sh{{1, 1, 0.5, 0}};
  auto a = affine_grid(theta_tensor<double>(id), 4, 6);
  auto b = affine_grid(theta_tensor<double>(sh), 4, 6);
  for (std::size_t p = 0; p < 24; ++p) {
    EXPECT_DOUBLE_EQ(b.data()[2 * p], a.data()[2 * p] + 0.5);
    EXPECT_EQ(b.data()[2 * p + 1], a.data()[2 * p + 1]);
  }
}

TEST(AffineGrid, LinearInTheta) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 20; ++trial) {
    AffineTheta t1{u(rng) + 1.5, u(rng) + 1.5, u(rng), u(rng)};
    AffineTheta t2{u(rng) + 1.5, u(rng) + 1.5, u(rng), u(rng)};
    const double a = 0.25;
    AffineTheta mix{a * t1.sx + (1 - a) * t2.sx, a * t1.sy + (1 - a) * t2.sy,
                    a * t1.tx + (1 - a) * t2.tx, a * t1.ty + (1 - a) * t2.ty};
    auto g1 = affine_grid(theta_tensor<double>(std::vector{t1}), 7, 5);
    auto g2 = affine_grid(theta_tensor<double>(std::vector{t2}), 7, 5);
    auto gm = affine_grid(theta_tensor<double>(std::vector{mix}), 7, 5);
    for (std::size_t i = 0; i < gm.numel(); ++i)
      EXPECT_NEAR(gm.data()[i], a * g1.data()[i] + (1 - a) * g2.data()[i], 1e-14);
  }
}

TEST(AffineGrid, GradientCheckWrtTheta) {
  std::vector<Tensor<double>> in{random_tensor<double>({2, 2, 3}, 8)};
  auto w = random_tensor<double>({2, 4, 5, 2}, 9);
  auto r = grad_check([&] {
    auto g = affine_grid(in[0], 4, 5);
    return sum(mul_channel_gate(reshape(g, {1, 80, 1, 1}), reshape(w, {1, 80, 1, 1})));
  }, in);
  EXPECT_LT(r.max_rel_error, 1e-8) << r.worst;
}

TEST(BilinearSample, IdentityIsExact) {
  for (auto [h, w] : {std::pair{64, 64}, std::pair{7, 13}, std::pair{1, 5}}) {
    auto x = random_tensor<float>({2, 3, h, w}, 10);
    const std::vector<AffineTheta> id(2, AffineTheta::identity());
    auto y = bilinear_sample(x, affine_grid(theta_tensor<float>(id), h, w));
    for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(y.data()[i], x.data()[i]);
  }
}

TEST(BilinearSample, CenterOfTwoByTwo) {
  Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor<double> g({1, 1, 1, 2}, std::vector<double>{0.0, 0.0});
  EXPECT_DOUBLE_EQ(bilinear_sample(x, g).item(), 2.5);
}

TEST(BilinearSample, OutOfRangeReadsZero) {
  auto x = random_tensor<double>({1, 2, 4, 4}, 11, 1, 2);
  Tensor<double> g({1, 3, 3, 2}, -3.0);
  auto y = bilinear_sample(x, g);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(BilinearSample, PartlyOutsideFadesToZero) {
  Tensor<double> x({1, 1, 2, 2}, 1.0);
  // half a pixel past the right edge: one tap inside, one outside
  Tensor<double> g({1, 1, 1, 2}, std::vector<double>{2.0, -1.0});
  EXPECT_DOUBLE_EQ(bilinear_sample(x, g).item(), 0.5);
}

TEST(BilinearSample, GridItemsMapToImages) {
  auto x = random_tensor<double>({2, 1, 3, 3}, 12);
  const std::vector<AffineTheta> id(4, AffineTheta::identity());
  auto y = bilinear_sample(x, affine_grid(theta_tensor<double>(id), 3, 3));
  ASSERT_EQ(y.shape(), (Shape{4, 1, 3, 3}));
  for (int i = 0; i < 9; ++i) {
    EXPECT_EQ(y.data()[i], x.data()[i]);
    EXPECT_EQ(y.data()[9 + i], x.data()[i]);
    EXPECT_EQ(y.data()[18 + i], x.data()[9 + i]);
  }
  EXPECT_THROW(bilinear_sample(x, Tensor<double>({3, 3, 3, 2})), ShapeError);
}

TEST(BilinearSample, GradientCheckInputAndGrid) {
  for (std::uint64_t seed : {13u, 14u, 15u}) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> cell(0, 4);
    std::uniform_real_distribution<double> off(0.1, 0.4);
    const std::int64_t H = 6, W = 6;
    Tensor<double> grid({2, 3, 3, 2});
    for (std::size_t p = 0; p < grid.numel(); ++p) {
      const double pix = cell(rng) + off(rng);
      grid.data()[p] = 2.0 * pix / (W - 1) - 1.0;
    }
    std::vector<Tensor<double>> in{random_tensor<double>({1, 2, H, W}, seed + 1), grid};
    auto w = random_tensor<double>({2, 2, 3, 3}, seed + 2);
    auto r = grad_check([&] {
      auto y = bilinear_sample(in[0], in[1]);
      return sum(mul_channel_gate(reshape(y, {1, 36, 1, 1}), reshape(w, {1, 36, 1, 1})));
    }, in, 1e-6);
    EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
    EXPECT_EQ(r.skipped, 0u);
  }
}

TEST(InversePaste, IdentityOnesCoversFrame) {
  Tensor<double> ones({1, 1, 8, 8}, 1.0);
  const std::vector<AffineTheta> id{AffineTheta::identity()};
  auto s = inverse_paste(ones, id, 8, 8);
  ASSERT_EQ(s.shape(), (Shape{2, 8, 8}));
  const std::vector<int> labels{0, 3};
  auto m = argmax_labels(s, labels);
  for (int v : m.data) EXPECT_EQ(v, 3);
}

TEST(InversePaste, ZeroScoresGoToBackground) {
  Tensor<double> zeros({2, 1, 8, 8}, 0.0);
  const std::vector<AffineTheta> id(2, AffineTheta::identity());
  auto s = inverse_paste(zeros, id, 8, 8);
  const std::vector<int> labels{0, 1, 2};
  for (int v : argmax_labels(s, labels).data) EXPECT_EQ(v, 0);
}

TEST(InversePaste, TiesGoToLowerIndex) {
  Tensor<double> maps({2, 1, 4, 4}, 0.9);
  const std::vector<AffineTheta> id(2, AffineTheta::identity());
  auto s = inverse_paste(maps, id, 4, 4);
  const std::vector<int> labels{0, 7, 4};
  for (int v : argmax_labels(s, labels).data) EXPECT_EQ(v, 7);
}

TEST(InversePaste, CropThenPasteBoxRoundTrip) {
  std::mt19937_64 rng(16);
  const std::int64_t H = 64, W = 64;
  const RoiSet one{{1}, {"box"}};
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<int> d(0, 63);
    int x0 = d(rng), x1 = d(rng), y0 = d(rng), y1 = d(rng);
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    IntTensor mask({H, W});
    Tensor<double> img({1, 1, H, W});
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        mask.data[y * W + x] = 1;
        img.data()[y * W + x] = 1.0;
      }
    const auto gt = derive_gt_theta(mask, one, 0.1);
    const auto crop = bilinear_sample(img, affine_grid(theta_tensor<double>(gt.thetas), 64, 64));
    const auto scores = inverse_paste(crop, gt.thetas, H, W);
    const std::vector<int> labels{0, 1};
    const auto back = argmax_labels(scores, labels);
    int bx0 = W, bx1 = -1, by0 = H, by1 = -1;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        if (back.data[y * W + x] == 1) {
          bx0 = std::min(bx0, x); bx1 = std::max(bx1, x);
          by0 = std::min(by0, y); by1 = std::max(by1, y);
        }
    ASSERT_GE(bx1, 0) << "trial " << trial;
    EXPECT_LE(std::abs(bx0 - x0), 1) << trial;
    EXPECT_LE(std::abs(bx1 - x1), 1) << trial;
    EXPECT_LE(std::abs(by0 - y0), 1) << trial;
    EXPECT_LE(std::abs(by1 - y1), 1) << trial;
  }
}

TEST(InversePaste, ConstantRegionsSurviveScaledRoundTrip) {
  Tensor<double> img({1, 1, 32, 32}, 0.0);
  for (int y = 8; y < 24; ++y)
    for (int x = 4; x < 20; ++x) img.data()[y * 32 + x] = 1.0;
  const std::vector<AffineTheta> th{{0.6, 0.6, -0.2, 0.0}};
  auto crop = bilinear_sample(img, affine_grid(theta_tensor<double>(th), 32, 32));
  auto s = inverse_paste(crop, th, 32, 32);
  for (int y = 9; y < 23; ++y)
    for (int x = 5; x < 19; ++x) EXPECT_NEAR(s.data()[1024 + y * 32 + x], 1.0, 1e-12);
}

TEST(InversePaste, RejectsBadShapes) {
  const std::vector<AffineTheta> id{AffineTheta::identity()};
  EXPECT_THROW(inverse_paste(Tensor<double>({1, 2, 4, 4}), id, 4, 4), ShapeError);
  EXPECT_THROW(inverse_paste(Tensor<double>({2, 1, 4, 4}), id, 4, 4), ShapeError);
}

TEST(SampleLabelsNearest, IdentityCopiesAndOutsideFills) {
  IntTensor m({1, 4, 4});
  for (int i = 0; i < 16; ++i) m.data[i] = i % 3;
  const std::vector<AffineTheta> id{AffineTheta::identity()};
  EXPECT_EQ(sample_labels_nearest(m, id, 4, 4).data, m.data);
  const std::vector<AffineTheta> far{{1, 1, 5, 5}};
  for (int v : sample_labels_nearest(m, far, 4, 4, -1).data) EXPECT_EQ(v, -1);
}

TEST(DeriveGtTheta, FullFrameIsIdentity) {
  IntTensor m({64, 64}, 1);
  auto g = derive_gt_theta(m, RoiSet{{1}, {"a"}}, 0.0);
  EXPECT_DOUBLE_EQ(g.thetas[0].sx, 1.0);
  EXPECT_DOUBLE_EQ(g.thetas[0].sy, 1.0);
  EXPECT_DOUBLE_EQ(g.thetas[0].tx, 0.0);
  EXPECT_DOUBLE_EQ(g.thetas[0].ty, 0.0);
}

TEST(DeriveGtTheta, TopLeftQuadrant) {
  IntTensor m({64, 64});
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) m.data[y * 64 + x] = 2;
  auto g = derive_gt_theta(m, RoiSet{{2}, {"q"}}, 0.0);
  ASSERT_TRUE(g.present[0]);
  EXPECT_NEAR(g.thetas[0].sx, 0.5, 1.0 / 63);
  EXPECT_NEAR(g.thetas[0].sy, 0.5, 1.0 / 63);
  EXPECT_NEAR(g.thetas[0].tx, -0.5, 1.0 / 63);
  EXPECT_NEAR(g.thetas[0].ty, -0.5, 1.0 / 63);
}

TEST(DeriveGtTheta, CropCoversExactlyTheBox) {
  IntTensor m({64, 64});
  for (int y = 10; y <= 29; ++y)
    for (int x = 40; x <= 55; ++x) m.data[y * 64 + x] = 1;
  auto g = derive_gt_theta(m, RoiSet{{1}, {"a"}}, 0.0);
  auto grid = affine_grid(theta_tensor<double>(g.thetas), 2, 2);
  auto px = [](double u) { return (u + 1) * 63 / 2; };
  EXPECT_NEAR(px(grid.data()[0]), 40, 1e-9);
  EXPECT_NEAR(px(grid.data()[1]), 10, 1e-9);
  EXPECT_NEAR(px(grid.data()[6]), 55, 1e-9);
  EXPECT_NEAR(px(grid.data()[7]), 29, 1e-9);
}

TEST(DeriveGtTheta, AbsentRoiFlaggedOthersUnaffected) {
  IntTensor m({16, 16});
  for (int i = 0; i < 16; ++i) m.data[i] = 1;
  auto both = derive_gt_theta(m, RoiSet{{1, 2}, {"a", "b"}}, 0.1);
  auto alone = derive_gt_theta(m, RoiSet{{1}, {"a"}}, 0.1);
  EXPECT_TRUE(both.present[0]);
  EXPECT_FALSE(both.present[1]);
  EXPECT_EQ(both.thetas[0].sx, alone.thetas[0].sx);
  EXPECT_EQ(both.thetas[0].ty, alone.thetas[0].ty);
}

TEST(DeriveGtTheta, MarginClampedToFrame) {
  IntTensor m({32, 32});
  for (int y = 0; y < 32; ++y) m.data[y * 32] = 1;
  auto g = derive_gt_theta(m, RoiSet{{1}, {"a"}}, 0.5);
  EXPECT_DOUBLE_EQ(g.thetas[0].sy, 1.0);
  EXPECT_GE(g.thetas[0].tx - g.thetas[0].sx, -1.0 - 1e-12);
}

TEST(DeriveGtTheta, MinScaleFloorStaysInFrame) {
  IntTensor m({64, 64});
  m.data[0] = 1;
  auto g = derive_gt_theta(m, RoiSet{{1}, {"a"}}, 0.1, 0.25);
  EXPECT_NEAR(g.thetas[0].sx, 0.25, 1e-12);
  EXPECT_NEAR(g.thetas[0].tx, -0.75, 1e-12);
}

TEST(DeriveGtTheta, UnknownLabelThrows) {
  IntTensor m({8, 8});
  m.data[3] = 9;
  EXPECT_THROW(derive_gt_theta(m, RoiSet::cardiac()), std::invalid_argument);
}

TEST(LocalizationNet, IdentityAtInitAndShapes) {
  std::mt19937_64 rng(17);
  LocalizationNet<float> net(6, 5, LocalizerConfig{}, rng);
  auto probs = softmax_channels(random_tensor<float>({2, 6, 32, 32}, 18));
  auto raw = net(probs);
  ASSERT_EQ(raw.shape(), (Shape{2, 5, 4}));
  auto th = build_theta(raw);
  ASSERT_EQ(th.shape(), (Shape{2, 5, 2, 3}));
  const std::vector<float> id{1, 0, 0, 0, 1, 0};
  for (std::size_t i = 0; i < th.numel(); ++i) EXPECT_NEAR(th.data()[i], id[i % 6], 1e-6);
  EXPECT_THROW(net(random_tensor<float>({1, 6, 24, 24}, 1)), ShapeError);
}

TEST(LocalizationNet, GradientCheckThroughTheta) {
  LocalizerConfig cfg;
  cfg.widths = {2, 2, 2, 2, 3, 3, 3, 3};
  for (std::uint64_t seed : {19u, 20u, 21u}) {
    std::mt19937_64 rng(seed);
    LocalizationNet<double> net(3, 2, cfg, rng);
    net.regress.weight = Tensor<double>::randn(net.regress.weight.shape(), rng, 0.5);
    auto probs = softmax_channels(random_tensor<double>({2, 3, 16, 16}, seed + 1));
    std::vector<AffineTheta> target{{0.5, 0.4, 0.1, -0.2}, {0.3, 0.6, -0.4, 0.2},
                                    {0.8, 0.2, 0.0, 0.5}, {0.4, 0.4, 0.3, 0.3}};
    auto tt = theta_tensor<double>(target);
    std::vector<Tensor<double>> params;
    net.visit("", [&](const std::string&, Tensor<double>& t, ParamRole) { params.push_back(t); });
    auto r = grad_check([&] {
      return smooth_l1(build_theta(reshape(net(probs), {4, 4})), tt);
    }, params);
    EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
    EXPECT_GT(r.checked, 100u);
  }
}

TEST(LocalizationNet, CoordinateChannelsOptional) {
  std::mt19937_64 rng(22);
  LocalizerConfig cfg;
  cfg.coord_channels = false;
  LocalizationNet<float> net(6, 5, cfg, rng);
  EXPECT_EQ(net.convs[0].weight.dim(1), 6);
  LocalizationNet<float> with(6, 5, LocalizerConfig{}, rng);
  EXPECT_EQ(with.convs[0].weight.dim(1), 8);
}

}  // namespace
}  // namespace tanet
