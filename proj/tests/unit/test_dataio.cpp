#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <thread>

#include "tanet/dataio.hpp"
#include "tanet/model.hpp"
#include "tanet/trainer.hpp"
#include "test_util.hpp"

namespace tanet {
namespace {

namespace fs = std::filesystem;
using testutil::random_tensor;

class TempDir {
 public:
  TempDir() {
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = fs::temp_directory_path() / ("tanet_test_" + std::to_string(stamp));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

TEST(Phantom, DeterministicPerIndex) {
  PhantomSpec spec;
  spec.seed = 3;
  auto a = generate_phantom(spec, 5), b = generate_phantom(spec, 5), c = generate_phantom(spec, 6);
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_TRUE(std::equal(a.image.data().begin(), a.image.data().end(), b.image.data().begin()));
  EXPECT_NE(a.mask, c.mask);
  EXPECT_EQ(a.id, "phantom_00005");
  auto ds = generate_phantom_dataset(spec, 8);
  EXPECT_EQ(ds[5].mask, a.mask);
}

TEST(Phantom, RegionsPresentWithinBounds) {
  PhantomSpec spec;
  const auto ds = generate_phantom_dataset(spec, 60);
  for (const auto& s : ds) {
    ASSERT_EQ(s.image.shape(), (Shape{3, 64, 64}));
    std::vector<int> count(6, 0);
    for (int v : s.mask.data) {
      ASSERT_GE(v, 0);
      ASSERT_LE(v, 5);
      ++count[v];
    }
    for (int r = 1; r <= 5; ++r) EXPECT_GE(count[r] / 4096.0, spec.min_fraction) << s.id << " region " << r;
    EXPECT_LE(count[4] / 4096.0, spec.max_thin_fraction) << s.id;
    EXPECT_LE(count[5] / 4096.0, spec.max_thin_fraction) << s.id;
    for (float v : s.image.data()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
}

TEST(Phantom, NoSpeckleGivesConstantInteriors) {
  PhantomSpec spec;
  spec.speckle = 0.0;
  const auto s = generate_phantom(spec, 2);
  std::vector<float> seen(6, -1.0f);
  for (std::size_t p = 0; p < s.mask.data.size(); ++p) {
    const int l = s.mask.data[p];
    if (l == 0) continue;
    if (seen[l] < 0) seen[l] = s.image.data()[p];
    for (int c = 0; c < 3; ++c) ASSERT_EQ(s.image.data()[c * 4096 + p], seen[l]) << "label " << l;
  }
  for (int l = 1; l <= 5; ++l) EXPECT_NEAR(seen[l], kPhantomIntensity[l], 0.02 * spec.jitter + 1e-6);
}

TEST(Phantom, ImpossibleSpecThrows) {
  PhantomSpec spec;
  spec.min_fraction = 0.2;
  spec.max_thin_fraction = 0.3;
  spec.max_attempts = 5;
  EXPECT_THROW(generate_phantom(spec, 0), std::runtime_error);
  PhantomSpec bad;
  bad.height = 8;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Phantom, SplitIsEightyTenTen) {
  PhantomSpec spec;
  auto split = split_dataset(generate_phantom_dataset(spec, 20));
  EXPECT_EQ(split.train.size(), 16u);
  EXPECT_EQ(split.val.size(), 2u);
  EXPECT_EQ(split.test.size(), 2u);
  EXPECT_EQ(split.val[0].id, "phantom_00016");
}

TEST(ResizeBicubic, IdentityAndConstant) {
  auto x = random_tensor<float>({2, 9, 7}, 1, 0, 1);
  auto y = resize_bicubic(x, 9, 7);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-6);
  Tensor<float> c({1, 5, 5}, 0.42f);
  auto z = resize_bicubic(c, 13, 8);
  for (float v : z.data()) EXPECT_NEAR(v, 0.42f, 1e-6);
  EXPECT_THROW(resize_bicubic(Tensor<float>({1, 3, 8}), 6, 6), std::invalid_argument);
}

double catmull_rom(double t) {
  t = std::abs(t);
  const double a = -0.5;
  if (t <= 1) return (a + 2) * t * t * t - (a + 3) * t * t + 1;
  if (t < 2) return a * t * t * t - 5 * a * t * t + 8 * a * t - 4 * a;
  return 0;
}

TEST(ResizeBicubic, RampMatchesKernelSumOracle) {
  Tensor<float> x({1, 8, 8});
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) x.data()[i * 8 + j] = 0.1f * i + 0.05f * j;
  auto y = resize_bicubic(x, 16, 16);
  auto clampi = [](int v) { return std::clamp(v, 0, 7); };
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) {
      const double sy = i * 7.0 / 15.0, sx = j * 7.0 / 15.0;
      double acc = 0;
      for (int ky = -1; ky <= 2; ++ky)
        for (int kx = -1; kx <= 2; ++kx) {
          const int py = static_cast<int>(std::floor(sy)) + ky, px = static_cast<int>(std::floor(sx)) + kx;
          acc += catmull_rom(sy - py) * catmull_rom(sx - px) * x.data()[clampi(py) * 8 + clampi(px)];
        }
      EXPECT_NEAR(y.data()[i * 16 + j], acc, 1e-5);
    }
}

TEST(ResizeBicubic, SmoothImageKeepsMean) {
  Tensor<float> x({1, 32, 32});
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 32; ++j) x.data()[i * 32 + j] = static_cast<float>(0.5 + 0.3 * std::sin(i / 6.0) * std::cos(j / 5.0));
  auto y = resize_bicubic(x, 64, 48);
  double mx = 0, my = 0;
  for (float v : x.data()) mx += v;
  for (float v : y.data()) my += v;
  mx /= x.numel();
  my /= y.numel();
  EXPECT_NEAR(my, mx, 0.01 * mx);
}

TEST(ResizeNearest, KeepsLabelSet) {
  IntTensor m({4, 4});
  for (int i = 0; i < 16; ++i) m.data[i] = i % 4;
  auto r = resize_nearest(m, 9, 9);
  for (int v : r.data) EXPECT_TRUE(v >= 0 && v < 4);
  EXPECT_EQ(r.data[0], m.data[0]);
  EXPECT_EQ(r.data[80], m.data[15]);
  EXPECT_EQ(resize_nearest(m, 4, 4), m);
}

TEST(Pgm, MaskRoundTripAndHeader) {
  TempDir dir;
  IntTensor m({64, 64});
  for (int i = 0; i < 4096; ++i) m.data[i] = i % 6;
  save_pgm(m, dir / "m.pgm");
  EXPECT_EQ(load_pgm_mask(dir / "m.pgm"), m);
  const auto bytes = read_bytes(dir / "m.pgm");
  const std::string header = "P5\n64 64\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 4096);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + header.size()), header);
}

TEST(Pgm, ImageWithinOneLevel) {
  TempDir dir;
  auto img = random_tensor<float>({1, 10, 12}, 2, 0, 1);
  save_pgm(img, dir / "i.pgm");
  auto back = load_pgm_image(dir / "i.pgm");
  ASSERT_EQ(back.shape(), (Shape{1, 10, 12}));
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_LE(std::abs(back.data()[i] - img.data()[i]), 1.0 / 255);
}

TEST(Pgm, TruncatedAndMalformedRejected) {
  TempDir dir;
  IntTensor m({8, 8}, 1);
  save_pgm(m, dir / "m.pgm");
  auto bytes = read_bytes(dir / "m.pgm");
  bytes.resize(bytes.size() - 5);
  write_bytes(dir / "t.pgm", bytes);
  try {
    load_pgm_mask(dir / "t.pgm");
    FAIL() << "truncated file accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
  write_bytes(dir / "bad.pgm", {'P', '2', '\n', '1', ' ', '1', '\n', '2', '5', '5', '\n', '0'});
  EXPECT_THROW(load_pgm_mask(dir / "bad.pgm"), FormatError);
  EXPECT_THROW(load_pgm_mask(dir / "missing.pgm"), std::runtime_error);
  IntTensor big({2, 2}, 300);
  EXPECT_THROW(save_pgm(big, dir / "big.pgm"), std::out_of_range);
}

TEST(Pgm, ColorPlanes) {
  TempDir dir;
  auto img = random_tensor<float>({3, 6, 5}, 3, 0, 1);
  const std::string prefix = (dir / "c").string();
  save_color_image(img, prefix);
  EXPECT_TRUE(fs::exists(prefix + ".r.pgm"));
  EXPECT_TRUE(fs::exists(prefix + ".b.pgm"));
  auto back = load_color_image(prefix);
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_LE(std::abs(back.data()[i] - img.data()[i]), 1.0 / 255);
}

TEST(Checkpoint, RoundTripBitIdentical) {
  TempDir dir;
  std::vector<NamedTensor> e{{"a", random_tensor<float>({3, 4}, 4), false},
                             {"b.bank", random_tensor<float>({2, 1, 3, 3}, 5), true},
                             {"c", Tensor<float>({1}, 7.5f), false}};
  save_checkpoint(e, dir / "x.ckpt");
  auto back = load_checkpoint(dir / "x.ckpt");
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].name, e[i].name);
    EXPECT_EQ(back[i].frozen, e[i].frozen);
    EXPECT_EQ(back[i].tensor.shape(), e[i].tensor.shape());
    EXPECT_EQ(0, std::memcmp(back[i].tensor.ptr(), e[i].tensor.ptr(), e[i].tensor.numel() * sizeof(float)));
  }
  save_checkpoint(back, dir / "y.ckpt");
  EXPECT_EQ(read_bytes(dir / "x.ckpt"), read_bytes(dir / "y.ckpt"));
  const auto bytes = read_bytes(dir / "x.ckpt");
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TANT");
  EXPECT_EQ(bytes[4], kCheckpointVersion);
}

TEST(Checkpoint, RejectsBadMagicVersionAndDuplicates) {
  TempDir dir;
  std::vector<NamedTensor> e{{"a", Tensor<float>({2}, 1.0f), false}};
  save_checkpoint(e, dir / "x.ckpt");
  auto bytes = read_bytes(dir / "x.ckpt");
  auto bad = bytes;
  std::copy_n("XXXX", 4, bad.begin());
  write_bytes(dir / "m.ckpt", bad);
  try {
    load_checkpoint(dir / "m.ckpt");
    FAIL();
  } catch (const FormatError& err) {
    EXPECT_NE(std::string(err.what()).find("magic"), std::string::npos);
  }
  bad = bytes;
  bad[4] = 99;
  write_bytes(dir / "v.ckpt", bad);
  EXPECT_THROW(load_checkpoint(dir / "v.ckpt"), FormatError);
  bad = bytes;
  bad.push_back(0);
  write_bytes(dir / "t.ckpt", bad);
  EXPECT_THROW(load_checkpoint(dir / "t.ckpt"), FormatError);
  bytes.resize(bytes.size() - 2);
  write_bytes(dir / "s.ckpt", bytes);
  EXPECT_THROW(load_checkpoint(dir / "s.ckpt"), FormatError);
  std::vector<NamedTensor> dup{{"a", Tensor<float>({1}), false}, {"a", Tensor<float>({1}), false}};
  EXPECT_THROW(save_checkpoint(dup, dir / "d.ckpt"), std::invalid_argument);
}

TEST(Checkpoint, ModelStateIncludesFrozenBanks) {
  ModelConfig mc;
  TaNet<float> net(mc);
  const auto state = export_state(net);
  int banks = 0;
  for (const auto& e : state) {
    if (e.name.ends_with(".bank")) {
      ++banks;
      EXPECT_TRUE(e.frozen) << e.name;
    }
    if (e.name.ends_with(".weight")) EXPECT_FALSE(e.frozen) << e.name;
  }
  EXPECT_EQ(banks, 3);
  TempDir dir;
  save_checkpoint(state, dir / "m.ckpt");
  TaNet<float> other(ModelConfig{.seed = 9});
  import_state(other, load_checkpoint(dir / "m.ckpt"));
  const auto again = export_state(other);
  for (std::size_t i = 0; i < state.size(); ++i)
    ASSERT_EQ(0, std::memcmp(state[i].tensor.ptr(), again[i].tensor.ptr(), state[i].tensor.numel() * sizeof(float)));
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(other.backbone.hp.layers[l].bank, net.backbone.hp.layers[l].bank);
}

TEST(Metrics, BasicCases) {
  IntTensor a({4, 4}), b({4, 4});
  for (int i = 0; i < 8; ++i) a.data[i] = 1;
  EXPECT_EQ(iou(a, a, 1), 1.0);
  EXPECT_EQ(f1(a, a, 1), 1.0);
  for (int i = 8; i < 16; ++i) b.data[i] = 1;
  EXPECT_EQ(iou(a, b, 1), 0.0);
  EXPECT_EQ(f1(a, b, 1), 0.0);
  EXPECT_EQ(iou(a, b, 3), 1.0);
  EXPECT_EQ(f1(a, b, 3), 1.0);
  IntTensor half({4, 4});
  for (int i = 0; i < 4; ++i) half.data[i] = 1;
  // pixel count: intersection 4, union 8
  EXPECT_DOUBLE_EQ(iou(half, a, 1), 0.5);
  EXPECT_DOUBLE_EQ(f1(half, a, 1), 8.0 / 12.0);
  EXPECT_THROW(iou(a, IntTensor({2, 2}), 1), ShapeError);
}

TEST(Metrics, IdentitySymmetryAndOrdering) {
  std::mt19937_64 rng(6);
  std::bernoulli_distribution coin(0.3);
  for (int trial = 0; trial < 100; ++trial) {
    IntTensor p({8, 8}), g({8, 8});
    for (int i = 0; i < 64; ++i) {
      p.data[i] = coin(rng);
      g.data[i] = coin(rng);
    }
    const double j = iou(p, g, 1), d = f1(p, g, 1);
    EXPECT_NEAR(d, 2 * j / (1 + j), 1e-9);
    EXPECT_EQ(j, iou(g, p, 1));
    EXPECT_EQ(d, f1(g, p, 1));
    EXPECT_GE(d, j);
    EXPECT_GE(j, 0.0);
    EXPECT_LE(d, 1.0);
  }
}

TEST(Metrics, EvaluateMasksAveragesPerSample) {
  IntTensor a({2, 2}, 1), b({2, 2}, 0);
  const std::vector<IntTensor> preds{a, a}, gts{a, b};
  const RoiSet rois{{1, 2}, {"x", "y"}};
  auto s = evaluate_masks(preds, gts, rois);
  EXPECT_DOUBLE_EQ(s.iou[0], 0.5);
  EXPECT_DOUBLE_EQ(s.iou[1], 1.0);
  EXPECT_DOUBLE_EQ(s.mean_iou(), 0.75);
  auto self = evaluate_masks(gts, gts, rois);
  EXPECT_EQ(self.mean_iou(), 1.0);
  EXPECT_EQ(self.mean_f1(), 1.0);
}

TEST(Fps, LeavesTapeEmptyAndReportsQuantiles) {
  auto x = random_tensor<float>({1, 3, 16, 16}, 7);
  x.set_requires_grad(true);
  Tape::current().clear();
  auto rep = fps_benchmark([&] { relu(scale(x, 2.0f)); }, 2, 9);
  EXPECT_EQ(Tape::current().size(), 0u);
  EXPECT_EQ(rep.iters, 9);
  EXPECT_GT(rep.fps, 0.0);
  EXPECT_LE(rep.p10_s, rep.median_s);
  EXPECT_LE(rep.median_s, rep.p90_s);
  EXPECT_DOUBLE_EQ(rep.fps, 1.0 / rep.median_s);
  EXPECT_THROW(fps_benchmark([] {}, 0, 0), std::invalid_argument);
}

TEST(Fps, MedianStableUnderMoreIterations) {
  auto work = [] { std::this_thread::sleep_for(std::chrono::milliseconds(2)); };
  const auto a = fps_benchmark(work, 2, 20);
  const auto b = fps_benchmark(work, 2, 40);
  EXPECT_NEAR(b.median_s, a.median_s, 0.2 * a.median_s);
}

}  // namespace
}  // namespace tanet
