#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tanet/dataio.hpp"
#include "tanet/model.hpp"
#include "tanet/trainer.hpp"
#include "test_util.hpp"

namespace tanet {
namespace {

namespace fs = std::filesystem;

std::vector<SegSample> phantoms(int n, std::uint64_t seed = 0) {
  PhantomSpec spec;
  spec.seed = seed;
  return generate_phantom_dataset(spec, n);
}

SegSample smooth_sample() {
  SegSample s{Tensor<float>({3, 64, 64}), IntTensor({64, 64}), "smooth"};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 64; ++i)
      for (int j = 0; j < 64; ++j)
        s.image.ptr()[(c * 64 + i) * 64 + j] =
            static_cast<float>(0.5 + 0.25 * std::sin(i / 9.0 + c) * std::cos(j / 11.0));
  for (int i = 0; i < 64 * 64; ++i) s.mask.data[i] = (i / 64) / 13;
  return s;
}

bool same_bits(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(float)) == 0;
}

bool same_state(const std::vector<NamedTensor>& a, const std::vector<NamedTensor>& b,
                const std::string& prefix = "") {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].name.starts_with(prefix)) continue;
    if (a[i].name != b[i].name || !same_bits(a[i].tensor, b[i].tensor)) return false;
  }
  return true;
}

std::vector<NamedTensor> snapshot(TaNet<float>& net) {
  auto s = export_state(net);
  for (auto& e : s) e.tensor = e.tensor.clone();
  return s;
}

TrainConfig quick_config(int epochs) {
  TrainConfig cfg;
  cfg.epochs_pretrain = epochs;
  cfg.epochs_joint = epochs;
  return cfg;
}

TEST(Augment, IdentityLeavesSampleUnchanged) {
  const auto s = phantoms(1)[0];
  const auto a = augment(s, AugmentParams{});
  EXPECT_TRUE(same_bits(a.image, s.image));
  EXPECT_EQ(a.mask, s.mask);
}

TEST(Augment, FlipIsInvolution) {
  const auto s = phantoms(1, 2)[0];
  AugmentParams p;
  p.hflip = true;
  const auto once = augment(s, p);
  EXPECT_FALSE(once.mask == s.mask);
  EXPECT_EQ(once.mask.data[5], s.mask.data[58]);
  const auto twice = augment(once, p);
  EXPECT_TRUE(same_bits(twice.image, s.image));
  EXPECT_EQ(twice.mask, s.mask);
  p = {};
  p.vflip = true;
  EXPECT_EQ(augment(augment(s, p), p).mask, s.mask);
}

TEST(Augment, RotationRoundTripOnInterior) {
  const auto s = smooth_sample();
  AugmentParams fwd, back;
  fwd.rotation_deg = 15.0;
  back.rotation_deg = -15.0;
  const auto r = augment(augment(s, fwd), back);
  double worst = 0.0;
  for (int c = 0; c < 3; ++c)
    for (int i = 7; i < 57; ++i)
      for (int j = 7; j < 57; ++j) {
        const auto k = (c * 64 + i) * 64 + j;
        worst = std::max(worst, static_cast<double>(std::abs(r.image.ptr()[k] - s.image.ptr()[k])));
      }
  EXPECT_LE(worst, 2.0 / 255);
}

TEST(Augment, LabelsOnlyMapToKnownValues) {
  const auto s = phantoms(1, 3)[0];
  std::mt19937_64 rng(11);
  for (int t = 0; t < 20; ++t) {
    const auto a = augment(s, AugmentParams::draw(rng));
    for (int v : a.mask.data) ASSERT_TRUE(v >= 0 && v <= 5);
  }
}

TEST(Augment, DrawStaysInRange) {
  std::mt19937_64 rng(5);
  int hf = 0;
  std::set<double> scales;
  for (int t = 0; t < 2000; ++t) {
    const auto p = AugmentParams::draw(rng);
    ASSERT_LE(std::abs(p.rotation_deg), 15.0);
    ASSERT_LE(std::abs(p.shift_x), 0.25);
    ASSERT_LE(std::abs(p.shift_y), 0.25);
    scales.insert(p.scale);
    hf += p.hflip;
    EXPECT_NO_THROW(p.validate());
  }
  EXPECT_EQ(scales, (std::set<double>{0.75, 1.0, 1.25}));
  EXPECT_NEAR(hf / 2000.0, 0.5, 0.05);
  AugmentParams bad;
  bad.rotation_deg = 20;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = {};
  bad.scale = 0.9;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Plateau, ConstantLossReducesOnce) {
  PlateauScheduler s(1e-3, 5, 0.1);
  for (int e = 0; e < 6; ++e) s.step(1.0);
  EXPECT_EQ(s.reductions(), 1);
  EXPECT_DOUBLE_EQ(s.lr(), 1e-4);
}

TEST(Plateau, NeverIncreasesAndBoundedReductions) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int patience : {1, 2, 3, 5}) {
    PlateauScheduler s(1.0, patience, 0.5);
    double prev = s.lr();
    const int epochs = 60;
    for (int e = 0; e < epochs; ++e) {
      const double lr = s.step(u(rng));
      ASSERT_LE(lr, prev);
      prev = lr;
    }
    EXPECT_LE(s.reductions(), epochs / patience);
  }
  PlateauScheduler improving(1.0, 2, 0.5);
  for (int e = 0; e < 10; ++e) improving.step(10.0 - e);
  EXPECT_EQ(improving.reductions(), 0);
  EXPECT_THROW(PlateauScheduler(1.0, 0, 0.5), std::invalid_argument);
  EXPECT_THROW(PlateauScheduler(1.0, 2, 1.0), std::invalid_argument);
}

TEST(TrainConfigCheck, RejectsBadValues) {
  EXPECT_NO_THROW(TrainConfig{}.validate());
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.lr = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.plateau_factor = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.weights.theta = -0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Stages, EmptyDatasetThrows) {
  TaNet<float> net(ModelConfig{});
  const std::vector<SegSample> none;
  const auto cfg = quick_config(1);
  EXPECT_THROW(pretrain_coarse(net, none, none, cfg), std::invalid_argument);
  EXPECT_THROW(pretrain_localizer(net, none, none, cfg), std::invalid_argument);
  EXPECT_THROW(finetune_joint(net, none, none, cfg), std::invalid_argument);
}

TEST(Stages, ZeroLearningRateIsBitIdentical) {
  TaNet<float> net(ModelConfig{});
  const auto data = phantoms(8);
  auto cfg = quick_config(1);
  cfg.lr = 0.0;
  const auto before = snapshot(net);
  pretrain_coarse(net, data, data, cfg);
  pretrain_localizer(net, data, data, cfg);
  finetune_joint(net, data, data, cfg);
  EXPECT_TRUE(same_state(before, export_state(net)));
}

TEST(Stages, ZeroLossWeightsLeaveLearnablesUnchanged) {
  TaNet<float> net(ModelConfig{});
  const auto data = phantoms(8);
  auto cfg = quick_config(1);
  cfg.weights = {0.0, 0.0, 0.0};
  const auto before = snapshot(net);
  finetune_joint(net, data, {}, cfg);
  const auto after = export_state(net);
  for (std::size_t i = 0; i < before.size(); ++i)
    if (!before[i].frozen) EXPECT_TRUE(same_bits(before[i].tensor, after[i].tensor)) << before[i].name;
}

TEST(Stages, LocalizerStageLeavesCoarseUntouched) {
  TaNet<float> net(ModelConfig{});
  const auto data = phantoms(16, 1);
  const auto cfg = quick_config(2);
  pretrain_coarse(net, data, data, cfg);
  const auto before = snapshot(net);
  pretrain_localizer(net, data, data, cfg);
  const auto after = export_state(net);
  EXPECT_TRUE(same_state(before, after, "coarse"));
  EXPECT_FALSE(same_state(before, after, "localizer"));
}

TEST(Stages, CoarseConverges) {
  TaNet<float> net(ModelConfig{});
  const auto data = phantoms(64, 4);
  const auto r = pretrain_coarse(net, data, {}, quick_config(20));
  ASSERT_EQ(r.history.size(), 20u);
  for (const auto& e : r.history) ASSERT_TRUE(std::isfinite(e.loss));
  EXPECT_LT(r.history.back().loss, r.history.front().loss);
  RecordProperty("initial_loss", std::to_string(r.history.front().loss));
  RecordProperty("final_loss", std::to_string(r.history.back().loss));
}

TEST(Stages, LocalizerConverges) {
  TaNet<float> net(ModelConfig{});
  const auto data = phantoms(64, 4);
  const auto cfg = quick_config(20);
  pretrain_coarse(net, data, {}, cfg);
  const auto r = pretrain_localizer(net, data, {}, cfg);
  for (const auto& e : r.history) ASSERT_TRUE(std::isfinite(e.loss));
  EXPECT_LT(r.history.back().loss, 0.25 * r.history.front().loss)
      << "initial " << r.history.front().loss << " final " << r.history.back().loss;
}

// Every ROI touches all four frame edges, so each ground-truth window is the full frame.
std::vector<SegSample> identity_window_data(int n) {
  auto data = phantoms(n, 9);
  for (auto& s : data) {
    std::fill(s.mask.data.begin(), s.mask.data.end(), 0);
    for (int r = 1; r <= 5; ++r) {
      s.mask.data[0 * 64 + r] = r;
      s.mask.data[63 * 64 + r] = r;
      s.mask.data[r * 64 + 0] = r;
      s.mask.data[r * 64 + 63] = r;
    }
  }
  return data;
}

TEST(Stages, IdentityTargetsGiveZeroLocalizerLoss) {
  const auto data = identity_window_data(8);
  for (const auto& s : data) {
    const auto gt = derive_gt_theta(s.mask, RoiSet::cardiac(), 0.1, 0.25);
    for (const auto& t : gt.thetas) {
      ASSERT_EQ(t.sx, 1.0);
      ASSERT_EQ(t.tx, 0.0);
    }
  }
  TaNet<float> net(ModelConfig{});
  const auto before = snapshot(net);
  const auto r = pretrain_localizer(net, data, {}, quick_config(2));
  EXPECT_EQ(r.history.front().loss, 0.0);
  EXPECT_TRUE(same_state(before, export_state(net), "localizer"));
}

TEST(Stages, BatchesWithoutRoisAreSkipped) {
  auto data = phantoms(4, 2);
  for (int k = 0; k < 2; ++k) std::fill(data[k].mask.data.begin(), data[k].mask.data.end(), 0);
  auto cfg = quick_config(2);
  cfg.batch_size = 1;
  TaNet<float> net(ModelConfig{});
  testing::internal::CaptureStderr();
  const auto r = pretrain_localizer(net, data, {}, cfg);
  const std::string err = testing::internal::GetCapturedStderr();
  EXPECT_EQ(r.skipped_batches, 4);
  EXPECT_NE(err.find("skipped"), std::string::npos);
  for (const auto& e : r.history) EXPECT_TRUE(std::isfinite(e.loss));
}

double manual_roi_ce(const Tensor<float>& logits, const IntTensor& labels, std::int64_t m) {
  const std::int64_t plane = logits.dim(2) * logits.dim(3);
  double total = 0;
  for (std::int64_t p = 0; p < plane; ++p) {
    const double z0 = logits.ptr()[(m * 2) * plane + p], z1 = logits.ptr()[(m * 2 + 1) * plane + p];
    const double mx = std::max(z0, z1);
    const double lse = mx + std::log(std::exp(z0 - mx) + std::exp(z1 - mx));
    total += lse - (labels.data[m * plane + p] ? z1 : z0);
  }
  return total / static_cast<double>(plane);
}

// Per-ROI binary targets under the ground-truth windows, as the joint loss builds them.
IntTensor roi_targets(const IntTensor& mask, const TrainConfig& cfg) {
  const auto rois = RoiSet::cardiac();
  const auto gt = derive_gt_theta(mask, rois, cfg.gt_margin, cfg.gt_min_scale);
  IntTensor one({1, 64, 64});
  one.data = mask.data;
  auto l = sample_labels_nearest(one, gt.thetas, 64, 64, 0);
  for (std::size_t i = 0; i < l.data.size(); ++i) l.data[i] = l.data[i] == rois.labels[i / 4096] ? 1 : 0;
  return l;
}

TEST(JointLoss, SingleRoiEqualsThatRoiLoss) {
  TaNet<float> net(ModelConfig{});
  auto s = phantoms(1, 5)[0];
  for (auto& v : s.mask.data)
    if (v != 3) v = 0;
  TrainConfig cfg;
  cfg.weights = {1.0, 0.0, 0.0};
  const auto images = stack_images(std::span(&s, 1));
  const auto masks = stack_masks(std::span(&s, 1));
  Tape::current().clear();
  const double loss = joint_loss(net, images, masks, cfg, false).item();
  const auto gt = derive_gt_theta(s.mask, RoiSet::cardiac(), cfg.gt_margin, cfg.gt_min_scale);
  const auto out = net.forward(images, false, {}, gt.thetas);
  Tape::current().clear();
  // validation predicts the window: recompute targets under the predicted transforms
  const auto pred = thetas_from_tensor(out.theta);
  const auto eval_out = net.forward(images, false);
  Tape::current().clear();
  auto labels = sample_labels_nearest(masks, pred, 64, 64, 0);
  for (auto& v : labels.data) v = v == 3 ? 1 : 0;
  EXPECT_NEAR(loss, manual_roi_ce(eval_out.roi_logits, labels, 2), 1e-5);
}

TEST(JointLoss, TeacherLossIsMeanOverPresentRois) {
  TaNet<float> net(ModelConfig{});
  auto s = phantoms(1, 6)[0];
  for (auto& v : s.mask.data)
    if (v != 1 && v != 4) v = 0;
  TrainConfig cfg;
  cfg.weights = {1.0, 0.0, 0.0};
  const auto images = stack_images(std::span(&s, 1));
  const auto masks = stack_masks(std::span(&s, 1));
  Tape::current().clear();
  const double loss = joint_loss(net, images, masks, cfg, true).item();
  const auto gt = derive_gt_theta(s.mask, RoiSet::cardiac(), cfg.gt_margin, cfg.gt_min_scale);
  const auto out = net.forward(images, true, {}, gt.thetas);
  Tape::current().clear();
  const auto labels = roi_targets(s.mask, cfg);
  const double expect = 0.5 * (manual_roi_ce(out.roi_logits, labels, 0) + manual_roi_ce(out.roi_logits, labels, 3));
  EXPECT_NEAR(loss, expect, 1e-5);
}

TEST(History, CsvFormat) {
  const fs::path p = fs::temp_directory_path() / "tanet_history_test.csv";
  std::vector<EpochRecord> h{{1, "coarse", 0.5, 0.4, 0.25, 1e-3}, {2, "joint", 0.125, 0.1, 0.75, 1e-4}};
  write_history_csv(h, p);
  std::ifstream f(p);
  std::string line;
  std::getline(f, line);
  EXPECT_EQ(line, "epoch,stage,loss,val_mean_iou,lr");
  std::getline(f, line);
  EXPECT_TRUE(line.starts_with("1,coarse,0.5,0.25,")) << line;
  std::getline(f, line);
  EXPECT_TRUE(line.starts_with("2,joint,0.125,0.75,")) << line;
  EXPECT_FALSE(std::getline(f, line));
  fs::remove(p);
}

TEST(State, ImportRejectsMismatches) {
  TaNet<float> net(ModelConfig{});
  auto state = export_state(net);
  EXPECT_NO_THROW(import_state(net, state));
  auto wrong_name = state;
  wrong_name[0].name = "nope";
  EXPECT_THROW(import_state(net, wrong_name), std::invalid_argument);
  auto wrong_shape = state;
  wrong_shape[0].tensor = Tensor<float>({1});
  EXPECT_THROW(import_state(net, wrong_shape), std::invalid_argument);
  auto short_state = state;
  short_state.pop_back();
  EXPECT_THROW(import_state(net, short_state), std::invalid_argument);
  auto wrong_flag = state;
  wrong_flag[0].frozen = !wrong_flag[0].frozen;
  EXPECT_THROW(import_state(net, wrong_flag), std::invalid_argument);
}

TEST(Determinism, ShortRunsAreBitIdentical) {
  const auto data = phantoms(12, 8);
  auto cfg = quick_config(1);
  cfg.batch_size = 4;
  cfg.augment = true;
  auto run = [&] {
    TaNet<float> net(ModelConfig{.seed = 2});
    std::vector<EpochRecord> h;
    auto keep = [&](const EpochRecord& r) { h.push_back(r); };
    pretrain_coarse(net, data, data, cfg, keep);
    pretrain_localizer(net, data, data, cfg, keep);
    finetune_joint(net, data, data, cfg, keep);
    return std::make_pair(snapshot(net), h);
  };
  const auto [a, ha] = run();
  const auto [b, hb] = run();
  EXPECT_TRUE(same_state(a, b));
  ASSERT_EQ(ha.size(), hb.size());
  for (std::size_t i = 0; i < ha.size(); ++i) {
    EXPECT_EQ(ha[i].loss, hb[i].loss);
    EXPECT_EQ(ha[i].val_mean_iou, hb[i].val_mean_iou);
  }
}

}  // namespace
}  // namespace tanet
