#include "tanet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>

#include "tanet/ops.hpp"
#include "tanet/optim.hpp"

namespace tanet {

void AugmentParams::validate() const {
  if (std::abs(rotation_deg) > 15.0) throw std::invalid_argument("augment: rotation outside [-15, 15] degrees");
  if (std::abs(shift_x) > 0.25 || std::abs(shift_y) > 0.25) {
    throw std::invalid_argument("augment: shift outside [-0.25, 0.25]");
  }
  if (scale != 0.75 && scale != 1.0 && scale != 1.25) {
    throw std::invalid_argument("augment: scale must be 0.75, 1 or 1.25");
  }
}

bool AugmentParams::is_identity() const {
  return rotation_deg == 0.0 && shift_x == 0.0 && shift_y == 0.0 && scale == 1.0 && !hflip && !vflip;
}

AugmentParams AugmentParams::draw(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  AugmentParams p;
  p.rotation_deg = 15.0 * u(rng);
  p.shift_x = 0.25 * u(rng);
  p.shift_y = 0.25 * u(rng);
  constexpr double scales[3] = {0.75, 1.0, 1.25};
  p.scale = scales[rng() % 3];
  p.hflip = rng() % 2 == 1;
  p.vflip = rng() % 2 == 1;
  return p;
}

SegSample augment(const SegSample& sample, const AugmentParams& params) {
  params.validate();
  const auto& img = sample.image;
  if (img.rank() != 3 || sample.mask.shape != Shape{img.dim(1), img.dim(2)}) {
    throw ShapeError("augment: image [C,H,W] and mask [H,W] must agree");
  }
  if (params.is_identity()) return {img.clone(), sample.mask, sample.id};
  const std::int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  const double a = params.rotation_deg * 3.14159265358979323846 / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  const double dx = params.shift_x * w, dy = params.shift_y * h;

  Tensor<float> image({c, h, w});
  IntTensor mask({h, w});
  for (std::int64_t i = 0; i < h; ++i) {
    for (std::int64_t j = 0; j < w; ++j) {
      // Inverse map of: rotate, scale, then shift.
      const double ox = j - cx - dx, oy = i - cy - dy;
      const double sx = (ca * ox + sa * oy) / params.scale + cx;
      const double sy = (-sa * ox + ca * oy) / params.scale + cy;
      const std::int64_t ti = params.vflip ? h - 1 - i : i;
      const std::int64_t tj = params.hflip ? w - 1 - j : j;
      const auto ny = static_cast<std::int64_t>(std::lround(sy));
      const auto nx = static_cast<std::int64_t>(std::lround(sx));
      mask.data[static_cast<std::size_t>(ti * w + tj)] =
          (ny >= 0 && ny < h && nx >= 0 && nx < w) ? sample.mask.data[static_cast<std::size_t>(ny * w + nx)] : 0;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double wx = sx - fx, wy = sy - fy;
      const auto x0 = static_cast<std::int64_t>(fx), y0 = static_cast<std::int64_t>(fy);
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const float* src = img.ptr() + ch * h * w;
        auto at = [&](std::int64_t y, std::int64_t x) {
          return (y >= 0 && y < h && x >= 0 && x < w) ? static_cast<double>(src[y * w + x]) : 0.0;
        };
        const double v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x0 + 1)) +
                         wy * ((1 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1));
        image.ptr()[ch * h * w + ti * w + tj] = static_cast<float>(v);
      }
    }
  }
  return {std::move(image), std::move(mask), sample.id};
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("TrainConfig: lr must be finite and >= 0");
  if (epochs_joint < 1 || epochs_pretrain < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (plateau_patience < 1) throw std::invalid_argument("TrainConfig: plateau_patience must be >= 1");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) {
    throw std::invalid_argument("TrainConfig: plateau_factor must be in (0, 1)");
  }
  if (weights.seg < 0 || weights.coarse < 0 || weights.theta < 0) {
    throw std::invalid_argument("TrainConfig: loss weights must be >= 0");
  }
  if (gt_margin < 0.0 || gt_min_scale < 0.0 || gt_min_scale > 1.0) {
    throw std::invalid_argument("TrainConfig: gt_margin >= 0 and gt_min_scale in [0, 1] required");
  }
}

PlateauScheduler::PlateauScheduler(double lr, int patience, double factor)
    : lr_(lr), patience_(patience), factor_(factor), best_(std::numeric_limits<double>::infinity()) {
  if (patience < 1 || !(factor > 0.0 && factor < 1.0)) {
    throw std::invalid_argument("PlateauScheduler: patience >= 1 and factor in (0, 1) required");
  }
}

double PlateauScheduler::step(double loss) {
  if (loss < best_) {
    best_ = loss;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ >= patience_) {
    lr_ *= factor_;
    ++reductions_;
    bad_epochs_ = 0;
  }
  return lr_;
}

Tensor<float> stack_images(std::span<const SegSample> samples) {
  if (samples.empty()) throw std::invalid_argument("stack_images: empty batch");
  Shape shape = samples[0].image.shape();
  shape.insert(shape.begin(), static_cast<std::int64_t>(samples.size()));
  Tensor<float> out(shape);
  const std::size_t per = samples[0].image.numel();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].image.shape() != samples[0].image.shape()) throw ShapeError("stack_images: mixed sizes");
    std::copy(samples[i].image.data().begin(), samples[i].image.data().end(), out.ptr() + i * per);
  }
  return out;
}

IntTensor stack_masks(std::span<const SegSample> samples) {
  if (samples.empty()) throw std::invalid_argument("stack_masks: empty batch");
  Shape shape = samples[0].mask.shape;
  shape.insert(shape.begin(), static_cast<std::int64_t>(samples.size()));
  IntTensor out(shape);
  const std::size_t per = samples[0].mask.numel();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].mask.shape != samples[0].mask.shape) throw ShapeError("stack_masks: mixed sizes");
    std::copy(samples[i].mask.data.begin(), samples[i].mask.data.end(), out.data.begin() + i * per);
  }
  return out;
}

namespace {

enum class Stage { kCoarse = 1, kLocalizer = 2, kJoint = 3 };

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kCoarse: return "coarse";
    case Stage::kLocalizer: return "stn";
    case Stage::kJoint: return "joint";
  }
  return "?";
}

std::mt19937_64 stream(std::uint64_t seed, Stage stage, int epoch, std::int64_t item) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stage), static_cast<std::uint32_t>(epoch),
                    static_cast<std::uint32_t>(item)};
  return std::mt19937_64(seq);
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, Stage stage, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  auto rng = stream(seed, stage, epoch, -1);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

std::vector<SegSample> gather(std::span<const SegSample> data, std::span<const std::size_t> idx,
                              const TrainConfig& cfg, Stage stage, int epoch) {
  std::vector<SegSample> batch;
  for (std::size_t i : idx) {
    if (cfg.augment) {
      auto rng = stream(cfg.seed, stage, epoch, static_cast<std::int64_t>(i));
      batch.push_back(augment(data[i], AugmentParams::draw(rng)));
    } else {
      batch.push_back(data[i]);
    }
  }
  return batch;
}

struct ThetaTargets {
  std::vector<AffineTheta> thetas;  // [B*N]
  std::vector<bool> present;
  std::vector<float> mask6;         // 6 per transform
  bool any_present = false;
};

ThetaTargets theta_targets(const IntTensor& masks, const RoiSet& rois, const TrainConfig& cfg) {
  const std::int64_t batch = masks.dim(0), h = masks.dim(1), w = masks.dim(2);
  ThetaTargets t;
  for (std::int64_t b = 0; b < batch; ++b) {
    IntTensor one({h, w});
    std::copy_n(masks.data.begin() + b * h * w, h * w, one.data.begin());
    const GtThetas gt = derive_gt_theta(one, rois, cfg.gt_margin, cfg.gt_min_scale);
    for (std::size_t r = 0; r < rois.size(); ++r) {
      t.thetas.push_back(gt.thetas[r]);
      t.present.push_back(gt.present[r]);
      t.mask6.insert(t.mask6.end(), 6, gt.present[r] ? 1.0f : 0.0f);
      t.any_present = t.any_present || gt.present[r];
    }
  }
  return t;
}

template <typename Module>
std::vector<Tensor<float>> params_of(Module& m) {
  return learnable_parameters<float>(m);
}

std::vector<Tensor<float>> frozen_snapshot(TaNet<float>& net) {
  std::vector<Tensor<float>> out;
  net.visit("", [&](const std::string&, Tensor<float>& t, ParamRole role) {
    if (role == ParamRole::kFrozen) out.push_back(t.clone());
  });
  return out;
}

void restore_frozen(TaNet<float>& net, const std::vector<Tensor<float>>& snap) {
  std::size_t i = 0;
  net.visit("", [&](const std::string&, Tensor<float>& t, ParamRole role) {
    if (role == ParamRole::kFrozen) {
      std::copy(snap[i].data().begin(), snap[i].data().end(), t.data().begin());
      ++i;
    }
  });
}

bool finite(double v) { return std::isfinite(v); }

struct Batcher {
  std::span<const SegSample> data;
  const TrainConfig& cfg;
  Stage stage;

  template <typename F>
  void run_epoch(int epoch, F&& body) const {
    const auto order = epoch_order(data.size(), cfg.seed, stage, epoch);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const auto batch = gather(data, std::span(order).subspan(start, end - start), cfg, stage, epoch);
      body(batch);
    }
  }
};

// Drives one stage: per-epoch training loss, validation, plateau schedule.
template <typename TrainStep, typename Validate>
StageResult run_stage(TaNet<float>& net, Stage stage, int epochs, std::span<const SegSample> train,
                      const TrainConfig& cfg, std::vector<Tensor<float>> params, TrainStep&& train_step,
                      Validate&& validate, const EpochCallback& on_epoch) {
  if (train.empty()) throw std::invalid_argument(std::string(stage_name(stage)) + " stage: empty dataset");
  const auto frozen = cfg.lr == 0.0 ? frozen_snapshot(net) : std::vector<Tensor<float>>{};
  AdamState<float> adam;
  adam.lr = cfg.lr;
  PlateauScheduler sched(cfg.lr, cfg.plateau_patience, cfg.plateau_factor);
  StageResult result;
  Batcher batcher{train, cfg, stage};
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    double total = 0.0;
    int batches = 0;
    batcher.run_epoch(epoch, [&](const std::vector<SegSample>& batch) {
      Tape::current().clear();
      std::optional<Tensor<float>> loss = train_step(batch);
      if (!loss) {
        ++result.skipped_batches;
        return;
      }
      backward(*loss);
      adam_step(params, adam);
      total += loss->item();
      ++batches;
    });
    Tape::current().clear();
    const auto [val_loss, val_iou] = validate();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.stage = stage_name(stage);
    rec.loss = batches > 0 ? total / batches : std::numeric_limits<double>::quiet_NaN();
    rec.val_loss = val_loss;
    rec.val_mean_iou = val_iou;
    rec.lr = adam.lr;
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (!finite(rec.loss) || !finite(val_loss)) {
      throw std::runtime_error(std::string(stage_name(stage)) + " stage: non-finite loss at epoch " +
                               std::to_string(epoch));
    }
    adam.lr = sched.step(val_loss);
  }
  if (cfg.lr == 0.0) restore_frozen(net, frozen);
  return result;
}

double box_iou(const AffineTheta& a, const AffineTheta& b) {
  const double ix = std::max(0.0, std::min(a.tx + a.sx, b.tx + b.sx) - std::max(a.tx - a.sx, b.tx - b.sx));
  const double iy = std::max(0.0, std::min(a.ty + a.sy, b.ty + b.sy) - std::max(a.ty - a.sy, b.ty - b.sy));
  const double inter = ix * iy;
  const double uni = 4.0 * a.sx * a.sy + 4.0 * b.sx * b.sy - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<std::span<const SegSample>> chunks(std::span<const SegSample> data, int size) {
  std::vector<std::span<const SegSample>> out;
  for (std::size_t s = 0; s < data.size(); s += static_cast<std::size_t>(size)) {
    out.push_back(data.subspan(s, std::min<std::size_t>(size, data.size() - s)));
  }
  return out;
}

}  // namespace

StageResult pretrain_coarse(TaNet<float>& net, std::span<const SegSample> train,
                            std::span<const SegSample> val, const TrainConfig& cfg,
                            const EpochCallback& on_epoch) {
  cfg.validate();
  const auto step = [&](const std::vector<SegSample>& batch) -> std::optional<Tensor<float>> {
    const auto images = stack_images(batch);
    return softmax_cross_entropy(net.coarse(images, true), stack_masks(batch));
  };
  const auto validate = [&]() -> std::pair<double, double> {
    if (val.empty()) return {0.0, 0.0};
    NoGradGuard no_grad;
    double loss = 0.0;
    std::vector<IntTensor> preds, gts;
    std::vector<int> labels{0};
    labels.insert(labels.end(), net.config().rois.labels.begin(), net.config().rois.labels.end());
    for (auto chunk : chunks(val, cfg.batch_size)) {
      const auto images = stack_images(chunk);
      const auto logits = net.coarse(images, false);
      loss += softmax_cross_entropy(logits, stack_masks(chunk)).item() * static_cast<double>(chunk.size());
      const std::int64_t k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
      for (std::size_t b = 0; b < chunk.size(); ++b) {
        Tensor<float> one({k, h, w}, std::vector<float>(logits.ptr() + b * k * h * w, logits.ptr() + (b + 1) * k * h * w));
        preds.push_back(argmax_labels(one, labels));
        gts.push_back(chunk[b].mask);
      }
    }
    return {loss / static_cast<double>(val.size()), evaluate_masks(preds, gts, net.config().rois).mean_iou()};
  };
  return run_stage(net, Stage::kCoarse, cfg.epochs_pretrain, train, cfg, params_of(net.coarse), step, validate,
                   on_epoch);
}

StageResult pretrain_localizer(TaNet<float>& net, std::span<const SegSample> train,
                               std::span<const SegSample> val, const TrainConfig& cfg,
                               const EpochCallback& on_epoch) {
  cfg.validate();
  const RoiSet& rois = net.config().rois;
  const auto n = static_cast<std::int64_t>(rois.size());
  auto theta_loss = [&](const Tensor<float>& images, const ThetaTargets& t) {
    Tensor<float> probs;
    {
      NoGradGuard no_grad;
      probs = softmax_channels(net.coarse(images, false));
    }
    const Tensor<float> raw = net.localizer(probs);
    const Tensor<float> theta = build_theta(reshape(raw, {images.dim(0) * n, 4}));
    return std::pair{smooth_l1(theta, theta_tensor<float>(t.thetas), std::span<const float>(t.mask6)), theta};
  };
  const auto step = [&](const std::vector<SegSample>& batch) -> std::optional<Tensor<float>> {
    const ThetaTargets t = theta_targets(stack_masks(batch), rois, cfg);
    if (!t.any_present) {
      std::cerr << "warning: stn stage: batch without any ROI skipped\n";
      return std::nullopt;
    }
    return theta_loss(stack_images(batch), t).first;
  };
  const auto validate = [&]() -> std::pair<double, double> {
    if (val.empty()) return {0.0, 0.0};
    NoGradGuard no_grad;
    double loss = 0.0, iou_sum = 0.0;
    std::int64_t present = 0;
    for (auto chunk : chunks(val, cfg.batch_size)) {
      const ThetaTargets t = theta_targets(stack_masks(chunk), rois, cfg);
      const auto [l, theta] = theta_loss(stack_images(chunk), t);
      loss += l.item() * static_cast<double>(chunk.size());
      const auto pred = thetas_from_tensor(theta);
      for (std::size_t m = 0; m < pred.size(); ++m) {
        if (!t.present[m]) continue;
        iou_sum += box_iou(pred[m], t.thetas[m]);
        ++present;
      }
    }
    return {loss / static_cast<double>(val.size()), present ? iou_sum / static_cast<double>(present) : 0.0};
  };
  return run_stage(net, Stage::kLocalizer, cfg.epochs_pretrain, train, cfg, params_of(net.localizer), step,
                   validate, on_epoch);
}

Tensor<float> joint_loss(TaNet<float>& net, const Tensor<float>& images, const IntTensor& masks,
                         const TrainConfig& cfg, bool training) {
  const RoiSet& rois = net.config().rois;
  const auto n = static_cast<std::int64_t>(rois.size());
  const ForwardMode mode = cfg.mode();
  const ThetaTargets t = theta_targets(masks, rois, cfg);
  const bool teacher = mode.use_stn && cfg.teacher_crops && training;
  const TaNetOutput<float> out =
      net.forward(images, training, mode, teacher ? std::span<const AffineTheta>(t.thetas) : std::span<const AffineTheta>());

  std::vector<AffineTheta> label_window;
  if (!mode.use_stn) {
    label_window.assign(t.thetas.size(), AffineTheta::identity());
  } else if (teacher) {
    label_window = t.thetas;
  } else {
    label_window = thetas_from_tensor(out.theta);
  }
  const std::int64_t ch = out.roi_logits.dim(2), cw = out.roi_logits.dim(3);
  IntTensor labels = sample_labels_nearest(masks, label_window, ch, cw, 0);
  constexpr int kIgnore = -1;
  for (std::size_t m = 0; m < label_window.size(); ++m) {
    const int roi_label = rois.labels[m % static_cast<std::size_t>(n)];
    auto first = labels.data.begin() + static_cast<std::ptrdiff_t>(m * ch * cw);
    std::transform(first, first + ch * cw, first, [&](std::int32_t v) {
      return t.present[m] ? (v == roi_label ? 1 : 0) : kIgnore;
    });
  }
  Tensor<float> total = scale(softmax_cross_entropy(out.roi_logits, labels, kIgnore),
                              static_cast<float>(cfg.weights.seg));
  if (mode.use_stn) {
    total = add(total, scale(softmax_cross_entropy(out.coarse_logits, masks), static_cast<float>(cfg.weights.coarse)));
    const Tensor<float> target = theta_tensor<float>(t.thetas);
    total = add(total, scale(smooth_l1(out.theta, target, std::span<const float>(t.mask6)),
                             static_cast<float>(cfg.weights.theta)));
  }
  return total;
}

std::vector<Tensor<float>> joint_parameters(TaNet<float>& net, ForwardMode mode) {
  std::vector<Tensor<float>> out;
  auto take = [&](const std::string&, Tensor<float>& t, ParamRole role) {
    if (role == ParamRole::kLearnable) out.push_back(t);
  };
  if (mode.use_stn) {
    net.coarse.visit("coarse", take);
    net.localizer.visit("localizer", take);
  }
  net.backbone.sp.visit("sp", take);
  if (mode.use_hp) net.backbone.hp.visit("hp", take);
  net.backbone.gp.visit("gp", take);
  net.backbone.head.visit("head", take);
  return out;
}

RegionScores evaluate_model(TaNet<float>& net, std::span<const SegSample> samples, ForwardMode mode,
                            int batch_size) {
  if (samples.empty()) throw std::invalid_argument("evaluate_model: no samples");
  std::vector<IntTensor> preds, gts;
  for (auto chunk : chunks(samples, batch_size)) {
    const IntTensor masks = net.predict_masks(stack_images(chunk), mode);
    const std::int64_t h = masks.dim(1), w = masks.dim(2);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      IntTensor one({h, w});
      std::copy_n(masks.data.begin() + static_cast<std::ptrdiff_t>(b * h * w), h * w, one.data.begin());
      preds.push_back(std::move(one));
      gts.push_back(chunk[b].mask);
    }
  }
  return evaluate_masks(preds, gts, net.config().rois);
}

StageResult finetune_joint(TaNet<float>& net, std::span<const SegSample> train,
                           std::span<const SegSample> val, const TrainConfig& cfg,
                           const EpochCallback& on_epoch) {
  cfg.validate();
  const auto step = [&](const std::vector<SegSample>& batch) -> std::optional<Tensor<float>> {
    return joint_loss(net, stack_images(batch), stack_masks(batch), cfg, true);
  };
  const auto validate = [&]() -> std::pair<double, double> {
    if (val.empty()) return {0.0, 0.0};
    double loss = 0.0;
    {
      NoGradGuard no_grad;
      for (auto chunk : chunks(val, cfg.batch_size)) {
        loss += joint_loss(net, stack_images(chunk), stack_masks(chunk), cfg, false).item() *
                static_cast<double>(chunk.size());
      }
    }
    return {loss / static_cast<double>(val.size()), evaluate_model(net, val, cfg.mode(), cfg.batch_size).mean_iou()};
  };
  return run_stage(net, Stage::kJoint, cfg.epochs_joint, train, cfg, joint_parameters(net, cfg.mode()), step,
                   validate, on_epoch);
}

void write_history_csv(std::span<const EpochRecord> history, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f << "epoch,stage,loss,val_mean_iou,lr\n";
  char line[256];
  for (const auto& r : history) {
    std::snprintf(line, sizeof(line), "%d,%s,%.9g,%.9g,%.9g\n", r.epoch, r.stage.c_str(), r.loss, r.val_mean_iou,
                  r.lr);
    f << line;
  }
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::vector<NamedTensor> export_state(TaNet<float>& net) {
  std::vector<NamedTensor> out;
  net.visit("", [&](const std::string& name, Tensor<float>& t, ParamRole role) {
    out.push_back({name, t.clone(), role == ParamRole::kFrozen});
  });
  return out;
}

void import_state(TaNet<float>& net, std::span<const NamedTensor> state) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& e : state) by_name[e.name] = &e;
  std::size_t used = 0;
  std::vector<std::pair<Tensor<float>, const NamedTensor*>> plan;
  net.visit("", [&](const std::string& name, Tensor<float>& t, ParamRole role) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw std::invalid_argument("checkpoint is missing " + name);
    if (it->second->tensor.shape() != t.shape()) {
      throw std::invalid_argument("checkpoint entry " + name + " has shape " + to_string(it->second->tensor.shape()) +
                                  ", model expects " + to_string(t.shape()));
    }
    if (it->second->frozen != (role == ParamRole::kFrozen)) {
      throw std::invalid_argument("checkpoint entry " + name + " has the wrong frozen flag");
    }
    plan.emplace_back(t, it->second);
    ++used;
  });
  if (used != state.size()) throw std::invalid_argument("checkpoint has entries the model does not know");
  for (auto& [t, e] : plan) std::copy(e->tensor.data().begin(), e->tensor.data().end(), t.data().begin());
  net.after_load();
}

}  // namespace tanet
