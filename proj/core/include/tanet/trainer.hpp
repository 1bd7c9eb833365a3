#pragma once

// Staged training: coarse segmenter, localizer, then joint fine-tuning.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tanet/dataio.hpp"
#include "tanet/model.hpp"

namespace tanet {

struct AugmentParams {
  double rotation_deg = 0.0;  // [-15, 15]
  double shift_x = 0.0;       // fraction of frame, [-0.25, 0.25]
  double shift_y = 0.0;
  double scale = 1.0;         // one of 0.75, 1, 1.25
  bool hflip = false;
  bool vflip = false;

  void validate() const;
  bool is_identity() const;
  /// Uniform rotation and shifts, scale from the three allowed values, fair flips.
  static AugmentParams draw(std::mt19937_64& rng);
};

/// Rotation, scale and shift about the frame centre as one resample (image
/// bilinear with zero fill, mask nearest with background fill), then flips.
SegSample augment(const SegSample& sample, const AugmentParams& params);

struct LossWeights {
  double seg = 1.0;
  double coarse = 0.5;
  double theta = 0.5;
};

struct TrainConfig {
  int batch_size = 8;
  double lr = 1e-3;
  int epochs_joint = 30;
  int epochs_pretrain = 20;
  int plateau_patience = 5;
  double plateau_factor = 0.1;
  std::uint64_t seed = 0;
  bool augment = false;
  LossWeights weights;
  bool use_stn = true;
  bool use_hp = true;
  /// Training crops (images and targets) use the ground-truth window; off
  /// crops both with the predicted window. Validation always predicts.
  bool teacher_crops = true;
  double gt_margin = 0.1;
  double gt_min_scale = 0.25;

  void validate() const;
  ForwardMode mode() const { return {use_stn, use_hp}; }
};

/// Multiplies the learning rate by `factor` once the monitored loss has not
/// improved for `patience` consecutive epochs, then starts counting again.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, int patience, double factor);
  /// Feeds one epoch's loss; returns the learning rate for the next epoch.
  double step(double loss);
  double lr() const { return lr_; }
  int reductions() const { return reductions_; }

 private:
  double lr_;
  int patience_;
  double factor_;
  double best_;
  int bad_epochs_ = 0;
  int reductions_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  std::string stage;
  double loss = 0.0;
  double val_loss = 0.0;
  double val_mean_iou = 0.0;
  double lr = 0.0;
};

struct StageResult {
  std::vector<EpochRecord> history;
  int skipped_batches = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

StageResult pretrain_coarse(TaNet<float>& net, std::span<const SegSample> train,
                            std::span<const SegSample> val, const TrainConfig& config,
                            const EpochCallback& on_epoch = {});
/// The coarse segmenter stays frozen (eval mode, no updates).
StageResult pretrain_localizer(TaNet<float>& net, std::span<const SegSample> train,
                               std::span<const SegSample> val, const TrainConfig& config,
                               const EpochCallback& on_epoch = {});
StageResult finetune_joint(TaNet<float>& net, std::span<const SegSample> train,
                           std::span<const SegSample> val, const TrainConfig& config,
                           const EpochCallback& on_epoch = {});

/// Joint objective on one batch (for gradient audits): images [B,C,H,W],
/// masks [B,H,W].
Tensor<float> joint_loss(TaNet<float>& net, const Tensor<float>& images, const IntTensor& masks,
                         const TrainConfig& config, bool training);

/// Parameters optimized by the joint stage for the given switches.
std::vector<Tensor<float>> joint_parameters(TaNet<float>& net, ForwardMode mode);

RegionScores evaluate_model(TaNet<float>& net, std::span<const SegSample> samples,
                            ForwardMode mode, int batch_size = 8);

/// CSV with header epoch,stage,loss,val_mean_iou,lr.
void write_history_csv(std::span<const EpochRecord> history, const std::filesystem::path& path);

std::vector<NamedTensor> export_state(TaNet<float>& net);
/// Overwrites every tensor of the model; names, shapes and frozen flags must match.
void import_state(TaNet<float>& net, std::span<const NamedTensor> state);

/// Stacks samples into images [B,C,H,W] and masks [B,H,W].
Tensor<float> stack_images(std::span<const SegSample> samples);
IntTensor stack_masks(std::span<const SegSample> samples);

}  // namespace tanet
