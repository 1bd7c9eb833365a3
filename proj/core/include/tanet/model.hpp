#pragma once

// The assembled network: coarse segmenter -> localizer -> per-ROI crops ->
// shared trilateral backbone -> per-ROI logits, and full-frame prediction by
// inverse paste.

#include <cstdint>
#include <string>
#include <vector>

#include "tanet/backbone.hpp"
#include "tanet/layers.hpp"
#include "tanet/stn.hpp"
#include "tanet/tensor.hpp"

namespace tanet {

struct ModelConfig {
  int in_channels = 3;
  int image_h = 64;
  int image_w = 64;
  RoiSet rois = RoiSet::cardiac();
  BackboneConfig backbone;
  LocalizerConfig localizer;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Which parts of the network run. With use_stn off every ROI gets the
/// identity crop and the coarse/localizer stages are skipped; with use_hp off
/// the handcrafted pathway contributes zeros to the fusion.
struct ForwardMode {
  bool use_stn = true;
  bool use_hp = true;
};

template <typename T>
struct TaNetOutput {
  Tensor<T> coarse_logits;  // [B,1+N,H,W]; undefined without STN
  Tensor<T> theta;          // [B*N,2,3]
  Tensor<T> crops;          // [B*N,C,h,w]
  Tensor<T> roi_logits;     // [B*N,2,h,w]
};

template <typename T>
class TaNet {
 public:
  TaNet() = default;
  explicit TaNet(const ModelConfig& config);

  /// A non-empty `crop_window` (B*N transforms) replaces the predicted
  /// transforms for cropping; theta still holds the prediction.
  TaNetOutput<T> forward(const Tensor<T>& images, bool training, ForwardMode mode = {},
                         std::span<const AffineTheta> crop_window = {});
  /// Full-frame label masks [B,H,W] (eval mode, no gradient).
  IntTensor predict_masks(const Tensor<T>& images, ForwardMode mode = {});
  /// Raw localizer output [B,N,4] from images (coarse -> softmax -> L).
  Tensor<T> localize(const Tensor<T>& images, bool training);

  void visit(const std::string& prefix, const ParamVisitor<T>& f);
  /// Re-derives cached state after parameters were overwritten (LBP banks).
  void after_load();

  const ModelConfig& config() const { return config_; }
  int num_rois() const { return static_cast<int>(config_.rois.size()); }

  CoarseSegmenter<T> coarse;
  LocalizationNet<T> localizer;
  Backbone<T> backbone;

 private:
  ModelConfig config_;
};

extern template class TaNet<float>;
extern template class TaNet<double>;

}  // namespace tanet
