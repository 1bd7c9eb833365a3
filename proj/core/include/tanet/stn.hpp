#pragma once

// Spatial transformer: constrained affine transforms (scale + translation),
// grid generation, bilinear sampling, inverse paste, the localization network
// and ground-truth transform derivation from label masks.
//
// Coordinates are normalized with the align-corners convention: -1 is the
// center of the first pixel and +1 the center of the last.

#include <random>
#include <span>
#include <string>
#include <vector>

#include "tanet/layers.hpp"
#include "tanet/tensor.hpp"

namespace tanet {

/// Ordered region labels; label 0 is background.
struct RoiSet {
  std::vector<int> labels;
  std::vector<std::string> names;

  /// LV, RV, LA, IVS, PW with labels 1..5.
  static RoiSet cardiac();
  std::size_t size() const { return labels.size(); }
  void validate() const;
};

/// Per-ROI transform [[sx, 0, tx], [0, sy, ty]] mapping target to source coordinates.
struct AffineTheta {
  double sx = 1.0;
  double sy = 1.0;
  double tx = 0.0;
  double ty = 0.0;

  static AffineTheta identity() { return {}; }
  /// Maps source back to target: s -> 1/s, t -> -t/s.
  AffineTheta inverse() const { return {1.0 / sx, 1.0 / sy, -tx / sx, -ty / sy}; }
};

inline constexpr double kMinThetaScale = 1e-3;

/// Raw localizer outputs that build_theta maps to the identity transform.
std::vector<double> identity_raw_theta();

/// Packs raw [..., 4] parameters (raw_sx, raw_sy, raw_tx, raw_ty) into
/// [..., 2, 3] transforms with s = softplus(raw_s) + 1e-3 and t = tanh(raw_t).
/// Off-diagonal entries are structural zeros.
template <typename T>
Tensor<T> build_theta(const Tensor<T>& raw);

/// Materializes transforms as an [M, 2, 3] tensor (no gradient).
template <typename T>
Tensor<T> theta_tensor(std::span<const AffineTheta> thetas);

/// Reads back the free entries of an [M, 2, 3] tensor.
template <typename T>
std::vector<AffineTheta> thetas_from_tensor(const Tensor<T>& theta);

/// Source coordinates [M, out_h, out_w, 2] (x, y) for transforms [..., 2, 3].
template <typename T>
Tensor<T> affine_grid(const Tensor<T>& theta, std::int64_t out_h, std::int64_t out_w);

/// Samples input [B,C,H,W] at grid [M,h,w,2] giving [M,C,h,w]. M must be a
/// multiple of B; grid item m reads image m / (M / B). Points outside the
/// frame read zeros. Differentiable w.r.t. input and grid.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& input, const Tensor<T>& grid);

/// Nearest-neighbour crop of label masks [B,H,W] by M = B*k transforms.
/// Points outside the frame get `fill`.
IntTensor sample_labels_nearest(const IntTensor& masks, std::span<const AffineTheta> thetas,
                                std::int64_t out_h, std::int64_t out_w, int fill = 0);

/// Background score used when compositing pasted ROI probabilities.
inline constexpr double kPasteBackgroundScore = 0.5;

/// Warps per-ROI foreground probabilities [N,1,h,w] back into the frame with
/// each inverse transform. Returns scores [1+N, out_h, out_w]: channel 0 is
/// the constant background score, channel r+1 the pasted map of ROI r
/// (zero outside its crop window).
template <typename T>
Tensor<T> inverse_paste(const Tensor<T>& roi_probs, std::span<const AffineTheta> thetas,
                        std::int64_t out_h, std::int64_t out_w);

/// Per-pixel argmax over [K,H,W] scores; ties go to the lowest channel.
/// Channel c maps to label `labels[c]` (background first).
template <typename T>
IntTensor argmax_labels(const Tensor<T>& scores, std::span<const int> labels);

struct GtThetas {
  std::vector<AffineTheta> thetas;
  std::vector<bool> present;
};

/// Bounding-box transforms per ROI: tight box of the ROI pixels, grown by
/// `margin` of its extent on each side, widened to at least `min_scale`
/// half-extent, clamped to the frame. Absent ROIs get the identity and
/// present = false.
GtThetas derive_gt_theta(const IntTensor& mask, const RoiSet& rois, double margin = 0.1,
                         double min_scale = 0.0);

struct LocalizerConfig {
  std::vector<int> widths{16, 16, 32, 32, 64, 64, 128, 128};
  /// Appends normalized x and y coordinate maps to the input, so position
  /// survives the global average pooling.
  bool coord_channels = true;
};

/// Eight 3x3 conv+ReLU layers in four stages of two, 2x2 average pooling
/// after each stage, global average pooling and a linear regression to N x 4
/// raw transform parameters. The regression starts at the identity.
template <typename T>
class LocalizationNet {
 public:
  LocalizationNet() = default;
  LocalizationNet(int in_channels, int num_rois, const LocalizerConfig& config,
                  std::mt19937_64& rng);

  /// probs [B, C, h, w] -> raw [B, N, 4]; h and w must be divisible by 16.
  Tensor<T> operator()(const Tensor<T>& probs) const;
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
  int num_rois() const { return num_rois_; }

  std::vector<Conv2dLayer<T>> convs;
  LinearLayer<T> regress;

 private:
  int num_rois_ = 0;
  bool coord_channels_ = false;
};

extern template class LocalizationNet<float>;
extern template class LocalizationNet<double>;

}  // namespace tanet
