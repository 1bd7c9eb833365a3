#include "tanet/model.hpp"

#include <random>
#include <stdexcept>

#include "tanet/ops.hpp"

namespace tanet {

void ModelConfig::validate() const {
  rois.validate();
  backbone.validate();
  if (in_channels < 1) throw std::invalid_argument("ModelConfig: in_channels must be >= 1");
  if (image_h < 32 || image_w < 32 || image_h % 32 != 0 || image_w % 32 != 0) {
    throw std::invalid_argument("ModelConfig: image dims must be positive multiples of 32");
  }
  if (localizer.widths.size() != 8) {
    throw std::invalid_argument("ModelConfig: localizer needs 8 conv widths");
  }
}

template <typename T>
TaNet<T>::TaNet(const ModelConfig& config) : config_(config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const int n = static_cast<int>(config.rois.size());
  coarse = CoarseSegmenter<T>(config.in_channels, 1 + n, config.backbone, rng);
  localizer = LocalizationNet<T>(1 + n, n, config.localizer, rng);
  backbone = Backbone<T>(config.in_channels, config.backbone, n, rng);
}

template <typename T>
Tensor<T> TaNet<T>::localize(const Tensor<T>& images, bool training) {
  return localizer(softmax_channels(coarse(images, training)));
}

template <typename T>
TaNetOutput<T> TaNet<T>::forward(const Tensor<T>& images, bool training, ForwardMode mode,
                                 std::span<const AffineTheta> crop_window) {
  if (images.rank() != 4 || images.dim(1) != config_.in_channels) {
    throw ShapeError("TaNet: expected images [B," + std::to_string(config_.in_channels) +
                     ",H,W], got " + to_string(images.shape()));
  }
  const std::int64_t batch = images.dim(0);
  const int n = num_rois();
  TaNetOutput<T> out;
  if (mode.use_stn) {
    out.coarse_logits = coarse(images, training);
    const Tensor<T> raw = localizer(softmax_channels(out.coarse_logits));
    out.theta = build_theta(reshape(raw, {batch * n, 4}));
  } else {
    const std::vector<AffineTheta> id(static_cast<std::size_t>(batch * n), AffineTheta::identity());
    out.theta = theta_tensor<T>(id);
  }
  if (!crop_window.empty() && static_cast<std::int64_t>(crop_window.size()) != batch * n) {
    throw ShapeError("TaNet: crop window needs " + std::to_string(batch * n) + " transforms");
  }
  const Tensor<T> grid = affine_grid(crop_window.empty() ? out.theta : theta_tensor<T>(crop_window),
                                     config_.backbone.crop_h, config_.backbone.crop_w);
  out.crops = bilinear_sample(images, grid);
  std::vector<int> roi(static_cast<std::size_t>(batch * n));
  for (std::size_t m = 0; m < roi.size(); ++m) roi[m] = static_cast<int>(m % n);
  out.roi_logits = backbone(out.crops, training, roi, mode.use_hp);
  return out;
}

template <typename T>
IntTensor TaNet<T>::predict_masks(const Tensor<T>& images, ForwardMode mode) {
  NoGradGuard no_grad;
  const TaNetOutput<T> out = forward(images, false, mode);
  const std::int64_t batch = images.dim(0), h = images.dim(2), w = images.dim(3);
  const int n = num_rois();
  const auto thetas = thetas_from_tensor(out.theta);
  const Tensor<T> probs = softmax_channels(out.roi_logits);
  const std::int64_t ch = probs.dim(2), cw = probs.dim(3), plane = ch * cw;
  std::vector<int> labels{0};
  labels.insert(labels.end(), config_.rois.labels.begin(), config_.rois.labels.end());

  IntTensor masks({batch, h, w});
  for (std::int64_t b = 0; b < batch; ++b) {
    Tensor<T> fg({n, 1, ch, cw});
    for (int r = 0; r < n; ++r) {
      const T* src = probs.ptr() + ((b * n + r) * probs.dim(1) + 1) * plane;
      std::copy_n(src, plane, fg.ptr() + r * plane);
    }
    const auto scores = inverse_paste(fg, std::span(thetas).subspan(b * n, n), h, w);
    const IntTensor m = argmax_labels(scores, labels);
    std::copy(m.data.begin(), m.data.end(), masks.data.begin() + b * h * w);
  }
  return masks;
}

template <typename T>
void TaNet<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  coarse.visit(join_name(prefix, "coarse"), f);
  localizer.visit(join_name(prefix, "localizer"), f);
  backbone.visit(join_name(prefix, "backbone"), f);
}

template <typename T>
void TaNet<T>::after_load() {
  for (auto& layer : backbone.hp.layers) layer.sync_bank_from_tensor();
}

template class TaNet<float>;
template class TaNet<double>;

}  // namespace tanet
