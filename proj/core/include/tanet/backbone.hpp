#pragma once

// Segmentation pathways (spatial, handcrafted, global), the fusion head and
// the FCN-8 style coarse segmenter.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tanet/layers.hpp"
#include "tanet/lbp.hpp"
#include "tanet/tensor.hpp"

namespace tanet {

struct BackboneConfig {
  int crop_h = 64;
  int crop_w = 64;
  std::vector<int> sp_channels{64, 64, 128};
  int hp_m = 32;
  double hp_sparsity = 0.5;
  std::vector<int> hp_channels{32, 32, 64};
  std::vector<int> gp_widths{32, 64, 128, 256};
  int gp_out = 64;
  int fuse_channels = 128;
  /// Classes per ROI head (ROI vs background).
  int head_classes = 2;
  std::vector<int> coarse_widths{16, 32, 64, 128, 128};
  std::uint64_t bank_seed = 1234;

  void validate() const;
  /// Small widths for gradient checks.
  static BackboneConfig tiny();
};

template <typename T>
struct SpatialPath {
  std::vector<ConvBnRelu<T>> blocks;

  SpatialPath() = default;
  SpatialPath(int cin, const BackboneConfig& cfg, std::mt19937_64& rng);
  Tensor<T> operator()(const Tensor<T>& x, bool training);
  int out_channels() const { return static_cast<int>(blocks.back().conv.weight.dim(0)); }
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

template <typename T>
struct HandcraftedPath {
  std::vector<LbpLayer<T>> layers;
  std::vector<BatchNorm2d<T>> norms;

  HandcraftedPath() = default;
  HandcraftedPath(int cin, const BackboneConfig& cfg, std::mt19937_64& rng);
  Tensor<T> operator()(const Tensor<T>& x, bool training);
  int out_channels() const { return layers.back().cout(); }
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

template <typename T>
struct SeparableBlock {
  Conv2dLayer<T> depthwise;
  Conv2dLayer<T> pointwise;
  BatchNorm2d<T> bn;

  SeparableBlock() = default;
  SeparableBlock(int cin, int cout, std::mt19937_64& rng);
  Tensor<T> operator()(const Tensor<T>& x, bool training) {
    return relu(bn(pointwise(depthwise(x)), training));
  }
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

template <typename T>
struct GlobalPath {
  std::vector<SeparableBlock<T>> blocks;
  Conv2dLayer<T> gate;
  Conv2dLayer<T> project;

  GlobalPath() = default;
  GlobalPath(int cin, const BackboneConfig& cfg, std::mt19937_64& rng);
  /// Output at 1/8 of the input resolution.
  Tensor<T> operator()(const Tensor<T>& x, bool training);
  int out_channels() const { return static_cast<int>(project.weight.dim(0)); }
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

/// Concatenates SP, HP, GP (in that order), normalizes, reduces to
/// fuse_channels with a 3x3 conv + ReLU and scores with a 1x1 conv.
template <typename T>
struct FusionHead {
  BatchNorm2d<T> bn;
  Conv2dLayer<T> reduce;
  Conv2dLayer<T> classify;
  int classes_per_group = 2;

  FusionHead() = default;
  FusionHead(int in_channels, int fuse_channels, int classes_per_group, int groups,
             std::mt19937_64& rng);
  /// Logits [B, classes_per_group, out_h, out_w]. With several groups, item
  /// b uses channel block group[b].
  Tensor<T> operator()(const Tensor<T>& sp, const Tensor<T>& hp, const Tensor<T>& gp,
                       std::int64_t out_h, std::int64_t out_w, bool training,
                       std::span<const int> group = {});
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

/// Shared trilateral backbone applied to ROI crops.
template <typename T>
struct Backbone {
  BackboneConfig config;
  SpatialPath<T> sp;
  HandcraftedPath<T> hp;
  GlobalPath<T> gp;
  FusionHead<T> head;

  Backbone() = default;
  /// `heads` independent binary heads (one per ROI).
  Backbone(int cin, const BackboneConfig& cfg, int heads, std::mt19937_64& rng);
  /// crops [M,C,h,w] -> logits [M, head_classes, h, w]. `roi` picks each
  /// crop's head; with use_hp off the HP channels are zeros.
  Tensor<T> operator()(const Tensor<T>& crops, bool training, std::span<const int> roi,
                       bool use_hp = true);
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

/// FCN-8 style: five conv+BN+ReLU+pool stages, score maps at 1/8, 1/16,
/// 1/32 fused by upsample-and-add, then bilinear upsampling to full size.
template <typename T>
struct CoarseSegmenter {
  std::vector<ConvBnRelu<T>> stages;
  Conv2dLayer<T> score8, score16, score32;

  CoarseSegmenter() = default;
  CoarseSegmenter(int cin, int num_classes, const BackboneConfig& cfg, std::mt19937_64& rng);
  Tensor<T> operator()(const Tensor<T>& image, bool training);
  void visit(const std::string& prefix, const ParamVisitor<T>& f);
};

#define TANET_EXTERN_BACKBONE(T)            \
  extern template struct SpatialPath<T>;     \
  extern template struct HandcraftedPath<T>; \
  extern template struct SeparableBlock<T>;  \
  extern template struct GlobalPath<T>;      \
  extern template struct FusionHead<T>;      \
  extern template struct Backbone<T>;        \
  extern template struct CoarseSegmenter<T>;
TANET_EXTERN_BACKBONE(float)
TANET_EXTERN_BACKBONE(double)
#undef TANET_EXTERN_BACKBONE

}  // namespace tanet
