#include "tanet/backbone.hpp"

#include <stdexcept>

#include "tanet/ops.hpp"

namespace tanet {

void BackboneConfig::validate() const {
  if (crop_h < 32 || crop_w < 32 || crop_h % 32 != 0 || crop_w % 32 != 0) {
    throw std::invalid_argument("BackboneConfig: crop dims must be positive multiples of 32");
  }
  if (sp_channels.size() != 3 || hp_channels.size() != 3 || gp_widths.size() != 4 ||
      coarse_widths.size() != 5) {
    throw std::invalid_argument("BackboneConfig: expected 3 SP, 3 HP, 4 GP and 5 coarse widths");
  }
  auto positive = [](const std::vector<int>& v) {
    for (int x : v) {
      if (x < 1) return false;
    }
    return true;
  };
  if (!positive(sp_channels) || !positive(hp_channels) || !positive(gp_widths) ||
      !positive(coarse_widths) || hp_m < 1 || gp_out < 1 || fuse_channels < 1 ||
      head_classes < 2) {
    throw std::invalid_argument("BackboneConfig: widths must be positive, head_classes >= 2");
  }
  if (lbp_nonzeros_per_slice(hp_sparsity) < 2 || hp_sparsity > 1.0) {
    throw std::invalid_argument("BackboneConfig: hp_sparsity must give 2..9 nonzeros per filter");
  }
}

BackboneConfig BackboneConfig::tiny() {
  BackboneConfig c;
  c.crop_h = c.crop_w = 32;
  c.sp_channels = {4, 4, 8};
  c.hp_m = 4;
  c.hp_channels = {3, 3, 4};
  c.gp_widths = {3, 4, 4, 5};
  c.gp_out = 4;
  c.fuse_channels = 6;
  c.coarse_widths = {3, 4, 4, 5, 5};
  return c;
}

namespace {

template <typename T>
void require_divisible(const char* who, const Tensor<T>& x, int by) {
  if (x.rank() != 4) throw ShapeError(std::string(who) + ": input must be [B,C,H,W]");
  if (x.dim(2) % by != 0 || x.dim(3) % by != 0) {
    throw ShapeError(std::string(who) + ": spatial dims " + std::to_string(x.dim(2)) + "x" +
                     std::to_string(x.dim(3)) + " must be divisible by " + std::to_string(by));
  }
}

}  // namespace

template <typename T>
SpatialPath<T>::SpatialPath(int cin, const BackboneConfig& cfg, std::mt19937_64& rng) {
  for (int width : cfg.sp_channels) {
    blocks.emplace_back(cin, width, 3, Conv2dOptions{2, 1, 1}, rng);
    cin = width;
  }
}

template <typename T>
Tensor<T> SpatialPath<T>::operator()(const Tensor<T>& x, bool training) {
  require_divisible("spatial_path", x, 8);
  Tensor<T> y = x;
  for (auto& b : blocks) y = b(y, training);
  return y;
}

template <typename T>
void SpatialPath<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].visit(join_name(prefix, "block" + std::to_string(i + 1)), f);
  }
}

template <typename T>
HandcraftedPath<T>::HandcraftedPath(int cin, const BackboneConfig& cfg, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < cfg.hp_channels.size(); ++i) {
    const int width = cfg.hp_channels[i];
    layers.emplace_back(cin, width, cfg.hp_m, cfg.hp_sparsity, cfg.bank_seed + i, rng);
    norms.emplace_back(width);
    cin = width;
  }
}

template <typename T>
Tensor<T> HandcraftedPath<T>::operator()(const Tensor<T>& x, bool training) {
  require_divisible("handcrafted_path", x, 8);
  Tensor<T> y = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    y = avg_pool2(norms[i](layers[i](y), training));
  }
  return y;
}

template <typename T>
void HandcraftedPath<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string name = join_name(prefix, "lbp" + std::to_string(i + 1));
    layers[i].visit(name, f);
    norms[i].visit(join_name(name, "bn"), f);
  }
}

template <typename T>
SeparableBlock<T>::SeparableBlock(int cin, int cout, std::mt19937_64& rng)
    : depthwise(cin, cin, 3, Conv2dOptions{2, 1, cin}, false, rng),
      pointwise(cin, cout, 1, Conv2dOptions{}, false, rng),
      bn(cout) {}

template <typename T>
void SeparableBlock<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  depthwise.visit(join_name(prefix, "dw"), f);
  pointwise.visit(join_name(prefix, "pw"), f);
  bn.visit(join_name(prefix, "bn"), f);
}

template <typename T>
GlobalPath<T>::GlobalPath(int cin, const BackboneConfig& cfg, std::mt19937_64& rng) {
  for (int width : cfg.gp_widths) {
    blocks.emplace_back(cin, width, rng);
    cin = width;
  }
  gate = Conv2dLayer<T>(cin, cin, 1, Conv2dOptions{}, true, rng);
  project = Conv2dLayer<T>(cin, cfg.gp_out, 1, Conv2dOptions{}, true, rng);
}

template <typename T>
Tensor<T> GlobalPath<T>::operator()(const Tensor<T>& x, bool training) {
  require_divisible("global_path", x, 32);
  Tensor<T> y = x;
  for (auto& b : blocks) y = b(y, training);
  y = mul_channel_gate(y, sigmoid(gate(global_avg_pool(y))));
  return upsample_bilinear(project(y), x.dim(2) / 8, x.dim(3) / 8);
}

template <typename T>
void GlobalPath<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].visit(join_name(prefix, "block" + std::to_string(i + 1)), f);
  }
  gate.visit(join_name(prefix, "gate"), f);
  project.visit(join_name(prefix, "project"), f);
}

template <typename T>
FusionHead<T>::FusionHead(int in_channels, int fuse_channels, int classes, int groups,
                          std::mt19937_64& rng)
    : bn(in_channels),
      reduce(in_channels, fuse_channels, 3, Conv2dOptions{1, 1, 1}, true, rng),
      classify(fuse_channels, classes * groups, 1, Conv2dOptions{}, true, rng),
      classes_per_group(classes) {}

template <typename T>
Tensor<T> FusionHead<T>::operator()(const Tensor<T>& sp, const Tensor<T>& hp,
                                    const Tensor<T>& gp, std::int64_t out_h, std::int64_t out_w,
                                    bool training, std::span<const int> group) {
  for (const Tensor<T>* t : {&hp, &gp}) {
    if (t->rank() != 4 || t->dim(0) != sp.dim(0) || t->dim(2) != sp.dim(2) ||
        t->dim(3) != sp.dim(3)) {
      throw ShapeError("fuse_and_head: pathway outputs disagree: " + to_string(sp.shape()) +
                       " vs " + to_string(t->shape()));
    }
  }
  const std::int64_t in = sp.dim(1) + hp.dim(1) + gp.dim(1);
  if (in != bn.gamma.dim(0)) {
    throw ShapeError("fuse_and_head: expected " + std::to_string(bn.gamma.dim(0)) +
                     " fused channels, got " + std::to_string(in));
  }
  Tensor<T> y = bn(concat_channels<T>({sp, hp, gp}), training);
  y = classify(relu(reduce(y)));
  const std::int64_t groups = classify.weight.dim(0) / classes_per_group;
  if (groups > 1 || !group.empty()) {
    if (static_cast<std::int64_t>(group.size()) != y.dim(0)) {
      throw std::invalid_argument("fuse_and_head: need one head index per item");
    }
    y = select_channel_group(y, classes_per_group, group);
  }
  return upsample_bilinear(y, out_h, out_w);
}

template <typename T>
void FusionHead<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  bn.visit(join_name(prefix, "bn"), f);
  reduce.visit(join_name(prefix, "reduce"), f);
  classify.visit(join_name(prefix, "classify"), f);
}

template <typename T>
Backbone<T>::Backbone(int cin, const BackboneConfig& cfg, int heads, std::mt19937_64& rng)
    : config(cfg) {
  cfg.validate();
  if (heads < 1) throw std::invalid_argument("Backbone: need at least one head");
  sp = SpatialPath<T>(cin, cfg, rng);
  hp = HandcraftedPath<T>(cin, cfg, rng);
  gp = GlobalPath<T>(cin, cfg, rng);
  head = FusionHead<T>(sp.out_channels() + hp.out_channels() + gp.out_channels(),
                       cfg.fuse_channels, cfg.head_classes, heads, rng);
}

template <typename T>
Tensor<T> Backbone<T>::operator()(const Tensor<T>& crops, bool training,
                                  std::span<const int> roi, bool use_hp) {
  require_divisible("backbone", crops, 32);
  const Tensor<T> s = sp(crops, training);
  const Tensor<T> g = gp(crops, training);
  const Tensor<T> h = use_hp ? hp(crops, training)
                             : Tensor<T>::zeros({crops.dim(0), hp.out_channels(), s.dim(2), s.dim(3)});
  return head(s, h, g, crops.dim(2), crops.dim(3), training, roi);
}

template <typename T>
void Backbone<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  sp.visit(join_name(prefix, "sp"), f);
  hp.visit(join_name(prefix, "hp"), f);
  gp.visit(join_name(prefix, "gp"), f);
  head.visit(join_name(prefix, "head"), f);
}

template <typename T>
CoarseSegmenter<T>::CoarseSegmenter(int cin, int num_classes, const BackboneConfig& cfg,
                                    std::mt19937_64& rng) {
  for (int width : cfg.coarse_widths) {
    stages.emplace_back(cin, width, 3, Conv2dOptions{1, 1, 1}, rng);
    cin = width;
  }
  const auto& w = cfg.coarse_widths;
  score8 = Conv2dLayer<T>(w[2], num_classes, 1, Conv2dOptions{}, true, rng);
  score16 = Conv2dLayer<T>(w[3], num_classes, 1, Conv2dOptions{}, true, rng);
  score32 = Conv2dLayer<T>(w[4], num_classes, 1, Conv2dOptions{}, true, rng);
}

template <typename T>
Tensor<T> CoarseSegmenter<T>::operator()(const Tensor<T>& image, bool training) {
  require_divisible("coarse_segmenter", image, 32);
  std::vector<Tensor<T>> pooled;
  Tensor<T> y = image;
  for (auto& stage : stages) {
    y = avg_pool2(stage(y, training));
    pooled.push_back(y);
  }
  const Tensor<T>& f8 = pooled[2];
  const Tensor<T>& f16 = pooled[3];
  Tensor<T> s = score32(pooled[4]);
  s = add(upsample_bilinear(s, f16.dim(2), f16.dim(3)), score16(f16));
  s = add(upsample_bilinear(s, f8.dim(2), f8.dim(3)), score8(f8));
  return upsample_bilinear(s, image.dim(2), image.dim(3));
}

template <typename T>
void CoarseSegmenter<T>::visit(const std::string& prefix, const ParamVisitor<T>& f) {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    stages[i].visit(join_name(prefix, "stage" + std::to_string(i + 1)), f);
  }
  score8.visit(join_name(prefix, "score8"), f);
  score16.visit(join_name(prefix, "score16"), f);
  score32.visit(join_name(prefix, "score32"), f);
}

#define TANET_INSTANTIATE_BACKBONE(T) \
  template struct SpatialPath<T>;     \
  template struct HandcraftedPath<T>; \
  template struct SeparableBlock<T>;  \
  template struct GlobalPath<T>;      \
  template struct FusionHead<T>;      \
  template struct Backbone<T>;        \
  template struct CoarseSegmenter<T>;
TANET_INSTANTIATE_BACKBONE(float)
TANET_INSTANTIATE_BACKBONE(double)
#undef TANET_INSTANTIATE_BACKBONE

}  // namespace tanet
