#pragma once

// Synthetic cardiac phantoms, image/mask files, bicubic resizing,
// checkpoints and evaluation metrics.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tanet/stn.hpp"
#include "tanet/tensor.hpp"

namespace tanet {

struct SegSample {
  Tensor<float> image;  // [C,H,W] in [0,1]
  IntTensor mask;       // [H,W]
  std::string id;
};

struct PhantomSpec {
  int height = 64;
  int width = 64;
  /// Multiplicative speckle: v * (1 + speckle * n), n ~ N(0,1), clipped to [0,1].
  double speckle = 0.2;
  /// Scales all geometric jitter; 0 renders the same heart every time.
  double jitter = 1.0;
  std::uint64_t seed = 0;
  /// Minimum fraction of the frame per region; thin bands stay below max_thin.
  double min_fraction = 0.005;
  double max_thin_fraction = 0.05;
  int max_attempts = 16;

  void validate() const;
};

/// Mean intensities per label (background excluded: it is a gradient).
inline constexpr double kPhantomIntensity[6] = {0.0, 0.30, 0.58, 0.44, 0.89, 0.74};

/// Pure function of (spec, index). Throws if no valid layout is found.
SegSample generate_phantom(const PhantomSpec& spec, int index);
std::vector<SegSample> generate_phantom_dataset(const PhantomSpec& spec, int count);

struct DatasetSplit {
  std::vector<SegSample> train, val, test;
};
/// Fixed split by index: first 80% train, next 10% val, rest test.
DatasetSplit split_dataset(std::vector<SegSample> samples);

/// Catmull-Rom (a = -0.5) bicubic resize of [C,H,W] with aligned corners.
Tensor<float> resize_bicubic(const Tensor<float>& image, std::int64_t out_h, std::int64_t out_w);
/// Nearest-neighbour resize of a label mask (aligned corners).
IntTensor resize_nearest(const IntTensor& mask, std::int64_t out_h, std::int64_t out_w);

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary P5, maxval 255. Images [H,W] or [1,H,W] are quantized round(255 v).
void save_pgm(const Tensor<float>& image, const std::filesystem::path& path);
void save_pgm(const IntTensor& mask, const std::filesystem::path& path);
/// Returns [1,H,W] with values byte/255.
Tensor<float> load_pgm_image(const std::filesystem::path& path);
IntTensor load_pgm_mask(const std::filesystem::path& path);

/// Colour images as three planes <prefix>.r.pgm, .g.pgm, .b.pgm.
void save_color_image(const Tensor<float>& image, const std::string& prefix);
Tensor<float> load_color_image(const std::string& prefix);

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
  bool frozen = false;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(std::span<const NamedTensor> entries, const std::filesystem::path& path);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// |pred & gt| / |pred | gt| for one label; 1.0 when both are empty.
double iou(const IntTensor& pred, const IntTensor& gt, int label);
/// Dice 2|pred & gt| / (|pred| + |gt|); 1.0 when both are empty.
double f1(const IntTensor& pred, const IntTensor& gt, int label);

struct RegionScores {
  std::vector<std::string> names;
  std::vector<double> iou;  // per region, averaged over samples
  std::vector<double> f1;
  double mean_iou() const;
  double mean_f1() const;
};

/// Per-sample metrics averaged over the set. masks are [H,W] each.
RegionScores evaluate_masks(std::span<const IntTensor> preds, std::span<const IntTensor> gts,
                            const RoiSet& rois);

struct FpsReport {
  double fps = 0.0;
  double median_s = 0.0;
  double p10_s = 0.0;
  double p90_s = 0.0;
  int iters = 0;
};

/// Times `infer` (one single-image pass) with gradient recording off.
FpsReport fps_benchmark(const std::function<void()>& infer, int warmup = 5, int iters = 50);

}  // namespace tanet
