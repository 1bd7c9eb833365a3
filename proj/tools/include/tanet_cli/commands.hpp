#pragma once

// The `tanet` subcommands. Each returns a process exit code; run_guarded
// maps exceptions onto the exit-code contract.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "tanet/dataio.hpp"
#include "tanet/model.hpp"
#include "tanet_cli/run_config.hpp"

namespace tanet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;

/// Bad flags or arguments (exit 1).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Runs `body`; ConfigError/UsageError -> 1, any other exception -> 2.
/// Messages go to `err` prefixed with "error: ".
int run_guarded(const std::function<int()>& body, std::ostream& err);

// ------------------------------------------------------------------ dataset

struct Dataset {
  std::vector<SegSample> train, val, test;
  std::uint64_t seed = 0;
};

/// Reads manifest.csv (id,data_seed,split) plus images/ and masks/.
Dataset load_dataset(const std::filesystem::path& dir);

// ------------------------------------------------------------------ checkpoints

/// Stages a checkpoint has completed, in order coarse, stn, joint.
struct StageFlags {
  bool coarse = false;
  bool stn = false;
  bool joint = false;
};

void save_model(TaNet<float>& net, const StageFlags& stages, const std::filesystem::path& path);
/// Builds the model from `config` and loads the checkpoint into it. Shape or
/// name mismatches raise an "incompatible checkpoint" runtime_error.
TaNet<float> load_model(const ModelConfig& config, const std::filesystem::path& path,
                        StageFlags* stages = nullptr);

// ------------------------------------------------------------------ commands

struct SynthOptions {
  RunConfig config;
  std::filesystem::path out_dir;
  int count = -1;  // -1: take it from the config
};
int cmd_synth(const SynthOptions& opts, std::ostream& out);

struct TrainOptions {
  RunConfig config;
  std::string stage;
  std::filesystem::path data_dir;
  std::filesystem::path ckpt_in;
  std::filesystem::path ckpt_out;
  std::filesystem::path log;  // default: ckpt_out with a .csv extension
};
int cmd_train(const TrainOptions& opts, std::ostream& out);

struct EvalOptions {
  RunConfig config;
  std::filesystem::path ckpt;
  std::filesystem::path data_dir;
  /// Evaluates saved masks (<id>.pgm) instead of running a model.
  std::filesystem::path pred_dir;
  std::string ablate = "none";
  std::string split = "test";
  std::filesystem::path csv;
  int fps_iters = 20;
};

struct EvalReport {
  std::string model;
  RegionScores scores;
  double fps = 0.0;  // 0 when no model ran
};

/// Mode for an ablation name on top of the config switches.
ForwardMode ablation_mode(const std::string& ablate, ForwardMode base);
EvalReport evaluate(const EvalOptions& opts);
std::string eval_csv_header(const RoiSet& rois);
std::string eval_csv_row(const EvalReport& report);
int cmd_eval(const EvalOptions& opts, std::ostream& out);

struct GradcheckOptions {
  std::string scope = "all";
  double h = 1e-4;
  bool inject_fault = false;
  std::filesystem::path csv;
};
int cmd_gradcheck(const GradcheckOptions& opts, std::ostream& out, std::ostream& err);

struct BenchOptions {
  RunConfig config;
  std::filesystem::path ckpt;  // empty: freshly initialized weights
  std::string size = "64x64";
  int iters = 50;
  int warmup = 5;
  std::filesystem::path csv;
};

struct BenchReport {
  FpsReport tanet;
  FpsReport baseline;
  double ratio = 0.0;
};

inline constexpr double kReferenceTanetFps = 94.5;
inline constexpr double kReferenceBaselineFps = 100.1;

/// Parses "HxW"; both must be positive multiples of 32.
std::pair<int, int> parse_size(const std::string& size);
BenchReport bench(const BenchOptions& opts);
int cmd_bench(const BenchOptions& opts, std::ostream& out, std::ostream& err);

struct InferOptions {
  RunConfig config;
  std::filesystem::path ckpt;
  /// A .pgm (grayscale, replicated to every channel) or a color prefix.
  std::filesystem::path image;
  std::string out_prefix;
};

/// Region outline: pixels of `label` with a 4-neighbour outside the region
/// or outside the frame.
std::vector<bool> region_contour(const IntTensor& mask, int label);
int cmd_infer(const InferOptions& opts, std::ostream& out);

}  // namespace tanet::cli
