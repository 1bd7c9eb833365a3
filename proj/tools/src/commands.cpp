#include "tanet_cli/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "tanet/gradcheck_suite.hpp"
#include "tanet/trainer.hpp"

namespace tanet::cli {

namespace fs = std::filesystem;

int run_guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

namespace {

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

void require_writable_parent(const fs::path& file) {
  const fs::path parent = file.has_parent_path() ? file.parent_path() : fs::path(".");
  if (!fs::is_directory(parent)) throw std::runtime_error("output directory " + parent.string() + " does not exist");
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return f;
}

}  // namespace

// ------------------------------------------------------------------ dataset

Dataset load_dataset(const fs::path& dir) {
  std::ifstream m(dir / "manifest.csv");
  if (!m) throw std::runtime_error("no manifest.csv in " + dir.string());
  std::string line;
  std::getline(m, line);
  if (line != "id,data_seed,split") throw FormatError("manifest.csv: unexpected header '" + line + "'");
  Dataset ds;
  int row = 1;
  while (std::getline(m, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, seed, split;
    if (!std::getline(ss, id, ',') || !std::getline(ss, seed, ',') || !std::getline(ss, split)) {
      throw FormatError("manifest.csv line " + std::to_string(row) + ": expected id,data_seed,split");
    }
    ds.seed = std::stoull(seed);
    SegSample s{load_color_image((dir / "images" / id).string()), load_pgm_mask(dir / "masks" / (id + ".pgm")), id};
    if (split == "train") ds.train.push_back(std::move(s));
    else if (split == "val") ds.val.push_back(std::move(s));
    else if (split == "test") ds.test.push_back(std::move(s));
    else throw FormatError("manifest.csv line " + std::to_string(row) + ": unknown split '" + split + "'");
  }
  return ds;
}

// ------------------------------------------------------------------ checkpoints

namespace {
constexpr const char* kStagesEntry = "meta.stages";
}

void save_model(TaNet<float>& net, const StageFlags& stages, const fs::path& path) {
  auto state = export_state(net);
  Tensor<float> flags({3});
  flags.data()[0] = stages.coarse;
  flags.data()[1] = stages.stn;
  flags.data()[2] = stages.joint;
  state.push_back({kStagesEntry, flags, true});
  save_checkpoint(state, path);
}

TaNet<float> load_model(const ModelConfig& config, const fs::path& path, StageFlags* stages) {
  auto state = load_checkpoint(path);
  StageFlags flags;
  const auto meta = std::find_if(state.begin(), state.end(), [](const NamedTensor& e) { return e.name == kStagesEntry; });
  if (meta != state.end()) {
    if (meta->tensor.numel() != 3) throw FormatError(path.string() + ": malformed " + kStagesEntry);
    flags = {meta->tensor.data()[0] != 0, meta->tensor.data()[1] != 0, meta->tensor.data()[2] != 0};
    state.erase(meta);
  }
  TaNet<float> net(config);
  try {
    import_state(net, state);
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error("incompatible checkpoint " + path.string() + ": " + e.what());
  }
  if (stages) *stages = flags;
  return net;
}

// ------------------------------------------------------------------ synth

int cmd_synth(const SynthOptions& opts, std::ostream& out) {
  opts.config.validate();
  const int count = opts.count < 0 ? opts.config.count : opts.count;
  if (count < 1) throw UsageError("--count must be >= 1");
  if (opts.out_dir.empty()) throw UsageError("--out-dir is required");

  auto samples = generate_phantom_dataset(opts.config.phantom, count);
  std::vector<std::string> split(samples.size());
  {
    const auto s = split_dataset(samples);
    std::size_t i = 0;
    for (std::size_t k = 0; k < s.train.size(); ++k) split[i++] = "train";
    for (std::size_t k = 0; k < s.val.size(); ++k) split[i++] = "val";
    for (std::size_t k = 0; k < s.test.size(); ++k) split[i++] = "test";
  }
  std::error_code ec;
  fs::create_directories(opts.out_dir / "images", ec);
  fs::create_directories(opts.out_dir / "masks", ec);
  if (ec || !fs::is_directory(opts.out_dir / "masks")) {
    throw std::runtime_error("cannot create " + opts.out_dir.string() + (ec ? ": " + ec.message() : ""));
  }
  auto manifest = open_out(opts.out_dir / "manifest.csv");
  manifest << "id,data_seed,split\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    save_color_image(samples[i].image, (opts.out_dir / "images" / samples[i].id).string());
    save_pgm(samples[i].mask, opts.out_dir / "masks" / (samples[i].id + ".pgm"));
    manifest << samples[i].id << ',' << opts.config.phantom.seed << ',' << split[i] << '\n';
  }
  open_out(opts.out_dir / "config.txt") << opts.config.serialize();
  out << "wrote " << samples.size() << " samples to " << opts.out_dir.string() << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------ train

int cmd_train(const TrainOptions& opts, std::ostream& out) {
  opts.config.validate();
  const auto& cfg = opts.config;
  if (opts.stage != "coarse" && opts.stage != "stn" && opts.stage != "joint") {
    throw UsageError("--stage must be coarse, stn or joint");
  }
  if (opts.data_dir.empty() || opts.ckpt_out.empty()) throw UsageError("--data-dir and --ckpt-out are required");
  if (opts.stage != "joint" && !cfg.train.use_stn) {
    throw UsageError("stage '" + opts.stage + "' trains the spatial transformer; it needs use_stn = true");
  }
  const fs::path log = opts.log.empty() ? fs::path(opts.ckpt_out).replace_extension(".csv") : opts.log;
  require_writable_parent(opts.ckpt_out);
  require_writable_parent(log);

  StageFlags stages;
  std::optional<TaNet<float>> net;
  if (!opts.ckpt_in.empty()) net = load_model(cfg.model, opts.ckpt_in, &stages);
  auto missing = [&](const char* need) {
    return UsageError("stage '" + opts.stage + "' requires a checkpoint from stage '" + need +
                      "' (run `tanet train --stage " + need + "` first and pass it with --ckpt-in)");
  };
  if (opts.stage == "stn" && !stages.coarse) throw missing("coarse");
  if (opts.stage == "joint" && cfg.train.use_stn) {
    if (!stages.coarse) throw missing("coarse");
    if (!stages.stn) throw missing("stn");
  }
  const Dataset data = load_dataset(opts.data_dir);
  if (data.train.empty()) throw std::runtime_error("dataset has no training samples");
  if (!net) net.emplace(cfg.model);

  const auto progress = [&](const EpochRecord& r) {
    out << r.stage << " epoch " << r.epoch << " loss " << fmt(r.loss, 5) << " val_loss " << fmt(r.val_loss, 5)
        << " val_mean_iou " << fmt(r.val_mean_iou) << " lr " << r.lr << "\n";
    out.flush();
  };
  StageResult result;
  if (opts.stage == "coarse") {
    result = pretrain_coarse(*net, data.train, data.val, cfg.train, progress);
    stages.coarse = true;
  } else if (opts.stage == "stn") {
    result = pretrain_localizer(*net, data.train, data.val, cfg.train, progress);
    stages.stn = true;
  } else {
    result = finetune_joint(*net, data.train, data.val, cfg.train, progress);
    stages.joint = true;
  }
  if (result.skipped_batches > 0) out << "skipped " << result.skipped_batches << " batches without any ROI\n";
  if (result.history.empty() || !std::isfinite(result.history.back().loss)) {
    throw std::runtime_error("final training loss is not finite");
  }
  save_model(*net, stages, opts.ckpt_out);
  write_history_csv(result.history, log);
  out << "checkpoint " << opts.ckpt_out.string() << ", log " << log.string() << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------ eval

ForwardMode ablation_mode(const std::string& ablate, ForwardMode base) {
  if (ablate == "none") return base;
  if (ablate == "no-stn") return {false, base.use_hp};
  if (ablate == "no-lbp") return {base.use_stn, false};
  if (ablate == "no-stn-no-lbp") return {false, false};
  throw UsageError("--ablate must be none, no-stn, no-lbp or no-stn-no-lbp");
}

namespace {

const std::vector<SegSample>& pick_split(const Dataset& ds, const std::string& split) {
  if (split == "train") return ds.train;
  if (split == "val") return ds.val;
  if (split == "test") return ds.test;
  throw UsageError("--split must be train, val or test");
}

}  // namespace

EvalReport evaluate(const EvalOptions& opts) {
  opts.config.validate();
  const ForwardMode mode = ablation_mode(opts.ablate, opts.config.train.mode());
  (void)pick_split(Dataset{}, opts.split);
  if (opts.data_dir.empty()) throw UsageError("--data-dir is required");
  if (opts.ckpt.empty() == opts.pred_dir.empty()) throw UsageError("pass exactly one of --ckpt and --pred-dir");
  if (opts.fps_iters < 1) throw UsageError("--fps-iters must be >= 1");

  const Dataset data = load_dataset(opts.data_dir);
  const auto& samples = pick_split(data, opts.split);
  if (samples.empty()) throw std::runtime_error("split '" + opts.split + "' is empty");
  const RoiSet& rois = opts.config.model.rois;
  std::vector<IntTensor> gts;
  for (const auto& s : samples) gts.push_back(s.mask);

  EvalReport report;
  report.model = opts.ablate;
  if (!opts.pred_dir.empty()) {
    std::vector<IntTensor> preds;
    for (const auto& s : samples) preds.push_back(load_pgm_mask(opts.pred_dir / (s.id + ".pgm")));
    report.model = "masks";
    report.scores = evaluate_masks(preds, gts, rois);
    return report;
  }
  StageFlags stages;
  TaNet<float> net = load_model(opts.config.model, opts.ckpt, &stages);
  if (mode.use_stn && !(stages.coarse && stages.stn)) {
    throw std::runtime_error("incompatible checkpoint: the spatial transformer was never trained (missing stage '" +
                             std::string(stages.coarse ? "stn" : "coarse") + "'); use --ablate no-stn or set use_stn = false");
  }
  report.scores = evaluate_model(net, samples, mode, opts.config.train.batch_size);
  const Tensor<float> one = stack_images(std::span(samples).first(1));
  report.fps = fps_benchmark([&] { net.predict_masks(one, mode); }, 3, opts.fps_iters).fps;
  return report;
}

std::string eval_csv_header(const RoiSet& rois) {
  std::string h = "model";
  for (const auto& n : rois.names) h += "," + n + "_IoU," + n + "_F1";
  return h + ",mean_IoU,mean_F1,FPS";
}

std::string eval_csv_row(const EvalReport& r) {
  std::string row = r.model;
  for (std::size_t i = 0; i < r.scores.names.size(); ++i) row += "," + fmt(r.scores.iou[i], 6) + "," + fmt(r.scores.f1[i], 6);
  row += "," + fmt(r.scores.mean_iou(), 6) + "," + fmt(r.scores.mean_f1(), 6) + ",";
  if (r.fps > 0) row += fmt(r.fps, 2);
  return row;
}

int cmd_eval(const EvalOptions& opts, std::ostream& out) {
  if (!opts.csv.empty()) require_writable_parent(opts.csv);
  const EvalReport r = evaluate(opts);
  out << std::left << std::setw(8) << "region" << std::right << std::setw(9) << "IoU" << std::setw(9) << "F1" << "\n";
  for (std::size_t i = 0; i < r.scores.names.size(); ++i) {
    out << std::left << std::setw(8) << r.scores.names[i] << std::right << std::setw(9) << fmt(r.scores.iou[i])
        << std::setw(9) << fmt(r.scores.f1[i]) << "\n";
  }
  out << std::left << std::setw(8) << "mean" << std::right << std::setw(9) << fmt(r.scores.mean_iou()) << std::setw(9)
      << fmt(r.scores.mean_f1()) << "\n";
  out << std::left << std::setw(8) << "FPS" << std::right << std::setw(9) << (r.fps > 0 ? fmt(r.fps, 1) : "n/a") << "\n";
  if (!opts.csv.empty()) open_out(opts.csv) << eval_csv_header(opts.config.model.rois) << "\n" << eval_csv_row(r) << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------ gradcheck

int cmd_gradcheck(const GradcheckOptions& opts, std::ostream& out, std::ostream& err) {
  std::vector<GradCheckCase> cases;
  try {
    cases = gradcheck_cases(opts.scope);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (!(opts.h > 0.0 && opts.h < 0.1)) throw UsageError("--h must be in (0, 0.1)");
  if (!opts.csv.empty()) require_writable_parent(opts.csv);
  if (opts.inject_fault) cases.push_back(corrupted_gradcheck_case());

  std::ostringstream csv;
  csv << "check,max_rel_error,pass\n";
  std::vector<std::string> failed;
  for (const auto& c : cases) {
    const GradCheckResult r = c.run(opts.h);
    const bool pass = r.max_rel_error < kGradCheckTolerance && r.checked > 0;
    char err_buf[32];
    std::snprintf(err_buf, sizeof(err_buf), "%.3e", r.max_rel_error);
    csv << c.name << ',' << err_buf << ',' << (pass ? "true" : "false") << "\n";
    if (!pass) {
      failed.push_back(c.name);
      err << "FAIL " << c.name << ": max relative error " << err_buf << " at " << r.worst
          << " (analytic " << r.worst_analytic << ", numeric " << r.worst_numeric << ")\n";
    }
  }
  out << csv.str();
  if (!opts.csv.empty()) open_out(opts.csv) << csv.str();
  err << cases.size() - failed.size() << "/" << cases.size() << " gradient checks passed (h = " << opts.h
      << ", tolerance " << kGradCheckTolerance << ")\n";
  if (!failed.empty()) {
    std::string names;
    for (const auto& n : failed) names += (names.empty() ? "" : ", ") + n;
    err << "gradient check failed: " << names << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

// ------------------------------------------------------------------ bench

std::pair<int, int> parse_size(const std::string& size) {
  const auto x = size.find('x');
  int h = 0, w = 0;
  try {
    if (x == std::string::npos) throw std::invalid_argument("");
    std::size_t a = 0, b = 0;
    h = std::stoi(size.substr(0, x), &a);
    w = std::stoi(size.substr(x + 1), &b);
    if (a != x || b != size.size() - x - 1) throw std::invalid_argument("");
  } catch (const std::exception&) {
    throw UsageError("--size must look like HxW, got '" + size + "'");
  }
  if (h <= 0 || w <= 0 || h % 32 != 0 || w % 32 != 0) {
    throw UsageError("--size " + size + ": height and width must be positive multiples of 32");
  }
  return {h, w};
}

BenchReport bench(const BenchOptions& opts) {
  RunConfig cfg = opts.config;
  const auto [h, w] = parse_size(opts.size);
  cfg.model.image_h = cfg.phantom.height = h;
  cfg.model.image_w = cfg.phantom.width = w;
  cfg.validate();
  if (opts.iters < 1 || opts.warmup < 0) throw UsageError("--iters must be >= 1 and --warmup >= 0");
  TaNet<float> net = opts.ckpt.empty() ? TaNet<float>(cfg.model) : load_model(cfg.model, opts.ckpt);
  std::mt19937_64 rng(cfg.train.seed);
  const auto image = Tensor<float>::uniform({1, cfg.model.in_channels, h, w}, rng, 0.0f, 1.0f);
  BenchReport r;
  // baseline: the same weights with the transformer and LBP pathway removed
  r.baseline = fps_benchmark([&] { net.predict_masks(image, ForwardMode{false, false}); }, opts.warmup, opts.iters);
  r.tanet = fps_benchmark([&] { net.predict_masks(image, ForwardMode{true, true}); }, opts.warmup, opts.iters);
  r.ratio = r.tanet.fps / r.baseline.fps;
  return r;
}

int cmd_bench(const BenchOptions& opts, std::ostream& out, std::ostream& err) {
  if (!opts.csv.empty()) require_writable_parent(opts.csv);
  if (opts.iters == 1) err << "warning: --iters 1 times a single pass; the FPS estimate is noisy\n";
  const BenchReport r = bench(opts);
  const double reference = kReferenceTanetFps / kReferenceBaselineFps;
  out << "size          " << opts.size << "\n"
      << "tanet_fps     " << fmt(r.tanet.fps, 2) << "  (median " << fmt(r.tanet.median_s * 1e3, 3) << " ms)\n"
      << "baseline_fps  " << fmt(r.baseline.fps, 2) << "  (median " << fmt(r.baseline.median_s * 1e3, 3) << " ms)\n"
      << "ratio         " << fmt(r.ratio, 4) << "\n"
      << "reference_ratio " << fmt(reference, 4) << "  (94.5 / 100.1 on GPU)\n";
  if (!opts.csv.empty()) {
    open_out(opts.csv) << "size,tanet_fps,baseline_fps,ratio,reference_ratio\n"
                       << opts.size << ',' << fmt(r.tanet.fps, 2) << ',' << fmt(r.baseline.fps, 2) << ','
                       << fmt(r.ratio, 4) << ',' << fmt(reference, 4) << "\n";
  }
  return kExitOk;
}

// ------------------------------------------------------------------ infer

std::vector<bool> region_contour(const IntTensor& mask, int label) {
  const std::int64_t h = mask.dim(0), w = mask.dim(1);
  std::vector<bool> edge(static_cast<std::size_t>(h * w), false);
  auto in = [&](std::int64_t i, std::int64_t j) {
    return i >= 0 && i < h && j >= 0 && j < w && mask.data[static_cast<std::size_t>(i * w + j)] == label;
  };
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j)
      if (in(i, j) && !(in(i - 1, j) && in(i + 1, j) && in(i, j - 1) && in(i, j + 1)))
        edge[static_cast<std::size_t>(i * w + j)] = true;
  return edge;
}

int cmd_infer(const InferOptions& opts, std::ostream& out) {
  opts.config.validate();
  if (opts.ckpt.empty() || opts.image.empty() || opts.out_prefix.empty()) {
    throw UsageError("--ckpt, --image and --out-prefix are required");
  }
  const int channels = opts.config.model.in_channels;
  Tensor<float> image;
  if (opts.image.extension() == ".pgm") {
    const auto gray = load_pgm_image(opts.image);
    image = Tensor<float>({channels, gray.dim(1), gray.dim(2)});
    for (int c = 0; c < channels; ++c) std::copy(gray.data().begin(), gray.data().end(), image.ptr() + c * gray.numel());
  } else {
    image = load_color_image(opts.image.string());
    if (image.dim(0) != channels) throw FormatError("image has " + std::to_string(image.dim(0)) + " channels");
  }
  const std::int64_t h = image.dim(1), w = image.dim(2);
  if (h % 32 != 0 || w % 32 != 0) {
    throw UsageError("image is " + std::to_string(h) + "x" + std::to_string(w) + "; both sides must be multiples of 32");
  }
  ModelConfig mc = opts.config.model;
  mc.image_h = static_cast<int>(h);
  mc.image_w = static_cast<int>(w);
  StageFlags stages;
  TaNet<float> net = load_model(mc, opts.ckpt, &stages);
  const ForwardMode mode = opts.config.train.mode();
  if (mode.use_stn && !(stages.coarse && stages.stn)) {
    throw std::runtime_error("incompatible checkpoint: the spatial transformer was never trained; set use_stn = false");
  }
  const IntTensor pred = [&] {
    const IntTensor batch = net.predict_masks(image.reshaped({1, channels, h, w}), mode);
    IntTensor m({h, w});
    m.data = batch.data;
    return m;
  }();
  const fs::path mask_path = opts.out_prefix + "_mask.pgm";
  require_writable_parent(mask_path);
  save_pgm(pred, mask_path);
  // grayscale base: channel mean
  Tensor<float> base({h, w});
  for (std::int64_t p = 0; p < h * w; ++p) {
    double s = 0;
    for (int c = 0; c < channels; ++c) s += image.ptr()[c * h * w + p];
    base.ptr()[p] = static_cast<float>(s / channels);
  }
  const RoiSet& rois = opts.config.model.rois;
  for (std::size_t r = 0; r < rois.size(); ++r) {
    Tensor<float> overlay = base.clone();
    const auto edge = region_contour(pred, rois.labels[r]);
    for (std::size_t p = 0; p < edge.size(); ++p)
      if (edge[p]) overlay.ptr()[p] = 1.0f;
    save_pgm(overlay, opts.out_prefix + "_" + rois.names[r] + ".pgm");
  }
  out << "wrote " << mask_path.string() << " and " << rois.size() << " contour overlays\n";
  return kExitOk;
}

}  // namespace tanet::cli
