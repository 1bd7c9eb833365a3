#include <iostream>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "tanet_cli/commands.hpp"

using namespace tanet::cli;

namespace {

struct ConfigFlags {
  std::string path;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("--config", path, "RunConfig file (key = value lines)")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "Override one key, e.g. --set lr=0.0005 (repeatable)");
  }
  RunConfig resolve() const {
    RunConfig cfg = path.empty() ? RunConfig{} : RunConfig::load(path);
    for (const auto& s : sets) {
      const auto [k, v] = split_assignment(s);
      cfg.set(k, v);
    }
    cfg.validate();
    return cfg;
  }
};

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"tanet: ROI-cropping segmentation network on synthetic cardiac phantoms"};
  app.require_subcommand(1);

  ConfigFlags synth_cfg, train_cfg, eval_cfg, bench_cfg, infer_cfg;

  SynthOptions synth;
  std::string synth_out;
  auto* s = app.add_subcommand("synth", "Generate a phantom dataset (PGM images, masks, manifest)");
  synth_cfg.attach(s);
  s->add_option("--out-dir", synth_out, "Output directory")->required();
  s->add_option("--count", synth.count, "Number of samples (default: the config's count)");

  TrainOptions train;
  std::string t_data, t_in, t_out, t_log;
  auto* t = app.add_subcommand("train", "Run one training stage");
  train_cfg.attach(t);
  t->add_option("--stage", train.stage, "coarse, stn or joint")->required();
  t->add_option("--data-dir", t_data, "Dataset written by synth")->required();
  t->add_option("--ckpt-in", t_in, "Checkpoint from the previous stage");
  t->add_option("--ckpt-out", t_out, "Output checkpoint")->required();
  t->add_option("--log", t_log, "Loss history CSV (default: <ckpt-out>.csv)");

  EvalOptions eval;
  std::string e_ckpt, e_data, e_pred, e_csv;
  auto* e = app.add_subcommand("eval", "Per-region IoU/F1 and FPS on a dataset split");
  eval_cfg.attach(e);
  e->add_option("--ckpt", e_ckpt, "Model checkpoint");
  e->add_option("--pred-dir", e_pred, "Evaluate saved masks <id>.pgm instead of a model");
  e->add_option("--data-dir", e_data, "Dataset written by synth")->required();
  e->add_option("--ablate", eval.ablate, "none, no-stn, no-lbp or no-stn-no-lbp");
  e->add_option("--split", eval.split, "train, val or test");
  e->add_option("--csv", e_csv, "Also write the metrics row as CSV");
  e->add_option("--fps-iters", eval.fps_iters, "Timed single-image passes");

  GradcheckOptions grad;
  std::string g_csv;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient checks in double precision");
  g->set_help_flag("--help", "Print this help message and exit");
  g->add_option("--scope", grad.scope, "op, stn, lbp, backbone or all");
  g->add_option("--h", grad.h, "Finite-difference step");
  g->add_option("--csv", g_csv, "Also write the report to this file");
  g->add_flag("--inject-fault", grad.inject_fault, "Add a check with a deliberately wrong backward rule");

  BenchOptions bench;
  std::string b_ckpt, b_csv;
  auto* b = app.add_subcommand("bench", "Inference FPS of TaNet vs the SP+GP baseline");
  bench_cfg.attach(b);
  b->add_option("--ckpt", b_ckpt, "Model checkpoint (default: fresh weights)");
  b->add_option("--size", bench.size, "Frame size HxW, multiples of 32");
  b->add_option("--iters", bench.iters, "Timed iterations");
  b->add_option("--warmup", bench.warmup, "Untimed warm-up iterations");
  b->add_option("--csv", b_csv, "Also write the report as CSV");

  InferOptions infer;
  std::string i_ckpt, i_image;
  auto* inf = app.add_subcommand("infer", "Predict a mask and per-region contour overlays");
  infer_cfg.attach(inf);
  inf->add_option("--ckpt", i_ckpt, "Model checkpoint")->required();
  inf->add_option("--image", i_image, "Image: a .pgm or a colour prefix (<prefix>.r/.g/.b.pgm)")->required();
  inf->add_option("--out-prefix", infer.out_prefix, "Output path prefix")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  return run_guarded([&]() -> int {
    if (*s) {
      synth.config = synth_cfg.resolve();
      synth.out_dir = synth_out;
      return cmd_synth(synth, std::cout);
    }
    if (*t) {
      train.config = train_cfg.resolve();
      train.data_dir = t_data;
      train.ckpt_in = t_in;
      train.ckpt_out = t_out;
      train.log = t_log;
      return cmd_train(train, std::cout);
    }
    if (*e) {
      eval.config = eval_cfg.resolve();
      eval.ckpt = e_ckpt;
      eval.data_dir = e_data;
      eval.pred_dir = e_pred;
      eval.csv = e_csv;
      return cmd_eval(eval, std::cout);
    }
    if (*g) {
      grad.csv = g_csv;
      return cmd_gradcheck(grad, std::cout, std::cerr);
    }
    if (*b) {
      bench.config = bench_cfg.resolve();
      bench.ckpt = b_ckpt;
      bench.csv = b_csv;
      return cmd_bench(bench, std::cout, std::cerr);
    }
    infer.config = infer_cfg.resolve();
    infer.ckpt = i_ckpt;
    infer.image = i_image;
    return cmd_infer(infer, std::cout);
  }, std::cerr);
}
