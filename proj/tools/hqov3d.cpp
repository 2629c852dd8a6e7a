// SPDX-License-Identifier: Apache-2.0
// Command-line front end: parses flags, merges them over the config file and
// dispatches to the library commands. Exit codes: 0 success, 2 invalid input,
// 3 any other failure.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "hqov3d/cli.hpp"

namespace {

using hqov3d::json;
namespace cli = hqov3d::cli;

constexpr int kExitInvalid = 2;
constexpr int kExitFailure = 3;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> jobs;

  int count = 0;
  std::string scenes;
  std::string corpus;
  std::string proposals;
  std::string checkpoint;
  std::optional<std::string> resume;
  std::optional<std::int64_t> max_steps;
  std::optional<int> epochs;
  std::optional<double> lr;
  std::optional<int> steps;
  std::optional<int> t_start;
  std::optional<double> eta;
  std::optional<double> w_iou;
  std::optional<std::string> criterion;
  std::optional<double> iou_threshold;
  std::optional<double> center_threshold;
  int states = 20;
  double tolerance = 1e-4;
};

/// Builds the effective configuration: file contents with flags on top.
cli::Context make_context(const Flags& f) {
  json doc = f.config.empty() ? json::object() : hqov3d::read_json_file(f.config);
  if (!doc.is_object()) throw hqov3d::ConfigError("config file must hold a JSON object");
  if (f.seed) doc["seed"] = *f.seed;
  if (f.epochs) cli::set_path(doc, "train.epochs", *f.epochs);
  if (f.lr) cli::set_path(doc, "train.lr", *f.lr);
  if (f.steps) cli::set_path(doc, "refine.S", *f.steps);
  if (f.t_start) cli::set_path(doc, "refine.t_start", *f.t_start);
  if (f.eta) cli::set_path(doc, "refine.eta", *f.eta);
  if (f.w_iou) {
    cli::set_path(doc, "refine.w_iou", *f.w_iou);
    cli::set_path(doc, "refine.w_seeker", 1.0 - *f.w_iou);
  }
  if (f.criterion) cli::set_path(doc, "eval.criterion", *f.criterion);
  if (f.iou_threshold) cli::set_path(doc, "eval.iou_threshold", *f.iou_threshold);
  if (f.center_threshold) cli::set_path(doc, "eval.center_threshold", *f.center_threshold);

  cli::Context ctx;
  ctx.config = cli::parse_run_config(doc);
  ctx.out_dir = cli::resolve_out_dir(f.out, ctx.config);
  ctx.jobs = f.jobs.value_or(ctx.config.jobs.value_or(cli::default_jobs()));
  if (ctx.jobs < 1) throw hqov3d::ConfigError("--jobs must be >= 1");
  return ctx;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-vocabulary 3D pseudo-label generation and refinement on synthetic scenes"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", f.seed, "global seed");
  app.add_option("--out", f.out, "output directory (default: $" + std::string(cli::kOutDirEnv) + " or .)");
  app.add_option("--jobs", f.jobs, "worker threads for per-scene work");

  auto* gen = app.add_subcommand("gen-scenes", "generate synthetic scenes and a manifest");
  gen->add_option("--count", f.count, "number of scenes")->required();

  auto* propose = app.add_subcommand("propose", "run the 2D seeker and IMCV lifting");
  propose->add_option("--scenes", f.scenes, "scene manifest")->required();

  auto* train = app.add_subcommand("train", "train the box denoiser");
  train->add_option("--corpus", f.corpus, "scene manifest of the training corpus")->required();
  train->add_option("--resume", f.resume, "checkpoint to continue from");
  train->add_option("--max-steps", f.max_steps, "stop after this many optimizer steps in total");
  train->add_option("--epochs", f.epochs, "training epochs");
  train->add_option("--lr", f.lr, "learning rate");

  auto* refine = app.add_subcommand("refine", "refine proposals with the denoiser and fuse scores");
  refine->add_option("--proposals", f.proposals, "proposals manifest")->required();
  refine->add_option("--checkpoint", f.checkpoint, "denoiser checkpoint")->required();
  refine->add_option("--steps", f.steps, "sampler steps S");
  refine->add_option("--t-start", f.t_start, "starting timestep");
  refine->add_option("--eta", f.eta, "sampler stochasticity in [0, 1]");
  refine->add_option("--w-iou", f.w_iou, "confidence weight; the seeker weight is 1 - w");

  auto* evaluate = app.add_subcommand("eval", "score proposals against ground truth");
  evaluate->add_option("--proposals", f.proposals, "proposals manifest")->required();
  evaluate->add_option("--scenes", f.scenes, "scene manifest that must match the proposals manifest");
  evaluate->add_option("--criterion", f.criterion, "iou or center_distance");
  evaluate->add_option("--iou-threshold", f.iou_threshold, "match threshold on 3D IoU");
  evaluate->add_option("--center-threshold", f.center_threshold, "match threshold on BEV center distance");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every analytic gradient");
  gradcheck->add_option("--states", f.states, "random denoiser states");
  gradcheck->add_option("--tolerance", f.tolerance, "maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInvalid;
  }

  try {
    const cli::Context ctx = make_context(f);
    if (*gen) {
      std::cout << cli::cmd_gen_scenes(ctx, f.count).string() << "\n";
    } else if (*propose) {
      cli::ProposeStats stats;
      const auto manifest = cli::cmd_propose(ctx, f.scenes, &stats);
      std::cerr << stats.detections << " detections, " << stats.proposals << " proposals, " << stats.skipped
                << " skipped\n";
      std::cout << manifest.string() << "\n";
    } else if (*train) {
      std::cout << cli::cmd_train(ctx, f.corpus, {f.resume, f.max_steps}).string() << "\n";
    } else if (*refine) {
      std::cout << cli::cmd_refine(ctx, f.proposals, f.checkpoint).string() << "\n";
    } else if (*evaluate) {
      std::optional<std::filesystem::path> scenes;
      if (!f.scenes.empty()) scenes = f.scenes;
      cli::cmd_eval(ctx, f.proposals, scenes);
    } else if (*gradcheck) {
      bool ok = true;
      for (const auto& e : cli::gradient_suite(f.states, ctx.config.seed, f.tolerance)) {
        std::cout << e.name << ": max relative error " << e.report.max_rel_error << " over " << e.report.checked
                  << " entries (worst " << e.report.worst_parameter << "[" << e.report.worst_index << "]) "
                  << (e.report.passed ? "ok" : "FAILED") << "\n";
        ok = ok && e.report.passed;
      }
      if (!ok) {
        std::cerr << "gradient check failed at tolerance " << f.tolerance << "\n";
        return kExitFailure;
      }
    }
  } catch (const hqov3d::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return 0;
}
