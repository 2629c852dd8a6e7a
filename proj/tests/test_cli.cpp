// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hqov3d/cli.hpp"

using namespace hqov3d;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("hqov3d_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct RunResult {
  int code = -1;
  std::string out, err;
};

RunResult run_cli(const std::string& args, const fs::path& scratch) {
  const fs::path out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  const std::string cmd = std::string("'") + HQOV3D_CLI_PATH + "' " + args + " >'" + out.string() + "' 2>'" +
                          err.string() + "'";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

cli::Context context(const fs::path& out, json cfg = json::object(), int jobs = 1) {
  cli::Context c;
  c.config = cli::parse_run_config(cfg);
  c.out_dir = out;
  c.jobs = jobs;
  static std::ostringstream sink;
  c.out = &sink;
  c.err = &sink;
  return c;
}

json base_scene_config() {
  return json{{"counts", {{"car", 2}, {"barrier", 1}, {"pedestrian", 2}, {"bicycle", 1}}}};
}

json novel_scene_config() {
  return json{{"counts", {{"car", 1}, {"truck", 1}, {"traffic_cone", 2}, {"pedestrian", 1}}}};
}

}  // namespace

TEST(Config, DefaultsAndSeedPropagation) {
  const auto c = cli::parse_run_config(json{{"seed", 42}});
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.train.seed, 42u);
  EXPECT_EQ(c.seeker.seed, 42u);
  const auto d = cli::parse_run_config(json{{"seed", 42}, {"train", {{"seed", 7}}}});
  EXPECT_EQ(d.train.seed, 7u);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(cli::parse_run_config(json{{"sed", 1}}), ConfigError);
  EXPECT_THROW(cli::parse_run_config(json{{"train", {{"learning_rate", 1}}}}), ConfigError);
  EXPECT_THROW(cli::parse_run_config(json{{"train", {{"lr", -1.0}}}}), ConfigError);
  EXPECT_THROW(cli::parse_run_config(json{{"refine", {{"w_iou", 0.7}}}}), WeightError);
  EXPECT_THROW(cli::parse_run_config(json{{"eval", {{"criterion", "giou"}}}}), ConfigError);
  EXPECT_THROW(cli::parse_run_config(json{{"seed", -3}}), ConfigError);
  EXPECT_THROW(cli::parse_run_config(json{{"scene", {{"counts", {{"spaceship", 1}}}}}}), UnknownCategory);
}

TEST(Config, OutputDirectoryPrecedence) {
  cli::RunConfig c;
  ::unsetenv(cli::kOutDirEnv);
  EXPECT_EQ(cli::resolve_out_dir(std::nullopt, c), fs::path("."));
  ::setenv(cli::kOutDirEnv, "/tmp/from_env", 1);
  EXPECT_EQ(cli::resolve_out_dir(std::nullopt, c), fs::path("/tmp/from_env"));
  c.out_dir = "/tmp/from_config";
  EXPECT_EQ(cli::resolve_out_dir(std::nullopt, c), fs::path("/tmp/from_config"));
  EXPECT_EQ(cli::resolve_out_dir(std::string("/tmp/from_flag"), c), fs::path("/tmp/from_flag"));
  ::unsetenv(cli::kOutDirEnv);
}

TEST(Config, HeaderIgnoresOutputLocationAndJobs) {
  const auto a = cli::command_header(context("/tmp/a", json{{"seed", 1}}, 1), "x", json::object());
  const auto b = cli::command_header(context("/tmp/b", json{{"seed", 1}, {"jobs", 3}}, 3), "x", json::object());
  EXPECT_EQ(a, b);
  const auto c = cli::command_header(context("/tmp/a", json{{"seed", 2}}, 1), "x", json::object());
  EXPECT_NE(a["config_hash"], c["config_hash"]);
}

TEST(GenScenes, ZeroCountGivesEmptyManifest) {
  const auto dir = temp_dir("gen0");
  const auto m = cli::cmd_gen_scenes(context(dir), 0);
  EXPECT_TRUE(cli::load_manifest(m).entries.empty());
}

TEST(GenScenes, ScenesLoadAndJobCountDoesNotMatter) {
  const auto d1 = temp_dir("gen_j1"), d4 = temp_dir("gen_j4");
  const json cfg{{"seed", 5}, {"scene", novel_scene_config()}};
  const auto m1 = cli::cmd_gen_scenes(context(d1, cfg, 1), 5);
  cli::cmd_gen_scenes(context(d4, cfg, 4), 5);
  const auto man = cli::load_manifest(m1);
  ASSERT_EQ(man.entries.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    const Scene s = load_scene(man.entries[i].scene);
    EXPECT_EQ(s.gt.size(), 5u);
    const std::string name = "scene_" + std::to_string(i) + ".json";
    EXPECT_EQ(slurp(d1 / name), slurp(d4 / name));
  }
  EXPECT_EQ(slurp(d1 / "scenes.json"), slurp(d4 / "scenes.json"));
}

TEST(Propose, NoiselessSeekerYieldsOneProposalPerDetection) {
  const auto dir = temp_dir("prop_clean");
  const auto ctx = context(dir, json{{"seed", 2}, {"scene", novel_scene_config()}});
  const auto scenes = cli::cmd_gen_scenes(ctx, 3);
  cli::ProposeStats stats;
  const auto props = cli::cmd_propose(ctx, scenes, &stats);
  EXPECT_GT(stats.detections, 0u);
  EXPECT_EQ(stats.proposals + stats.skipped, stats.detections);
  for (const auto& e : cli::load_manifest(props).entries) {
    const Scene s = load_scene(e.scene);
    const auto dets = oracle_seek(s, {});
    const auto list = cli::load_proposals(*e.proposals);
    const auto doc = read_json_file(*e.proposals);
    EXPECT_EQ(list.size() + doc["diagnostics"]["skipped"].size(), dets.size());
  }
}

TEST(Propose, FullDropoutGivesEmptyProposalFiles) {
  const auto dir = temp_dir("prop_drop");
  const auto ctx = context(dir, json{{"seed", 2}, {"scene", novel_scene_config()}, {"seeker", {{"dropout_prob", 1.0}}}});
  const auto props = cli::cmd_propose(ctx, cli::cmd_gen_scenes(ctx, 2));
  for (const auto& e : cli::load_manifest(props).entries) EXPECT_TRUE(cli::load_proposals(*e.proposals).empty());
}

TEST(Propose, JobCountDoesNotChangeOutputs) {
  const auto dir = temp_dir("prop_jobs");
  const json cfg{{"seed", 9}, {"scene", novel_scene_config()}, {"seeker", {{"box_jitter_frac", 0.05}}}};
  const auto scenes = cli::cmd_gen_scenes(context(dir / "s", cfg), 4);
  cli::cmd_propose(context(dir / "p1", cfg, 1), scenes);
  cli::cmd_propose(context(dir / "p4", cfg, 4), scenes);
  for (int i = 0; i < 4; ++i) {
    const std::string name = "proposals_" + std::to_string(i) + ".json";
    EXPECT_EQ(slurp(dir / "p1" / name), slurp(dir / "p4" / name));
  }
  EXPECT_EQ(slurp(dir / "p1" / "proposals.json"), slurp(dir / "p4" / "proposals.json"));
}

TEST(Propose, MalformedSceneIsReportedWithItsPath) {
  const auto dir = temp_dir("prop_bad");
  const auto ctx = context(dir, json{{"seed", 1}});
  const auto scenes = cli::cmd_gen_scenes(ctx, 2);
  write_text_file(dir / "scene_1.json", "{\"version\": 1, \"cameras\": [");
  try {
    cli::cmd_propose(context(dir / "out"), scenes);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("scene_1.json"), std::string::npos) << e.what();
  }
}

TEST(Train, ZeroEpochsWritesTheInitialModel) {
  const auto dir = temp_dir("train0");
  const auto ctx = context(dir, json{{"seed", 4}, {"scene", base_scene_config()}, {"train", {{"epochs", 0}}}});
  const auto ckpt = cli::cmd_train(ctx, cli::cmd_gen_scenes(ctx, 2));
  const DenoiserModel init(ctx.config.model, ctx.config.schedule, ctx.config.train.seed);
  EXPECT_EQ(checkpoint_to_json(load_checkpoint(ckpt)).dump(), checkpoint_to_json(init).dump());
}

TEST(Train, RefusesNovelCategories) {
  const auto dir = temp_dir("train_novel");
  const auto ctx = context(dir, json{{"seed", 4}, {"scene", novel_scene_config()}});
  const auto scenes = cli::cmd_gen_scenes(ctx, 1);
  try {
    cli::cmd_train(ctx, scenes);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("truck"), std::string::npos) << e.what();
  }
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const auto dir = temp_dir("train_resume");
  const json cfg{{"seed", 6}, {"scene", base_scene_config()}, {"train", {{"epochs", 2}, {"batch_size", 4}}}};
  const auto scenes = cli::cmd_gen_scenes(context(dir / "s", cfg), 4);
  const auto full = cli::cmd_train(context(dir / "full", cfg), scenes);
  const auto part = cli::cmd_train(context(dir / "part", cfg), scenes, {std::nullopt, 3});
  EXPECT_EQ(load_checkpoint(part).trained_steps(), 3);
  const auto resumed = cli::cmd_train(context(dir / "part", cfg), scenes, {part, std::nullopt});
  EXPECT_EQ(checkpoint_to_json(load_checkpoint(resumed)).dump(), checkpoint_to_json(load_checkpoint(full)).dump());
  EXPECT_EQ(slurp(dir / "part" / "loss.csv"), slurp(dir / "full" / "loss.csv"));
}

TEST(Train, ResumeWithDifferentModelIsRejected) {
  const auto dir = temp_dir("train_mismatch");
  const json cfg{{"seed", 6}, {"scene", base_scene_config()}, {"train", {{"epochs", 1}}}};
  const auto scenes = cli::cmd_gen_scenes(context(dir, cfg), 1);
  const auto ckpt = cli::cmd_train(context(dir, cfg), scenes);
  json other = cfg;
  other["model"] = {{"width", 16}};
  EXPECT_THROW(cli::cmd_train(context(dir / "o", other), scenes, {ckpt, std::nullopt}), ConfigError);
}

TEST(Refine, UntrainedModelKeepsBoxesAndRecordsSettings) {
  const auto dir = temp_dir("refine0");
  const json cfg{{"seed", 3}, {"scene", novel_scene_config()}, {"train", {{"epochs", 0}}},
                 {"refine", {{"S", 4}, {"t_start", 100}, {"w_iou", 0.5}, {"w_seeker", 0.5}}}};
  const auto ctx = context(dir, cfg);
  const auto props = cli::cmd_propose(ctx, cli::cmd_gen_scenes(ctx, 2));
  const auto ckpt = cli::cmd_train(context(dir / "t", json{{"seed", 3}, {"train", {{"epochs", 0}}}}),
                                   cli::cmd_gen_scenes(context(dir / "bs", json{{"scene", base_scene_config()}}), 1));
  const auto refined = cli::cmd_refine(context(dir / "r", cfg), props, ckpt);
  const json doc = read_json_file(refined);
  EXPECT_EQ(doc["header"]["refine"]["S"], 4);
  EXPECT_EQ(doc["header"]["refine"]["t_start"], 100);
  EXPECT_EQ(doc["header"]["refine"]["w_iou"], 0.5);
  const auto in = cli::load_manifest(props), out = cli::load_manifest(refined);
  ASSERT_EQ(in.entries.size(), out.entries.size());
  for (std::size_t i = 0; i < in.entries.size(); ++i) {
    const auto a = cli::load_proposals(*in.entries[i].proposals);
    const auto b = cli::load_proposals(*out.entries[i].proposals);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      ASSERT_TRUE(b[k].refined_box.has_value());
      EXPECT_EQ(*b[k].refined_box, a[k].box);
      EXPECT_DOUBLE_EQ(b[k].fused_score, 0.5 * b[k].iou_conf + 0.5 * a[k].seeker_score);
    }
  }
}

TEST(Eval, ScenesManifestMustMatch) {
  const auto dir = temp_dir("eval_mismatch");
  const auto ctx = context(dir / "a", json{{"seed", 1}, {"scene", novel_scene_config()}});
  const auto props = cli::cmd_propose(ctx, cli::cmd_gen_scenes(ctx, 2));
  const auto other = cli::cmd_gen_scenes(context(dir / "b", json{{"seed", 1}}), 2);
  EXPECT_THROW(cli::cmd_eval(ctx, props, other), ValidationError);
  const auto rep = cli::cmd_eval(ctx, props, dir / "a" / "scenes.json");
  EXPECT_GT(rep.n_proposals, 0u);
  EXPECT_TRUE(fs::exists(dir / "a" / "report.json"));
  EXPECT_EQ(slurp(dir / "a" / "pr_curves.csv").rfind("# ", 0), 0u);
}

TEST(Binary, ExitCodes) {
  const auto dir = temp_dir("bin_codes");
  EXPECT_EQ(run_cli("", dir).code, 2);
  EXPECT_EQ(run_cli("gen-scenes", dir).code, 2);
  EXPECT_EQ(run_cli("gen-scenes --count 1 --bogus", dir).code, 2);
  write_text_file(dir / "bad.json", "{\"train\": {\"lr\": -1}}");
  const auto bad = run_cli("--config '" + (dir / "bad.json").string() + "' gen-scenes --count 1", dir);
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("train.lr"), std::string::npos) << bad.err;
  const auto missing = run_cli("propose --scenes '" + (dir / "nope.json").string() + "' --out '" + dir.string() + "'", dir);
  EXPECT_NE(missing.code, 0);
  EXPECT_NE(missing.err.find("nope.json"), std::string::npos) << missing.err;
  const auto ok = run_cli("--seed 3 --out '" + (dir / "o").string() + "' gen-scenes --count 2", dir);
  EXPECT_EQ(ok.code, 0) << ok.err;
  EXPECT_NE(ok.out.find("scenes.json"), std::string::npos);
}

TEST(Binary, OverridesReachTheHeaderAndRerunsAreIdentical) {
  const auto dir = temp_dir("bin_rerun");
  const std::string out = " --out '" + dir.string() + "'";
  ASSERT_EQ(run_cli("--seed 8" + out + " gen-scenes --count 2", dir).code, 0);
  const std::string first = slurp(dir / "scene_1.json");
  ASSERT_EQ(run_cli("--seed 8" + out + " gen-scenes --count 2", dir).code, 0);
  EXPECT_EQ(slurp(dir / "scene_1.json"), first);
  ASSERT_EQ(run_cli("--seed 9" + out + " gen-scenes --count 2", dir).code, 0);
  EXPECT_NE(slurp(dir / "scene_1.json"), first);
  const json h = read_json_file(dir / "scenes.json")["header"];
  EXPECT_EQ(h["seed"], 9);
  EXPECT_EQ(h["command"], "gen-scenes");
}

TEST(Eval, ReportMatchesGoldenSnapshot) {
  const auto dir = temp_dir("golden");
  const json cfg{{"seed", 21},
                 {"scene", novel_scene_config()},
                 {"seeker", {{"box_jitter_frac", 0.05}, {"score_noise_std", 0.1}, {"mislabel_prob", 0.15}}},
                 {"bias", json::object()}};
  const auto ctx = context(dir, cfg, 2);
  cli::cmd_eval(ctx, cli::cmd_propose(ctx, cli::cmd_gen_scenes(ctx, 3)));
  json report = read_json_file(dir / "report.json");
  report.erase("header");
  const fs::path golden = fs::path(HQOV3D_GOLDEN_DIR) / "eval_report.json";
  if (std::getenv("HQOV3D_UPDATE_GOLDEN")) write_json_file(golden, report);
  ASSERT_TRUE(fs::exists(golden)) << "run once with HQOV3D_UPDATE_GOLDEN=1 to create " << golden;
  EXPECT_EQ(report, read_json_file(golden));
}
