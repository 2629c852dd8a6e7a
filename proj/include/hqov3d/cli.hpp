// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "hqov3d/denoiser.hpp"
#include "hqov3d/errors.hpp"
#include "hqov3d/eval.hpp"
#include "hqov3d/imcv.hpp"
#include "hqov3d/json_io.hpp"
#include "hqov3d/nn.hpp"
#include "hqov3d/proposal.hpp"
#include "hqov3d/rng.hpp"
#include "hqov3d/scene.hpp"

namespace hqov3d::cli {

namespace fs = std::filesystem;

inline constexpr const char* kOutDirEnv = "HQOV3D_OUT_DIR";
inline constexpr int kManifestFormatVersion = 1;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct RefineConfig {
  std::optional<int> steps;
  std::optional<int> t_start;
  std::optional<double> eta;
  double w_iou = 0.6;
  double w_seeker = 0.4;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::optional<std::string> out_dir;
  std::optional<int> jobs;
  SceneConfig scene;
  SeekerNoiseConfig seeker;
  bool seeker_seed_set = false;
  imcv::ImcvConfig imcv;
  std::optional<SystematicBias> bias;
  ModelConfig model;
  ScheduleConfig schedule;
  TrainConfig train;
  bool train_seed_set = false;
  RefineConfig refine;
  eval::EvalConfig eval;
};

/// Reads the fields of one config object, rejecting keys outside `allowed`.
class Fields {
 public:
  Fields(const json& j, std::string path, std::initializer_list<std::string_view> allowed)
      : j_(j), path_(std::move(path)) {
    jsonio::reject_unknown(j_, allowed, path_);
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& at(const char* key) const { return j_.at(key); }
  std::string path(const char* key) const { return jsonio::join_path(path_, key); }

  void get(const char* key, double& out) const {
    if (has(key)) out = jsonio::number(at(key), path(key));
  }
  void get(const char* key, int& out) const {
    if (has(key)) out = static_cast<int>(jsonio::integer(at(key), path(key)));
  }
  void get(const char* key, bool& out) const {
    if (has(key)) out = jsonio::boolean(at(key), path(key));
  }
  void get(const char* key, std::uint64_t& out) const {
    if (!has(key)) return;
    const json& v = at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      throw ConfigError("field '" + path(key) + "' must be a non-negative integer");
    }
    out = v.get<std::uint64_t>();
  }
  void get(const char* key, std::optional<int>& out) const {
    if (has(key) && !at(key).is_null()) out = static_cast<int>(jsonio::integer(at(key), path(key)));
  }
  void get(const char* key, std::optional<double>& out) const {
    if (has(key) && !at(key).is_null()) out = jsonio::number(at(key), path(key));
  }

 private:
  const json& j_;
  std::string path_;
};

inline SceneConfig scene_config_from_json(const json& j, const std::string& path) {
  Fields f(j, path,
           {"half_extent", "min_range", "max_range", "counts", "fixed_objects", "point_density", "clutter_points",
            "clutter_max_z", "occlusion", "size_jitter", "sensor_height", "rig"});
  SceneConfig c;
  f.get("half_extent", c.half_extent);
  f.get("min_range", c.min_range);
  f.get("max_range", c.max_range);
  f.get("point_density", c.point_density);
  f.get("clutter_points", c.clutter_points);
  f.get("clutter_max_z", c.clutter_max_z);
  f.get("occlusion", c.occlusion);
  f.get("size_jitter", c.size_jitter);
  f.get("sensor_height", c.sensor_height);
  if (f.has("counts")) {
    const json& counts = f.at("counts");
    if (!counts.is_object()) throw ConfigError("field '" + f.path("counts") + "' must be an object");
    for (auto it = counts.begin(); it != counts.end(); ++it) {
      const std::string p = jsonio::join_path(f.path("counts"), it.key());
      if (!try_find_category(it.key())) throw UnknownCategory("unknown category at '" + p + "'");
      c.counts[it.key()] = static_cast<int>(jsonio::integer(it.value(), p));
    }
  }
  if (f.has("fixed_objects")) {
    const json& list = jsonio::array(f.at("fixed_objects"), f.path("fixed_objects"));
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string p = jsonio::index_path(f.path("fixed_objects"), i);
      Fields o(list[i], p, {"category", "box"});
      const std::string cat = jsonio::string(jsonio::require(list[i], "category", p), o.path("category"));
      find_category(cat);
      c.fixed_objects.push_back({cat, box_from_json(jsonio::require(list[i], "box", p), o.path("box"))});
    }
  }
  if (f.has("rig")) {
    Fields r(f.at("rig"), f.path("rig"), {"count", "hfov_deg", "image_width", "image_height", "mount_height"});
    r.get("count", c.rig.count);
    r.get("hfov_deg", c.rig.hfov_deg);
    r.get("image_width", c.rig.image_width);
    r.get("image_height", c.rig.image_height);
    r.get("mount_height", c.rig.mount_height);
  }
  validate_scene_config(c);
  return c;
}

inline json to_json(const SceneConfig& c) {
  json fixed = json::array();
  for (const auto& o : c.fixed_objects) fixed.push_back(json{{"category", o.category}, {"box", box_to_json(o.box)}});
  return json{{"half_extent", c.half_extent},
              {"min_range", c.min_range},
              {"max_range", c.max_range},
              {"counts", c.counts},
              {"fixed_objects", std::move(fixed)},
              {"point_density", c.point_density},
              {"clutter_points", c.clutter_points},
              {"clutter_max_z", c.clutter_max_z},
              {"occlusion", c.occlusion},
              {"size_jitter", c.size_jitter},
              {"sensor_height", c.sensor_height},
              {"rig",
               {{"count", c.rig.count},
                {"hfov_deg", c.rig.hfov_deg},
                {"image_width", c.rig.image_width},
                {"image_height", c.rig.image_height},
                {"mount_height", c.rig.mount_height}}}};
}

inline json to_json(const SeekerNoiseConfig& n) {
  return json{{"box_jitter_frac", n.box_jitter_frac},
              {"mask_erode_dilate_px", n.mask_erode_dilate_px},
              {"leak_point_frac", n.leak_point_frac},
              {"score_noise_std", n.score_noise_std},
              {"dropout_prob", n.dropout_prob},
              {"mislabel_prob", n.mislabel_prob},
              {"mislabel_score_scale", n.mislabel_score_scale},
              {"seed", n.seed}};
}

inline json to_json(const imcv::ImcvConfig& c) {
  return json{{"dbscan_eps", c.dbscan_eps}, {"dbscan_min_samples", c.dbscan_min_samples},
              {"r_max", c.r_max},           {"alpha_pts", c.alpha_pts},
              {"alpha_iou", c.alpha_iou},   {"n_sizes", c.n_sizes},
              {"n_yaws", c.n_yaws},         {"thresh_dim_factor", c.thresh_dim_factor}};
}

inline json to_json(const SystematicBias& b) {
  return json{{"shift_per_meter", b.shift_per_meter}, {"size_scale", b.size_scale}, {"yaw_offset", b.yaw_offset}};
}

inline json to_json(const TrainConfig& c) {
  json j{{"lr", c.lr},
         {"weight_decay", c.weight_decay},
         {"lambda_conf", c.lambda_conf},
         {"vfl_alpha", c.vfl.alpha},
         {"vfl_gamma", c.vfl.gamma},
         {"seed", c.seed},
         {"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"train_t_max", c.train_t_max},
         {"min_points", c.min_points},
         {"chunk_scenes", c.chunk_scenes},
         {"resample_noise", c.resample_noise}};
  if (c.fixed_timestep) j["fixed_timestep"] = *c.fixed_timestep;
  return j;
}

inline json to_json(const eval::EvalConfig& c) {
  return json{{"criterion", c.criterion.kind == eval::Criterion::kIou ? "iou" : "center_distance"},
              {"iou_threshold", c.criterion.iou_threshold},
              {"center_threshold", c.criterion.center_threshold},
              {"histogram_bins", c.histogram_bins}};
}

inline json to_json(const RefineConfig& c) {
  json j{{"w_iou", c.w_iou}, {"w_seeker", c.w_seeker}};
  if (c.steps) j["S"] = *c.steps;
  if (c.t_start) j["t_start"] = *c.t_start;
  if (c.eta) j["eta"] = *c.eta;
  return j;
}

/// Effective configuration, excluding settings that cannot change outputs
/// (output directory, worker count). Its hash goes into every header.
inline json to_json(const RunConfig& c) {
  json j{{"seed", c.seed},
         {"scene", to_json(c.scene)},
         {"seeker", to_json(c.seeker)},
         {"imcv", to_json(c.imcv)},
         {"model", to_json(c.model)},
         {"schedule", to_json(c.schedule)},
         {"train", to_json(c.train)},
         {"refine", to_json(c.refine)},
         {"eval", to_json(c.eval)}};
  j["bias"] = c.bias ? to_json(*c.bias) : json(nullptr);
  return j;
}

inline RunConfig parse_run_config(const json& j) {
  RunConfig c;
  if (j.is_null()) {
    c.seeker.seed = c.seed;
    c.train.seed = c.seed;
    return c;
  }
  Fields f(j, "", {"seed", "out_dir", "jobs", "scene", "seeker", "imcv", "bias", "model", "schedule", "train", "refine",
                   "eval"});
  f.get("seed", c.seed);
  if (f.has("out_dir")) c.out_dir = jsonio::string(f.at("out_dir"), "out_dir");
  f.get("jobs", c.jobs);
  if (c.jobs && *c.jobs < 1) throw ConfigError("field 'jobs' must be >= 1");
  if (f.has("scene")) c.scene = scene_config_from_json(f.at("scene"), "scene");
  if (f.has("seeker")) {
    Fields s(f.at("seeker"), "seeker",
             {"box_jitter_frac", "mask_erode_dilate_px", "leak_point_frac", "score_noise_std", "dropout_prob",
              "mislabel_prob", "mislabel_score_scale", "seed"});
    s.get("box_jitter_frac", c.seeker.box_jitter_frac);
    s.get("mask_erode_dilate_px", c.seeker.mask_erode_dilate_px);
    s.get("leak_point_frac", c.seeker.leak_point_frac);
    s.get("score_noise_std", c.seeker.score_noise_std);
    s.get("dropout_prob", c.seeker.dropout_prob);
    s.get("mislabel_prob", c.seeker.mislabel_prob);
    s.get("mislabel_score_scale", c.seeker.mislabel_score_scale);
    c.seeker_seed_set = s.has("seed");
    s.get("seed", c.seeker.seed);
    validate_noise(c.seeker);
  }
  if (!c.seeker_seed_set) c.seeker.seed = c.seed;
  if (f.has("imcv")) {
    Fields s(f.at("imcv"), "imcv",
             {"dbscan_eps", "dbscan_min_samples", "r_max", "alpha_pts", "alpha_iou", "n_sizes", "n_yaws",
              "thresh_dim_factor"});
    s.get("dbscan_eps", c.imcv.dbscan_eps);
    s.get("dbscan_min_samples", c.imcv.dbscan_min_samples);
    s.get("r_max", c.imcv.r_max);
    s.get("alpha_pts", c.imcv.alpha_pts);
    s.get("alpha_iou", c.imcv.alpha_iou);
    s.get("n_sizes", c.imcv.n_sizes);
    s.get("n_yaws", c.imcv.n_yaws);
    s.get("thresh_dim_factor", c.imcv.thresh_dim_factor);
    imcv::validate(c.imcv);
  }
  if (f.has("bias") && !f.at("bias").is_null()) {
    Fields s(f.at("bias"), "bias", {"shift_per_meter", "size_scale", "yaw_offset"});
    SystematicBias b;
    s.get("shift_per_meter", b.shift_per_meter);
    s.get("size_scale", b.size_scale);
    s.get("yaw_offset", b.yaw_offset);
    apply_systematic_bias(Box3D{{1.0, 0.0, 0.0}, {1.0, 1.0, 1.0}, 0.0}, b);  // validates
    c.bias = b;
  }
  if (f.has("model")) c.model = model_config_from_json(f.at("model"), "model");
  if (f.has("schedule")) c.schedule = schedule_config_from_json(f.at("schedule"), "schedule");
  if (f.has("train")) {
    Fields s(f.at("train"), "train",
             {"lr", "weight_decay", "lambda_conf", "vfl_alpha", "vfl_gamma", "seed", "epochs", "batch_size",
              "train_t_max", "min_points", "chunk_scenes", "fixed_timestep", "resample_noise"});
    s.get("lr", c.train.lr);
    s.get("weight_decay", c.train.weight_decay);
    s.get("lambda_conf", c.train.lambda_conf);
    s.get("vfl_alpha", c.train.vfl.alpha);
    s.get("vfl_gamma", c.train.vfl.gamma);
    c.train_seed_set = s.has("seed");
    s.get("seed", c.train.seed);
    s.get("epochs", c.train.epochs);
    s.get("batch_size", c.train.batch_size);
    s.get("train_t_max", c.train.train_t_max);
    s.get("min_points", c.train.min_points);
    s.get("chunk_scenes", c.train.chunk_scenes);
    s.get("fixed_timestep", c.train.fixed_timestep);
    s.get("resample_noise", c.train.resample_noise);
  }
  if (!c.train_seed_set) c.train.seed = c.seed;
  validate(c.train, DiffusionSchedule(c.schedule));
  if (f.has("refine")) {
    Fields s(f.at("refine"), "refine", {"S", "t_start", "eta", "w_iou", "w_seeker"});
    s.get("S", c.refine.steps);
    s.get("t_start", c.refine.t_start);
    s.get("eta", c.refine.eta);
    s.get("w_iou", c.refine.w_iou);
    s.get("w_seeker", c.refine.w_seeker);
    fuse_scores(0.0, 0.0, c.refine.w_iou, c.refine.w_seeker);  // validates the weights
  }
  if (f.has("eval")) {
    Fields s(f.at("eval"), "eval", {"criterion", "iou_threshold", "center_threshold", "histogram_bins"});
    if (s.has("criterion")) {
      const std::string k = jsonio::string(s.at("criterion"), "eval.criterion");
      if (k == "iou") {
        c.eval.criterion.kind = eval::Criterion::kIou;
      } else if (k == "center_distance") {
        c.eval.criterion.kind = eval::Criterion::kCenterDistance;
      } else {
        throw ConfigError("field 'eval.criterion' must be \"iou\" or \"center_distance\"");
      }
    }
    s.get("iou_threshold", c.eval.criterion.iou_threshold);
    s.get("center_threshold", c.eval.criterion.center_threshold);
    s.get("histogram_bins", c.eval.histogram_bins);
    if (c.eval.histogram_bins < 1) throw ConfigError("field 'eval.histogram_bins' must be >= 1");
  }
  return c;
}

/// Sets `value` at a dotted path inside `j`, creating objects on the way.
inline void set_path(json& j, const std::string& dotted, json value) {
  json* cur = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!cur->is_object()) *cur = json::object();
    if (dot == std::string::npos) {
      (*cur)[key] = std::move(value);
      return;
    }
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

/// Output directory: explicit flag, then config file, then the environment
/// variable, then the working directory.
inline fs::path resolve_out_dir(const std::optional<std::string>& flag, const RunConfig& cfg) {
  if (flag && !flag->empty()) return *flag;
  if (cfg.out_dir) return *cfg.out_dir;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return env;
  return ".";
}

inline int default_jobs() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

// ---------------------------------------------------------------------------
// Parallel per-item execution
// ---------------------------------------------------------------------------

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. The first failure in
/// index order is rethrown after all workers finish.
inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

struct ManifestEntry {
  fs::path scene;
  std::optional<fs::path> proposals;
  std::uint64_t seed = 0;
};

struct Manifest {
  std::string kind;
  std::vector<ManifestEntry> entries;
};

inline fs::path absolute_path(const fs::path& p) { return fs::absolute(p).lexically_normal(); }

inline json manifest_to_json(const Manifest& m, const json& header) {
  json list = json::array();
  for (const auto& e : m.entries) {
    json j{{"scene", e.scene.generic_string()}, {"seed", e.seed}};
    if (e.proposals) j["proposals"] = e.proposals->generic_string();
    list.push_back(std::move(j));
  }
  return json{{"version", kManifestFormatVersion}, {"header", header}, {"kind", m.kind}, {"entries", std::move(list)}};
}

/// Loads a manifest; relative entry paths resolve against its directory.
inline Manifest load_manifest(const fs::path& path) {
  const json doc = read_json_file(path);
  try {
    jsonio::check_version(doc, kManifestFormatVersion, "manifest");
    Manifest m;
    m.kind = jsonio::string(jsonio::require(doc, "kind", ""), "kind");
    const json& list = jsonio::array(jsonio::require(doc, "entries", ""), "entries");
    const fs::path base = absolute_path(path).parent_path();
    auto resolve = [&](const std::string& s) {
      const fs::path p(s);
      return p.is_absolute() ? p : (base / p).lexically_normal();
    };
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string p = jsonio::index_path("entries", i);
      ManifestEntry e;
      e.scene = resolve(jsonio::string(jsonio::require(list[i], "scene", p), jsonio::join_path(p, "scene")));
      if (list[i].contains("proposals")) {
        e.proposals = resolve(jsonio::string(list[i]["proposals"], jsonio::join_path(p, "proposals")));
      }
      if (list[i].contains("seed")) {
        e.seed = list[i]["seed"].get<std::uint64_t>();
      }
      m.entries.push_back(std::move(e));
    }
    return m;
  } catch (const SchemaError& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

inline void require_proposals(const Manifest& m, const fs::path& path) {
  for (const auto& e : m.entries) {
    if (!e.proposals) throw SchemaError(path.string() + ": manifest entries lack proposal files");
  }
}

inline std::vector<Proposal> load_proposals(const fs::path& path) {
  try {
    return proposals_from_json(read_json_file(path));
  } catch (const SchemaError& e) {
    throw SchemaError(path.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

inline Scene load_scene_with_context(const fs::path& path) {
  try {
    return load_scene(path);
  } catch (const SchemaError&) {
    throw;
  } catch (const Error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct Context {
  RunConfig config;
  fs::path out_dir = ".";
  int jobs = 1;
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
};

inline json command_header(const Context& ctx, const std::string& command, const json& args) {
  json cfg{{"command", command}, {"args", args}, {"config", to_json(ctx.config)}};
  json h = make_header(cfg, ctx.config.seed);
  h["command"] = command;
  return h;
}

inline fs::path cmd_gen_scenes(const Context& ctx, int count) {
  if (count < 0) throw ConfigError("--count must be >= 0");
  const json header = command_header(ctx, "gen-scenes", json{{"count", count}});
  fs::create_directories(ctx.out_dir);
  Manifest m{"scenes", std::vector<ManifestEntry>(static_cast<std::size_t>(count))};
  parallel_for(static_cast<std::size_t>(count), ctx.jobs, [&](std::size_t i) {
    SceneConfig sc = ctx.config.scene;
    sc.seed = derive_seed(ctx.config.seed, {0x5CE7E, i});
    const std::string name = "scene_" + std::to_string(i) + ".json";
    save_scene(ctx.out_dir / name, generate_scene(sc), header);
    m.entries[i] = {name, std::nullopt, sc.seed};
  });
  const fs::path manifest = ctx.out_dir / "scenes.json";
  write_json_file(manifest, manifest_to_json(m, header));
  return manifest;
}

struct ProposeStats {
  std::size_t detections = 0;
  std::size_t proposals = 0;
  std::size_t skipped = 0;
};

inline fs::path cmd_propose(const Context& ctx, const fs::path& scenes_manifest, ProposeStats* stats = nullptr) {
  const Manifest in = load_manifest(scenes_manifest);
  const json header = command_header(ctx, "propose", json{{"scenes", absolute_path(scenes_manifest).generic_string()}});
  fs::create_directories(ctx.out_dir);
  Manifest m{"proposals", std::vector<ManifestEntry>(in.entries.size())};
  std::vector<ProposeStats> per(in.entries.size());
  parallel_for(in.entries.size(), ctx.jobs, [&](std::size_t i) {
    const Scene scene = load_scene_with_context(in.entries[i].scene);
    const auto dets = oracle_seek(scene, ctx.config.seeker);
    auto res = imcv::run_imcv(scene, dets, ctx.config.imcv);
    if (ctx.config.bias) {
      for (auto& p : res.proposals) p.box = apply_systematic_bias(p.box, *ctx.config.bias);
    }
    json skipped = json::array();
    for (const auto& d : res.skipped) {
      skipped.push_back(json{{"det_index", d.det_index}, {"view", d.view}, {"reason", d.reason}});
    }
    json extra{{"scene", in.entries[i].scene.generic_string()},
               {"diagnostics",
                {{"detections", dets.size()}, {"skipped", std::move(skipped)}, {"cluster_counts", res.cluster_counts}}}};
    const std::string name = "proposals_" + std::to_string(i) + ".json";
    write_json_file(ctx.out_dir / name, proposals_to_json(res.proposals, header, extra));
    m.entries[i] = {in.entries[i].scene, fs::path(name), in.entries[i].seed};
    per[i] = {dets.size(), res.proposals.size(), res.skipped.size()};
  });
  if (stats) {
    for (const auto& s : per) {
      stats->detections += s.detections;
      stats->proposals += s.proposals;
      stats->skipped += s.skipped;
    }
  }
  const fs::path manifest = ctx.out_dir / "proposals.json";
  write_json_file(manifest, manifest_to_json(m, header));
  return manifest;
}

struct TrainOptions {
  std::optional<fs::path> resume;
  std::optional<std::int64_t> max_steps;
};

inline std::vector<Scene> load_corpus(const Manifest& m, int jobs) {
  std::vector<Scene> scenes(m.entries.size());
  parallel_for(m.entries.size(), jobs, [&](std::size_t i) { scenes[i] = load_scene_with_context(m.entries[i].scene); });
  return scenes;
}

inline std::string loss_csv(const std::vector<LossRecord>& log) {
  std::ostringstream os;
  os << "step,loss,l1,vfl\n";
  char line[128];
  for (const auto& r : log) {
    std::snprintf(line, sizeof line, "%lld,%.17g,%.17g,%.17g\n", static_cast<long long>(r.step), r.loss, r.l1, r.vfl);
    os << line;
  }
  return os.str();
}

inline std::vector<LossRecord> read_loss_csv(const fs::path& path, std::int64_t before_step) {
  std::vector<LossRecord> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    LossRecord r;
    long long step = 0;
    if (std::sscanf(line.c_str(), "%lld,%lf,%lf,%lf", &step, &r.loss, &r.l1, &r.vfl) == 4 && step < before_step) {
      r.step = step;
      out.push_back(r);
    }
  }
  return out;
}

/// Trains on a scene corpus; writes checkpoint.json and loss.csv.
inline fs::path cmd_train(const Context& ctx, const fs::path& corpus_manifest, const TrainOptions& opt = {}) {
  const Manifest in = load_manifest(corpus_manifest);
  const json header = command_header(ctx, "train", json{{"corpus", absolute_path(corpus_manifest).generic_string()}});
  const std::vector<Scene> corpus = load_corpus(in, ctx.jobs);
  TrainConfig tc = ctx.config.train;
  tc.max_steps = opt.max_steps;

  DenoiserModel model(ctx.config.model, ctx.config.schedule, tc.seed);
  std::vector<LossRecord> log;
  if (opt.resume) {
    model = load_checkpoint(*opt.resume);
    if (model.config() != ctx.config.model || model.schedule().config() != ctx.config.schedule) {
      throw ConfigError(opt.resume->string() + ": checkpoint model or schedule differs from the configuration");
    }
    log = read_loss_csv(opt.resume->parent_path() / "loss.csv", model.trained_steps());
  }
  const TrainReport rep = train(model, corpus, tc);
  log.insert(log.end(), rep.log.begin(), rep.log.end());
  *ctx.err << "trained " << model.trained_steps() << "/" << rep.steps_per_epoch * tc.epochs << " steps on "
           << rep.samples << " boxes\n";
  fs::create_directories(ctx.out_dir);
  const fs::path ckpt = ctx.out_dir / "checkpoint.json";
  save_checkpoint(ckpt, model, header);
  write_text_file(ctx.out_dir / "loss.csv", header_comment(header) + loss_csv(log));
  return ckpt;
}

inline RefineOptions refine_options(const DenoiserModel& model, const RefineConfig& rc) {
  RefineOptions o;
  const ScheduleConfig& s = model.schedule().config();
  o.steps = rc.steps.value_or(s.steps);
  o.t_start = rc.t_start.value_or(s.t_start);
  o.eta = rc.eta.value_or(s.eta);
  return o;
}

/// Refines every proposal in place: refined box, confidence and fused score.
inline void refine_proposals(const DenoiserModel& model, const Scene& scene, std::vector<Proposal>& props,
                             const RefineOptions& base, double w_iou, double w_seeker, std::uint64_t seed) {
  const BevGrid bev = rasterize_bev(scene, model.config().half_extent, model.config().cell);
  for (std::size_t k = 0; k < props.size(); ++k) {
    Proposal& p = props[k];
    RefineOptions o = base;
    o.seed = derive_seed(seed, {scene.seed, k});
    const int super = super_category_of(p.category.name, p.category.prior);
    const RefineResult r = ddim_refine(model, bev, p.box, super, o);
    p.refined_box = r.box;
    p.iou_conf = r.confidence;
    p.fused_score = fuse_scores(r.confidence, p.seeker_score, w_iou, w_seeker);
  }
}

inline fs::path cmd_refine(const Context& ctx, const fs::path& proposals_manifest, const fs::path& checkpoint) {
  const Manifest in = load_manifest(proposals_manifest);
  require_proposals(in, proposals_manifest);
  const DenoiserModel model = load_checkpoint(checkpoint);
  const RefineConfig& rc = ctx.config.refine;
  fuse_scores(0.0, 0.0, rc.w_iou, rc.w_seeker);
  const RefineOptions base = refine_options(model, rc);
  if (base.steps < 1 || base.t_start < base.steps || base.t_start > model.schedule().T() || base.eta < 0.0 ||
      base.eta > 1.0) {
    throw ConfigError("refine: need 1 <= S <= t_start <= T and eta in [0, 1]");
  }
  const json refine_block{{"S", base.steps}, {"t_start", base.t_start}, {"eta", base.eta},
                          {"w_iou", rc.w_iou}, {"w_seeker", rc.w_seeker}};
  json header = command_header(ctx, "refine",
                               json{{"proposals", absolute_path(proposals_manifest).generic_string()},
                                    {"checkpoint", absolute_path(checkpoint).generic_string()}});
  header["refine"] = refine_block;
  fs::create_directories(ctx.out_dir);
  Manifest m{"proposals", std::vector<ManifestEntry>(in.entries.size())};
  parallel_for(in.entries.size(), ctx.jobs, [&](std::size_t i) {
    const Scene scene = load_scene_with_context(in.entries[i].scene);
    auto props = load_proposals(*in.entries[i].proposals);
    refine_proposals(model, scene, props, base, rc.w_iou, rc.w_seeker, ctx.config.seed);
    const std::string name = "refined_" + std::to_string(i) + ".json";
    write_json_file(ctx.out_dir / name,
                    proposals_to_json(props, header, json{{"scene", in.entries[i].scene.generic_string()}}));
    m.entries[i] = {in.entries[i].scene, fs::path(name), in.entries[i].seed};
  });
  const fs::path manifest = ctx.out_dir / "refined.json";
  write_json_file(manifest, manifest_to_json(m, header));
  return manifest;
}

/// Evaluates a proposals manifest against its scenes. When a scenes manifest
/// is also given, both must list the same scenes in the same order.
inline eval::MetricsReport cmd_eval(const Context& ctx, const fs::path& proposals_manifest,
                                    const std::optional<fs::path>& scenes_manifest = std::nullopt) {
  const Manifest in = load_manifest(proposals_manifest);
  require_proposals(in, proposals_manifest);
  if (scenes_manifest) {
    const Manifest sm = load_manifest(*scenes_manifest);
    bool same = sm.entries.size() == in.entries.size();
    for (std::size_t i = 0; same && i < sm.entries.size(); ++i) same = sm.entries[i].scene == in.entries[i].scene;
    if (!same) {
      throw ValidationError("scene manifest " + scenes_manifest->string() + " disagrees with proposals manifest " +
                            proposals_manifest.string());
    }
  }
  std::vector<Scene> scenes(in.entries.size());
  std::vector<std::vector<Proposal>> props(in.entries.size());
  parallel_for(in.entries.size(), ctx.jobs, [&](std::size_t i) {
    scenes[i] = load_scene_with_context(in.entries[i].scene);
    props[i] = load_proposals(*in.entries[i].proposals);
  });
  const eval::MetricsReport rep = eval::evaluate(scenes, props, ctx.config.eval);
  const json header =
      command_header(ctx, "eval", json{{"proposals", absolute_path(proposals_manifest).generic_string()}});
  fs::create_directories(ctx.out_dir);
  write_json_file(ctx.out_dir / "report.json", eval::report_to_json(rep, ctx.config.eval, header));
  write_text_file(ctx.out_dir / "pr_curves.csv", header_comment(header) + eval::pr_csv(rep));
  *ctx.out << eval::format_table(rep);
  return rep;
}

// ---------------------------------------------------------------------------
// Gradient-check suite
// ---------------------------------------------------------------------------

struct GradSuiteEntry {
  std::string name;
  nn::GradCheckReport report;
};

/// A model whose every parameter, including the zero-initialized output
/// layer, is nudged away from its initial value so all gradients are live.
inline DenoiserModel perturbed_model(std::uint64_t seed, const ModelConfig& mc = {}) {
  DenoiserModel m(mc, {}, seed);
  Rng rng(derive_seed(seed, {0x9E77}));
  for (auto* p : m.parameters()) {
    for (auto& v : p->value.values()) v += 0.05 * normal(rng);
  }
  return m;
}

/// Finite-difference check of the full denoiser loss at `states` random
/// states, plus the individual layers.
inline std::vector<GradSuiteEntry> gradient_suite(int states, std::uint64_t seed, double tolerance) {
  std::vector<GradSuiteEntry> out;
  Rng rng(derive_seed(seed, {0x6AD}));

  {
    nn::Linear lin("linear", 5, 4, rng);
    nn::Tensor x = nn::Tensor::matrix(3, 5), w = nn::Tensor::matrix(3, 4);
    for (auto& v : x.values()) v = normal(rng);
    for (auto& v : w.values()) v = normal(rng);
    nn::ParameterList ps;
    lin.collect(ps);
    auto loss = [&] {
      const nn::Tensor y = nn::gelu(lin.forward(x));
      double s = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
      return s;
    };
    auto grads = [&] {
      nn::zero_grads(ps);
      const nn::Tensor h = lin.forward(x);
      nn::Tensor dy = w;
      lin.backward(x, nn::gelu_backward(h, dy));
    };
    out.push_back({"linear+gelu", nn::gradient_check(ps, loss, grads, tolerance)});
  }
  {
    nn::Linear q("q", 4, 6, rng), k("k", 4, 6, rng), v("v", 4, 6, rng);
    nn::LayerNorm ln("ln", 6);
    for (auto& g : ln.gain.value.values()) g += 0.1 * normal(rng);
    nn::Tensor xq = nn::Tensor::matrix(1, 4), xt = nn::Tensor::matrix(5, 4), w = nn::Tensor::matrix(1, 6);
    for (auto& e : xq.values()) e = normal(rng);
    for (auto& e : xt.values()) e = normal(rng);
    for (auto& e : w.values()) e = normal(rng);
    nn::ParameterList ps;
    q.collect(ps);
    k.collect(ps);
    v.collect(ps);
    ln.collect(ps);
    auto loss = [&] {
      const nn::Tensor qp = q.forward(xq);
      const nn::Tensor y = ln.forward(nn::add(qp, nn::attention(qp, k.forward(xt), v.forward(xt))));
      double s = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
      return s;
    };
    auto grads = [&] {
      nn::zero_grads(ps);
      const nn::Tensor qp = q.forward(xq), kk = k.forward(xt), vv = v.forward(xt);
      nn::AttentionCache ac;
      const nn::Tensor r = nn::add(qp, nn::attention(qp, kk, vv, &ac));
      nn::LayerNorm::Cache lc;
      ln.forward(r, &lc);
      const nn::Tensor dr = ln.backward(lc, w);
      const auto ag = nn::attention_backward(qp, kk, vv, ac, dr);
      q.backward(xq, nn::add(dr, ag.dq));
      k.backward(xt, ag.dkeys);
      v.backward(xt, ag.dvalues);
    };
    out.push_back({"attention+layernorm", nn::gradient_check(ps, loss, grads, tolerance)});
  }

  SceneConfig sc;
  sc.seed = derive_seed(seed, {0x5C});
  sc.counts = {{"car", 3}, {"trailer", 1}, {"barrier", 2}, {"bicycle", 2}, {"pedestrian", 3}};
  const Scene scene = generate_scene(sc);
  DenoiserModel model = perturbed_model(seed);
  const BevGrid bev = rasterize_bev(scene, model.config().half_extent, model.config().cell);
  nn::ParameterList ps = model.parameters();
  for (int s = 0; s < states; ++s) {
    const GtObject& obj = scene.gt[static_cast<std::size_t>(s) % scene.gt.size()];
    const int super = obj.category.super_category;
    const int t = std::uniform_int_distribution<int>(1, 200)(rng);
    StateVec eps{};
    for (auto& e : eps) e = normal(rng);
    const StateVec x_t = noise_state(normalize_box(obj.box, model.scales()[super]), model.schedule().sigma(t), eps);
    const double q = sample_loss(model, bev, obj.box, super, x_t, t, 1.0, {}).target_iou;
    auto loss = [&] { return sample_loss(model, bev, obj.box, super, x_t, t, 1.0, {}, std::nullopt, q).loss; };
    auto grads = [&] {
      nn::zero_grads(ps);
      sample_loss(model, bev, obj.box, super, x_t, t, 1.0, {}, 1.0, q);
    };
    out.push_back({"denoiser state " + std::to_string(s), nn::gradient_check(ps, loss, grads, tolerance)});
  }
  return out;
}

}  // namespace hqov3d::cli
