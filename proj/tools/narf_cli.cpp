// narf: dataset generation, training, rendering, evaluation, gradient
// checking and cost reporting from the command line.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
// configuration. Failures end with one stderr line "error: <kind>: <message>".

#include "narf/checkpoint.hpp"
#include "narf/dataset.hpp"
#include "narf/error.hpp"
#include "narf/image_io.hpp"
#include "narf/metrics.hpp"
#include "narf/parallel.hpp"
#include "narf/renderer.hpp"
#include "narf/scene.hpp"
#include "narf/training.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#ifndef NARF_GIT_DESCRIBE
#define NARF_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace narf {
namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;

// Raised for configuration values that parse but make no sense.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

int report_error(const char* kind, const std::string& message, int code) {
  std::cerr << "error: " << kind << ": " << one_line(message) << std::endl;
  return code;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw Error("cannot write " + path.string());
}

json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// Records how an artifact directory was produced.
struct Manifest {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  std::vector<std::string> outputs;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const fs::path& dir) const {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    json j{{"command", command},
           {"config", config},
           {"seed", seed},
           {"git_describe", NARF_GIT_DESCRIBE},
           {"wall_seconds", wall},
           {"threads", thread_count()},
           {"outputs", outputs}};
    write_text(dir / "manifest.json", j.dump(2) + "\n");
  }
};

// ---- gen-data -------------------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  std::uint64_t seed = 0;
  std::string scene = "desk";
  std::size_t instances = 5;
  DatasetCounts counts;
};

int run_gen_data(const GenDataArgs& a) {
  Manifest m;
  m.command = "gen-data";
  m.seed = a.seed;
  a.counts.validate();
  SceneSpec scene;
  if (a.scene == "desk") {
    scene = SceneSpec::desk_default();
  } else {
    if (a.instances < 1) throw ConfigError("instances must be >= 1");
    scene = SceneSpec::multi_instance(a.instances, derive_seed(a.seed, 0x5ce));
  }
  scene.validate();
  const Dataset data = generate_dataset(scene, a.counts, a.seed);
  save_dataset(data, a.out);
  m.config = {{"scene", a.scene},
              {"instances", scene.instances.size()},
              {"train_poses", a.counts.train_poses},
              {"views_per_pose", a.counts.views_per_pose},
              {"test_per_split", a.counts.test_per_split},
              {"reference_bins", a.counts.reference_bins}};
  m.outputs.push_back("scene.json");
  for (const auto& [name, records] : data.splits) m.outputs.push_back(name + "/");
  m.write(a.out);
  std::size_t images = 0;
  for (const auto& [name, records] : data.splits) images += records.size();
  std::cout << "wrote " << images << " images to " << a.out << "\n";
  return 0;
}

// ---- train ----------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  std::string arch = "narf_d";
  std::string selector = "softmax";
  std::string config_json;
  std::size_t log_every = 100;
  bool deterministic = false;
  bool quiet = false;
  TrainConfig cfg;
};

// Wall-clock columns are the only non-reproducible part of a run; the
// deterministic mode writes zeros there.
void rewrite_metrics_without_time(const fs::path& path, const std::vector<TrainLogRow>& log) {
  std::string text = std::string(kMetricsHeader) + "\n";
  for (TrainLogRow r : log) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.6g,%.9g,0\n", r.iteration, r.loss, r.color_loss, r.mask_loss,
                  r.val_psnr, r.learning_rate);
    text += buf;
  }
  write_text(path, text);
}

int run_train(TrainArgs& a) {
  Manifest m;
  m.command = "train";
  TrainConfig cfg = a.cfg;
  try {
    cfg.arch = parse_architecture(a.arch);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("arch: ") + e.what());
  }
  try {
    cfg.selector = parse_selector_activation(a.selector);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("selector: ") + e.what());
  }
  if (!a.config_json.empty()) {
    // A JSON training config overrides everything given on the command line.
    try {
      cfg = TrainConfig::from_json(read_json_file(a.config_json));
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  m.seed = cfg.seed;
  m.config = cfg.to_json();
  m.config["deterministic"] = a.deterministic;

  const Dataset data = load_dataset(a.data);
  const fs::path out(a.out);
  fs::create_directories(out);
  const ProgressFn progress = [&](const TrainLogRow& r) {
    if (a.quiet) return;
    const bool val = !std::isnan(r.val_psnr);
    if (!val && (a.log_every == 0 || r.iteration % a.log_every != 0)) return;
    std::printf("iter %zu loss %.5g color %.5g mask %.5g lr %.3g", r.iteration, r.loss, r.color_loss, r.mask_loss,
                r.learning_rate);
    if (val) std::printf(" val_psnr %.3f", r.val_psnr);
    if (!a.deterministic) std::printf(" t %.1fs", r.wall_seconds);
    std::printf("\n");
    std::fflush(stdout);
  };
  const TrainResult result = train(cfg, data, out, progress);
  if (a.deterministic) rewrite_metrics_without_time(out / "metrics.csv", result.log);
  m.outputs = {"checkpoint.narf", "metrics.csv"};
  if (cfg.checkpoint_every > 0) {
    for (std::size_t it = cfg.checkpoint_every; it <= result.checkpoint.iteration; it += cfg.checkpoint_every) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_%06zu.narf", it);
      m.outputs.push_back(name);
    }
  }
  m.write(out);
  if (result.diverged) {
    return report_error("divergence", result.message + "; last finite state saved", kExitFailure);
  }
  std::cout << "trained " << result.checkpoint.iteration << " iterations, checkpoint " << (out / "checkpoint.narf").string()
            << "\n";
  return 0;
}

// ---- render ---------------------------------------------------------------------------

struct RenderArgs {
  std::string checkpoint;
  std::string out;
  std::string pose;
  std::string data;
  std::string split = "novel_pose_same_view";
  std::size_t index = 0;
  std::size_t samples = 64;
  std::size_t fine_samples = 0;
  std::uint64_t seed = 0;
  bool segmentation = false;
  std::string sweep;
  std::size_t frames = 8;
  std::string pose_to;
  double bone_scale = 1.3;
  double view_range = 6.283185307179586;
};

struct RenderJob {
  PoseConfig pose;
  Camera camera;
  std::size_t shape_instance = 0;
  std::size_t appearance_instance = 0;
};

Camera default_camera() {
  const SceneSpec s = SceneSpec::desk_default();
  const double el = 0.3;
  const Vec3 eye = 2.9 * Vec3(std::cos(el), std::sin(el), 0.0);
  return Camera::look_at(eye, Vec3::Zero(), Vec3::UnitY(), s.focal, s.width, s.height);
}

// Either a bare pose object or {"pose": ..., "camera": ..., "instance": k}.
RenderJob job_from_file(const fs::path& path) {
  const json j = read_json_file(path);
  RenderJob job;
  job.camera = default_camera();
  try {
    if (j.contains("pose")) {
      job.pose = pose_from_json(j.at("pose"));
      if (j.contains("camera")) job.camera = Camera::from_json(j.at("camera"));
      job.shape_instance = job.appearance_instance = j.value("instance", std::size_t{0});
    } else {
      job.pose = pose_from_json(j);
    }
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return job;
}

RenderJob job_from_dataset(const RenderArgs& a) {
  const Dataset data = load_dataset(a.data, {a.split});
  const auto& records = data.split(a.split);
  if (a.index >= records.size()) {
    throw ConfigError("index: " + std::to_string(a.index) + " out of range for split '" + a.split + "' (" +
                      std::to_string(records.size()) + " images)");
  }
  const DatasetRecord& r = records[a.index];
  return {r.pose, r.camera, r.instance, r.instance};
}

PoseConfig rest_like(const PoseConfig& p) {
  PoseConfig q = p;
  for (Vec3& t : q.theta) t.setZero();
  return q;
}

PoseConfig lerp_pose(const PoseConfig& a, const PoseConfig& b, double s) {
  if (a.theta.size() != b.theta.size()) throw ConfigError("pose_to: bone count differs from the start pose");
  PoseConfig p = a;
  for (std::size_t i = 0; i < a.theta.size(); ++i) {
    p.theta[i] = (1.0 - s) * a.theta[i] + s * b.theta[i];
    p.zeta[i] = (1.0 - s) * a.zeta[i] + s * b.zeta[i];
  }
  const Vec3 rel = axis_angle_from_rotation(a.root.rotation.transpose() * b.root.rotation);
  p.root.rotation = a.root.rotation * rotation_from_axis_angle(s * rel);
  p.root.translation = (1.0 - s) * a.root.translation + s * b.root.translation;
  return p;
}

// Foreground depth mapped linearly from [near, far] to [1, 0]; background 0.
// The range is recorded in render.json.
Image8 depth_image(const RenderedImage& img) {
  Tensor t(img.depth.rows(), 1);
  const double span = std::max(img.depth_far - img.depth_near, 1e-9);
  for (std::size_t i = 0; i < t.rows(); ++i) {
    if (img.mask[i] > 0.5) t[i] = (img.depth_far - img.depth[i]) / span;
  }
  return image_from_tensor(t, img.width, img.height);
}

Image8 segmentation_image(const RenderedImage& img) {
  static const double palette[][3] = {{0.90, 0.10, 0.10}, {0.10, 0.75, 0.20}, {0.15, 0.30, 0.95}, {0.95, 0.80, 0.10},
                                      {0.80, 0.20, 0.85}, {0.10, 0.80, 0.85}, {0.95, 0.50, 0.10}, {0.55, 0.35, 0.20}};
  const auto owner = argmax_rows(img.segmentation);
  Tensor t(owner.size(), 3);
  for (std::size_t i = 0; i < owner.size(); ++i) {
    if (img.mask[i] <= 0.5) continue;
    const double* c = palette[owner[i] % std::size(palette)];
    for (int k = 0; k < 3; ++k) t(i, k) = c[k];
  }
  return image_from_tensor(t, img.width, img.height);
}

json write_render(const RenderedImage& img, const fs::path& dir, const std::string& prefix,
                  std::vector<std::string>& outputs) {
  auto put = [&](const std::string& name, const Image8& im) {
    write_png(dir / (prefix + name), im);
    outputs.push_back(prefix + name);
  };
  put("rgb.png", image_from_tensor(img.rgb, img.width, img.height));
  put("depth.png", depth_image(img));
  put("mask.png", image_from_tensor(img.mask, img.width, img.height));
  if (!img.segmentation.empty()) put("seg.png", segmentation_image(img));
  return {{"prefix", prefix}, {"depth_near", img.depth_near}, {"depth_far", img.depth_far}};
}

int run_render(const RenderArgs& a) {
  Manifest m;
  m.command = "render";
  m.seed = a.seed;
  if (a.pose.empty() == a.data.empty()) throw ConfigError("pose: give exactly one of --pose or --data");
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const FieldModel& model = *ckpt.model;
  RenderJob base = a.pose.empty() ? job_from_dataset(a) : job_from_file(a.pose);
  base.pose.validate(model.descriptor().tree);

  RenderConfig rc;
  rc.samples = a.samples;
  rc.fine_samples = a.fine_samples;
  rc.seed = a.seed;
  rc.segmentation = a.segmentation;
  try {
    rc.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }

  std::vector<RenderJob> jobs;
  if (a.sweep.empty()) {
    jobs.push_back(base);
  } else {
    if (a.frames < 2) throw ConfigError("frames: a sweep needs at least 2 frames");
    std::optional<PoseConfig> target;
    if (a.sweep == "pose") target = a.pose_to.empty() ? rest_like(base.pose) : job_from_file(a.pose_to).pose;
    const std::size_t count = a.sweep == "appearance" ? model.descriptor().latent_instances : a.frames;
    if (a.sweep == "appearance" && !model.descriptor().has_latent()) {
      throw UnsupportedError("appearance sweep requires a latent-mode checkpoint");
    }
    for (std::size_t k = 0; k < count; ++k) {
      const double s = static_cast<double>(k) / static_cast<double>(count - 1);
      RenderJob job = base;
      if (a.sweep == "view") {
        const Mat3 turn = rotation_from_axis_angle(Vec3(0.0, s * a.view_range, 0.0));
        job.camera.camera_to_world.rotation = turn * base.camera.camera_to_world.rotation;
        job.camera.camera_to_world.translation = turn * base.camera.camera_to_world.translation;
      } else if (a.sweep == "pose") {
        job.pose = lerp_pose(base.pose, *target, s);
      } else if (a.sweep == "bone") {
        for (double& z : job.pose.zeta) z *= 1.0 + s * (a.bone_scale - 1.0);
      } else if (a.sweep == "appearance") {
        job.appearance_instance = k;
      }
      jobs.push_back(job);
    }
  }

  const fs::path out(a.out);
  fs::create_directories(out);
  json frames = json::array();
  for (std::size_t k = 0; k < jobs.size(); ++k) {
    const RenderJob& job = jobs[k];
    const RenderedImage img =
        render_image(model, job.camera, job.pose, rc, job.shape_instance, job.appearance_instance);
    char prefix[32] = "";
    if (jobs.size() > 1 || !a.sweep.empty()) std::snprintf(prefix, sizeof prefix, "frame_%03zu_", k);
    frames.push_back(write_render(img, out, prefix, m.outputs));
  }
  write_text(out / "render.json",
             json{{"depth_encoding", "gray = (far - depth) / (far - near) where mask > 0.5, else 0"}, {"frames", frames}}
                     .dump(2) +
                 "\n");
  m.outputs.push_back("render.json");
  m.config = {{"checkpoint", a.checkpoint},
              {"pose", a.pose},
              {"data", a.data},
              {"split", a.split},
              {"index", a.index},
              {"samples", a.samples},
              {"fine_samples", a.fine_samples},
              {"segmentation", a.segmentation},
              {"sweep", a.sweep},
              {"frames", jobs.size()},
              {"pose_to", a.pose_to},
              {"bone_scale", a.bone_scale},
              {"view_range", a.view_range},
              {"first_pose", pose_to_json(base.pose)},
              {"camera", base.camera.to_json()}};
  m.write(out);
  std::cout << "wrote " << jobs.size() << " frame(s) to " << out.string() << "\n";
  return 0;
}

// ---- eval -----------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::vector<std::string> splits;
  std::size_t max_images = 0;
  std::size_t samples = 64;
  std::size_t fine_samples = 0;
};

int run_eval(EvalArgs a) {
  Manifest m;
  m.command = "eval";
  if (a.splits.empty()) a.splits = test_split_names();
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const Dataset data = load_dataset(a.data);
  EvaluateConfig ec;
  ec.render.samples = a.samples;
  ec.render.fine_samples = a.fine_samples;
  ec.max_images_per_split = a.max_images;
  const EvalReport report = evaluate(ckpt, data, a.splits, ec);
  std::printf("%-24s %7s %7s %12s\n", "split", "psnr", "ssim", "mask_l2");
  for (const SplitScore& s : report.splits) {
    std::printf("%-24s %7.3f %7.4f %12.1f\n", s.split.c_str(), s.psnr, s.ssim, s.mask_l2);
  }
  if (!a.out.empty()) {
    const fs::path out(a.out);
    fs::create_directories(out);
    write_text(out / "report.json", report.to_json().dump(2) + "\n");
    write_text(out / "report.csv", report.to_csv());
    m.config = {{"checkpoint", a.checkpoint}, {"data", a.data},       {"splits", a.splits},
                {"max_images", a.max_images}, {"samples", a.samples}, {"fine_samples", a.fine_samples}};
    m.outputs = {"report.json", "report.csv"};
    m.write(out);
  }
  return 0;
}

// ---- gradcheck ------------------------------------------------------------------------

struct GradCheckArgs {
  std::string arch = "narf_d";
  std::uint64_t seed = 1;
  std::size_t seeds = 1;
  double tolerance = 1e-4;
  RenderGradCheckConfig cfg;
};

int run_gradcheck(const GradCheckArgs& a) {
  const auto& variants = gradcheck_variants();
  std::vector<std::string> selected;
  if (a.arch == "all") {
    selected = variants;
  } else if (std::find(variants.begin(), variants.end(), a.arch) != variants.end()) {
    selected = {a.arch};
  } else {
    throw ConfigError("arch: unknown variant '" + a.arch + "'");
  }
  bool ok = true;
  for (const std::string& v : selected) {
    double worst = 0.0;
    std::string where;
    std::size_t checked = 0;
    std::size_t skipped = 0;
    for (std::size_t k = 0; k < a.seeds; ++k) {
      const GradCheckResult r = render_gradcheck(v, a.seed + k, a.cfg);
      checked += r.checked;
      skipped += r.skipped_kinks;
      if (r.max_relative_error >= worst) {
        worst = r.max_relative_error;
        where = r.worst_parameter + "[" + std::to_string(r.worst_index) + "]";
      }
    }
    const bool pass = worst < a.tolerance && checked > 0;
    ok = ok && pass;
    std::printf("arch=%s seeds=%zu checked=%zu skipped_kinks=%zu max_relative_error=%.3e worst=%s %s\n", v.c_str(),
                a.seeds, checked, skipped, worst, where.c_str(), pass ? "PASS" : "FAIL");
  }
  if (!ok) return report_error("gradcheck", "relative error above " + std::to_string(a.tolerance), kExitFailure);
  return 0;
}

// ---- cost -----------------------------------------------------------------------------

struct CostArgs {
  std::vector<std::string> archs;
  std::size_t samples = 64;
  std::string preset = "paper";
  std::string out;
};

int run_cost(CostArgs a) {
  Manifest m;
  m.command = "cost";
  if (a.archs.empty()) a.archs = {"pnerf", "rtnerf", "narf_p", "narf_h", "narf_d", "dnarf"};
  if (a.samples < 1) throw ConfigError("samples: must be >= 1");
  std::vector<CostReport> reports;
  for (const std::string& name : a.archs) {
    Architecture arch;
    try {
      arch = parse_architecture(name);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("arch: ") + e.what());
    }
    FieldDescriptor d;
    if (a.preset == "paper") {
      d = paper_scale_descriptor(arch);
    } else {
      TrainConfig tc;
      tc.arch = arch;
      d = tc.descriptor(SceneSpec::desk_default());
    }
    reports.push_back(cost_report(d, a.samples));
  }
  std::string csv = CostReport::csv_header() + "\n";
  json j = json::array();
  for (const CostReport& r : reports) {
    csv += r.csv_row() + "\n";
    j.push_back(r.to_json());
  }
  std::cout << csv;
  if (!a.out.empty()) {
    const fs::path out(a.out);
    fs::create_directories(out);
    write_text(out / "cost.csv", csv);
    write_text(out / "cost.json", json{{"schema", kCostSchema}, {"preset", a.preset}, {"reports", j}}.dump(2) + "\n");
    m.config = {{"archs", a.archs}, {"samples", a.samples}, {"preset", a.preset}};
    m.outputs = {"cost.csv", "cost.json"};
    m.write(out);
  }
  return 0;
}

}  // namespace
}  // namespace narf

int main(int argc, char** argv) {
  using namespace narf;
  CLI::App app{"Articulated neural radiance fields: data, training, rendering and evaluation"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML config file; [gen-data], [train], ... sections hold subcommand options");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_version_flag("--version", std::string(NARF_GIT_DESCRIBE));
  bool deterministic = false;
  app.add_flag("--deterministic", deterministic,
               "Make every output except manifest.json bit-reproducible (drops wall-clock columns)");

  const std::map<std::string, std::string> archs{{"pnerf", "pnerf"},   {"rtnerf", "rtnerf"}, {"narf_p", "narf_p"},
                                                 {"narf_h", "narf_h"}, {"narf_d", "narf_d"}, {"dnarf", "dnarf"}};

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Render a synthetic articulated dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();
  gen_cmd->add_option("--scene", gen.scene, "desk (single instance) or multi (varied instances)")
      ->check(CLI::IsMember({"desk", "multi"}))
      ->capture_default_str();
  gen_cmd->add_option("--instances", gen.instances, "Instance count for the multi scene")->capture_default_str();
  gen_cmd->add_option("--train-poses", gen.counts.train_poses)->capture_default_str();
  gen_cmd->add_option("--views-per-pose", gen.counts.views_per_pose)->capture_default_str();
  gen_cmd->add_option("--test-per-split", gen.counts.test_per_split)->capture_default_str();
  gen_cmd->add_option("--reference-bins", gen.counts.reference_bins, "Ground-truth integration bins per ray")
      ->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a radiance field on a dataset");
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required();
  train_cmd->add_option("--out", tr.out, "Run directory")->required();
  train_cmd->add_option("--train-config", tr.config_json, "JSON training config (overrides model/optimizer flags)");
  train_cmd->add_option("--arch", tr.arch)->check(CLI::IsMember(archs))->capture_default_str();
  train_cmd->add_option("--depth", tr.cfg.depth)->capture_default_str();
  train_cmd->add_option("--width", tr.cfg.width)->capture_default_str();
  train_cmd->add_option("--color-width", tr.cfg.color_width)->capture_default_str();
  train_cmd->add_option("--skip-layer", tr.cfg.skip_layer)->capture_default_str();
  train_cmd->add_option("--density-scale", tr.cfg.density_scale)->capture_default_str();
  train_cmd->add_option("--equalized-lr", tr.cfg.equalized_lr)->capture_default_str();
  train_cmd->add_option("--temperature", tr.cfg.temperature, "NARF_P softmax temperature")->capture_default_str();
  train_cmd->add_option("--selector", tr.selector)->check(CLI::IsMember({"softmax", "sigmoid"}))->capture_default_str();
  train_cmd->add_option("--rt-color-twist", tr.cfg.rt_color_twist)->capture_default_str();
  train_cmd->add_option("--rt-global", tr.cfg.rt_global)->capture_default_str();
  train_cmd->add_option("--latent", tr.cfg.latent, "Per-instance shape/appearance latent table")->capture_default_str();
  train_cmd->add_option("--latent-shape-dim", tr.cfg.latent_shape_dim)->capture_default_str();
  train_cmd->add_option("--latent-appearance-dim", tr.cfg.latent_appearance_dim)->capture_default_str();
  train_cmd->add_option("--batch-images", tr.cfg.batch_images)->capture_default_str();
  train_cmd->add_option("--rays-per-image", tr.cfg.rays_per_image)->capture_default_str();
  train_cmd->add_option("--samples", tr.cfg.samples)->capture_default_str();
  train_cmd->add_option("--fine-samples", tr.cfg.fine_samples)->capture_default_str();
  train_cmd->add_option("--learning-rate", tr.cfg.learning_rate)->capture_default_str();
  train_cmd->add_option("--decay", tr.cfg.decay)->capture_default_str();
  train_cmd->add_option("--iterations", tr.cfg.iterations)->capture_default_str();
  train_cmd->add_option("--mask-weight", tr.cfg.mask_weight, "Weight of the mask loss (0 disables it)")
      ->capture_default_str();
  train_cmd->add_option("--density-noise", tr.cfg.density_noise,
                        "Std of the noise added to the raw density while training (0 disables it)")
      ->capture_default_str();
  train_cmd->add_option("--seed", tr.cfg.seed)->capture_default_str();
  train_cmd->add_option("--val-every", tr.cfg.val_every)->capture_default_str();
  train_cmd->add_option("--val-images", tr.cfg.val_images)->capture_default_str();
  train_cmd->add_option("--checkpoint-every", tr.cfg.checkpoint_every)->capture_default_str();
  train_cmd->add_option("--chunk-rays", tr.cfg.chunk_rays)->capture_default_str();
  train_cmd->add_option("--log-every", tr.log_every)->capture_default_str();
  train_cmd->add_flag("--quiet", tr.quiet);

  RenderArgs rd;
  auto* render_cmd = app.add_subcommand("render", "Render RGB, depth, mask and segmentation images");
  render_cmd->add_option("--checkpoint", rd.checkpoint)->required();
  render_cmd->add_option("--out", rd.out)->required();
  render_cmd->add_option("--pose", rd.pose, "JSON pose file (optionally with camera and instance)");
  render_cmd->add_option("--data", rd.data, "Take pose and camera from a dataset image instead");
  render_cmd->add_option("--split", rd.split)->capture_default_str();
  render_cmd->add_option("--index", rd.index)->capture_default_str();
  render_cmd->add_option("--samples", rd.samples)->capture_default_str();
  render_cmd->add_option("--fine-samples", rd.fine_samples)->capture_default_str();
  render_cmd->add_option("--seed", rd.seed)->capture_default_str();
  render_cmd->add_flag("--segmentation", rd.segmentation, "Also write a part segmentation image");
  render_cmd->add_option("--sweep", rd.sweep, "Frame strip: view, pose, bone or appearance")
      ->check(CLI::IsMember({"view", "pose", "bone", "appearance"}));
  render_cmd->add_option("--frames", rd.frames)->capture_default_str();
  render_cmd->add_option("--pose-to", rd.pose_to, "End pose of a pose sweep (default: zero joint rotations)");
  render_cmd->add_option("--bone-scale", rd.bone_scale, "Final bone-length factor of a bone sweep")
      ->capture_default_str();
  render_cmd->add_option("--view-range", rd.view_range, "Total camera turn of a view sweep, radians")
      ->capture_default_str();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on held-out splits");
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
  eval_cmd->add_option("--data", ev.data)->required();
  eval_cmd->add_option("--out", ev.out, "Directory for report.json / report.csv");
  eval_cmd->add_option("--splits", ev.splits, "Splits to evaluate (default: all four held-out splits)");
  eval_cmd->add_option("--max-images", ev.max_images, "Images per split, 0 for all")->capture_default_str();
  eval_cmd->add_option("--samples", ev.samples)->capture_default_str();
  eval_cmd->add_option("--fine-samples", ev.fine_samples)->capture_default_str();

  GradCheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Compare render+loss gradients with finite differences");
  gc_cmd->add_option("--arch", gc.arch, "Variant name or 'all'")->capture_default_str();
  gc_cmd->add_option("--seed", gc.seed)->capture_default_str();
  gc_cmd->add_option("--seeds", gc.seeds, "Number of consecutive seeds")->capture_default_str();
  gc_cmd->add_option("--tolerance", gc.tolerance)->capture_default_str();
  gc_cmd->add_option("--rays", gc.cfg.rays)->capture_default_str();
  gc_cmd->add_option("--samples", gc.cfg.samples)->capture_default_str();

  CostArgs co;
  auto* cost_cmd = app.add_subcommand("cost", "Per-ray parameter, FLOP and memory counts");
  cost_cmd->add_option("--arch", co.archs, "Architectures (default: all)")->check(CLI::IsMember(archs));
  cost_cmd->add_option("--samples", co.samples)->capture_default_str();
  cost_cmd->add_option("--preset", co.preset, "paper (23 parts, 8x256) or desk")
      ->check(CLI::IsMember({"paper", "desk"}))
      ->capture_default_str();
  cost_cmd->add_option("--out", co.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ConversionError& e) {
    return report_error("config", e.what(), kExitConfig);
  } catch (const CLI::ValidationError& e) {
    return report_error("config", e.what(), kExitConfig);
  } catch (const CLI::ConfigError& e) {
    return report_error("config", e.what(), kExitConfig);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << std::flush;
    return report_error("usage", e.what(), kExitUsage);
  }

  tr.deterministic = deterministic;
  try {
    if (gen_cmd->parsed()) return run_gen_data(gen);
    if (train_cmd->parsed()) return run_train(tr);
    if (render_cmd->parsed()) return run_render(rd);
    if (eval_cmd->parsed()) return run_eval(ev);
    if (gc_cmd->parsed()) return run_gradcheck(gc);
    if (cost_cmd->parsed()) return run_cost(co);
  } catch (const ConfigError& e) {
    return report_error("config", e.what(), kExitConfig);
  } catch (const UnsupportedError& e) {
    return report_error("unsupported", e.what(), kExitFailure);
  } catch (const ShapeError& e) {
    return report_error("shape", e.what(), kExitFailure);
  } catch (const std::exception& e) {
    return report_error("runtime", e.what(), kExitFailure);
  }
  return kExitUsage;
}
