#include "narf/training.hpp"

#include "narf/error.hpp"
#include "narf/metrics.hpp"
#include "narf/parallel.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace narf {

namespace {


[[noreturn]] void bad_field(const std::string& field, const std::string& why) {
  throw Error("TrainConfig: " + field + " " + why);
}

std::string format_row(const TrainLogRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.6g,%.9g,%.3f", r.iteration, r.loss, r.color_loss, r.mask_loss,
                r.val_psnr, r.learning_rate, r.wall_seconds);
  return buf;
}

// Shared state for rendering rays drawn from one record list.
struct RecordContext {
  std::vector<PartFrames> frames;

  RecordContext(const FieldDescriptor& d, const std::vector<DatasetRecord>& records) {
    frames.reserve(records.size());
    for (const auto& r : records) frames.push_back(PartFrames::compute(d.tree, r.pose, d.part_order, d.encoding));
  }
};

std::vector<RayQuery> make_queries(const std::vector<DatasetRecord>& records, const RecordContext& ctx,
                                   const RayBatch& batch) {
  std::vector<RayQuery> q(batch.pixels.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    const DatasetRecord& r = records[batch.record[i]];
    q[i] = {camera_ray(r.camera, batch.pixels[i]), &ctx.frames[batch.record[i]], r.instance, r.instance};
  }
  return q;
}

Tensor rows_of(const Tensor& t, std::size_t begin, std::size_t end) {
  Tensor out(end - begin, t.cols());
  std::copy(t.row_ptr(begin), t.row_ptr(end), out.data());
  return out;
}

struct ChunkResult {
  ad::GradientBuffer grads;
  double loss = 0.0;
  double color = 0.0;
  double mask = 0.0;
};

// Renders the batch in fixed-size chunks, each on its own tape; per-chunk
// results are reduced in chunk order so the totals do not depend on the
// worker count.
std::vector<ChunkResult> run_chunks(const FieldModel& model, const TrainConfig& cfg,
                                    const std::vector<RayQuery>& queries, const RayBatch& batch,
                                    std::uint64_t stream_seed, bool gradients) {
  RenderConfig rc;
  rc.samples = cfg.samples;
  rc.fine_samples = cfg.fine_samples;
  rc.jitter = true;
  const std::size_t n = queries.size();
  const std::size_t chunks = (n + cfg.chunk_rays - 1) / cfg.chunk_rays;
  std::vector<ChunkResult> out(chunks);
  parallel_for(chunks, [&](std::size_t k) {
    const std::size_t begin = k * cfg.chunk_rays;
    const std::size_t end = std::min(n, begin + cfg.chunk_rays);
    ad::Tape tape(ad::Tape::Options{.record_gradients = gradients});
    Rng rng(derive_seed(stream_seed, k));
    // Noise only perturbs gradient steps; a separate stream leaves the
    // sample jitter unchanged.
    Rng noise_rng(derive_seed(stream_seed, k ^ 0x6e6f697365ULL));
    EvalOptions opt;
    if (gradients) {
      opt.density_noise = cfg.density_noise;
      opt.noise_rng = &noise_rng;
    }
    const FieldBinding binding = FieldBinding::of(model, opt);
    const RenderedRays rr =
        render_rays(tape, binding, std::span<const RayQuery>(queries).subspan(begin, end - begin), rc, rng);
    const LossTerms loss =
        compute_loss(rr.color, rr.mask, rows_of(batch.rgb, begin, end), rows_of(batch.mask, begin, end), cfg.mask_weight);
    out[k].loss = loss.total.value()[0];
    out[k].color = loss.color;
    out[k].mask = loss.mask;
    if (gradients) tape.backward(loss.total, &out[k].grads);
  });
  return out;
}

double validation_psnr(const FieldModel& model, const TrainConfig& cfg, const std::vector<DatasetRecord>& probe) {
  RenderConfig rc;
  rc.samples = cfg.samples;
  rc.fine_samples = cfg.fine_samples;
  double total = 0.0;
  for (const DatasetRecord& r : probe) {
    const RenderedImage img = render_image(model, r.camera, r.pose, rc, r.instance, r.instance);
    total += psnr(img.rgb, r.rgb);
  }
  return probe.empty() ? std::numeric_limits<double>::quiet_NaN() : total / static_cast<double>(probe.size());
}

}  // namespace

// ---- configuration -----------------------------------------------------------------

void TrainConfig::validate() const {
  if (depth < 1) bad_field("depth", "must be >= 1");
  if (width < 1) bad_field("width", "must be >= 1");
  if (color_width < 1) bad_field("color_width", "must be >= 1");
  if (skip_layer >= depth) bad_field("skip_layer", "must be < depth");
  if (!(density_scale > 0.0)) bad_field("density_scale", "must be > 0");
  if (arch == Architecture::NarfP && !(temperature > 0.0)) bad_field("temperature", "must be > 0");
  if (latent && latent_shape_dim + latent_appearance_dim == 0) {
    bad_field("latent_shape_dim", "and latent_appearance_dim cannot both be 0 in latent mode");
  }
  if (batch_images < 1) bad_field("batch_images", "must be >= 1");
  if (rays_per_image < 1) bad_field("rays_per_image", "must be >= 1");
  if (samples < 1) bad_field("samples", "must be >= 1");
  if (!(learning_rate > 0.0)) bad_field("learning_rate", "must be > 0");
  if (!(decay > 0.0 && decay <= 1.0)) bad_field("decay", "must lie in (0, 1]");
  if (!(mask_weight >= 0.0)) bad_field("mask_weight", "must be >= 0");
  if (!(density_noise >= 0.0)) bad_field("density_noise", "must be >= 0");
  if (chunk_rays < 1) bad_field("chunk_rays", "must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"arch", to_string(arch)},
          {"depth", depth},
          {"width", width},
          {"color_width", color_width},
          {"skip_layer", skip_layer},
          {"density_scale", density_scale},
          {"equalized_lr", equalized_lr},
          {"temperature", temperature},
          {"selector", to_string(selector)},
          {"rt_color_twist", rt_color_twist},
          {"rt_global", rt_global},
          {"latent", latent},
          {"latent_shape_dim", latent_shape_dim},
          {"latent_appearance_dim", latent_appearance_dim},
          {"batch_images", batch_images},
          {"rays_per_image", rays_per_image},
          {"samples", samples},
          {"fine_samples", fine_samples},
          {"learning_rate", learning_rate},
          {"decay", decay},
          {"iterations", iterations},
          {"mask_weight", mask_weight},
          {"density_noise", density_noise},
          {"seed", seed},
          {"val_every", val_every},
          {"val_images", val_images},
          {"checkpoint_every", checkpoint_every},
          {"chunk_rays", chunk_rays}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  const nlohmann::json known = c.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw Error("TrainConfig: " + key + " is not a known field");
  }
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const nlohmann::json::exception&) {
      bad_field(key, "has the wrong type");
    }
  };
  if (j.contains("arch")) {
    try {
      c.arch = parse_architecture(j.at("arch").get<std::string>());
    } catch (const std::exception& e) {
      bad_field("arch", e.what());
    }
  }
  if (j.contains("selector")) {
    try {
      c.selector = parse_selector_activation(j.at("selector").get<std::string>());
    } catch (const std::exception& e) {
      bad_field("selector", e.what());
    }
  }
  get("depth", c.depth);
  get("width", c.width);
  get("color_width", c.color_width);
  get("skip_layer", c.skip_layer);
  get("density_scale", c.density_scale);
  get("equalized_lr", c.equalized_lr);
  get("temperature", c.temperature);
  get("rt_color_twist", c.rt_color_twist);
  get("rt_global", c.rt_global);
  get("latent", c.latent);
  get("latent_shape_dim", c.latent_shape_dim);
  get("latent_appearance_dim", c.latent_appearance_dim);
  get("batch_images", c.batch_images);
  get("rays_per_image", c.rays_per_image);
  get("samples", c.samples);
  get("fine_samples", c.fine_samples);
  get("learning_rate", c.learning_rate);
  get("decay", c.decay);
  get("iterations", c.iterations);
  get("mask_weight", c.mask_weight);
  get("density_noise", c.density_noise);
  get("seed", c.seed);
  get("val_every", c.val_every);
  get("val_images", c.val_images);
  get("checkpoint_every", c.checkpoint_every);
  get("chunk_rays", c.chunk_rays);
  c.validate();
  return c;
}

std::uint64_t TrainConfig::hash() const {
  const std::string s = to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

FieldDescriptor TrainConfig::descriptor(const SceneSpec& scene) const {
  FieldDescriptor d = FieldDescriptor::make(arch, scene.tree, scene.instances.at(0).zeta);
  d.depth = depth;
  d.width = width;
  d.color_width = color_width;
  d.skip_layer = skip_layer;
  d.density_scale = density_scale;
  d.equalized_lr = equalized_lr;
  d.temperature = temperature;
  d.selector_activation = selector;
  d.rt_color_twist = rt_color_twist;
  d.rt_global = rt_global;
  if (latent) {
    d.latent_instances = scene.instances.size();
    d.latent_shape_dim = latent_shape_dim;
    d.latent_appearance_dim = latent_appearance_dim;
  }
  d.validate();
  return d;
}

// ---- loss and batches ----------------------------------------------------------------

LossTerms compute_loss(ad::Var color, ad::Var mask, const Tensor& color_gt, const Tensor& mask_gt,
                       double mask_weight) {
  if (!color.value().same_shape(color_gt) || !mask.value().same_shape(mask_gt) || color.rows() != mask.rows()) {
    throw ShapeError("compute_loss: rendered " + color.value().shape_string() + "/" + mask.value().shape_string() +
                     " vs ground truth " + color_gt.shape_string() + "/" + mask_gt.shape_string());
  }
  if (!(mask_weight >= 0.0)) throw Error("compute_loss: mask weight must be >= 0");
  ad::Tape& tape = *color.tape();
  const ad::Var color_term = ad::sum(ad::square(ad::sub(tape.constant(color_gt), color)));
  const ad::Var mask_term = ad::sum(ad::square(ad::sub(tape.constant(mask_gt), mask)));
  LossTerms out;
  out.color = color_term.value()[0];
  out.mask = mask_term.value()[0];
  out.total = ad::add(color_term, ad::scale(mask_term, mask_weight));
  return out;
}

RayBatch sample_ray_batch(const std::vector<DatasetRecord>& records, const TrainConfig& cfg, Rng& rng) {
  if (records.empty()) throw Error("sample_ray_batch: dataset split is empty");
  // Partial Fisher-Yates shuffle picks distinct images.
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t images = std::min(cfg.batch_images, records.size());
  for (std::size_t i = 0; i < images; ++i) {
    std::swap(order[i], order[i + uniform_index(rng, order.size() - i)]);
  }
  RayBatch b;
  const std::size_t rays = images * cfg.rays_per_image;
  b.rgb = Tensor(rays, 3);
  b.mask = Tensor(rays, 1);
  std::size_t row = 0;
  for (std::size_t i = 0; i < images; ++i) {
    const DatasetRecord& r = records[order[i]];
    const std::size_t pixels = static_cast<std::size_t>(r.camera.width) * static_cast<std::size_t>(r.camera.height);
    for (std::size_t k = 0; k < cfg.rays_per_image; ++k, ++row) {
      const std::size_t p = uniform_index(rng, pixels);
      b.record.push_back(order[i]);
      b.pixels.push_back({static_cast<int>(p % r.camera.width), static_cast<int>(p / r.camera.width)});
      std::copy_n(r.rgb.row_ptr(p), 3, b.rgb.row_ptr(row));
      b.mask[row] = r.mask[p];
    }
  }
  return b;
}

double probe_loss(const FieldModel& model, const TrainConfig& cfg, const std::vector<DatasetRecord>& records,
                  const RayBatch& batch) {
  const RecordContext ctx(model.descriptor(), records);
  const auto queries = make_queries(records, ctx, batch);
  double total = 0.0;
  for (const ChunkResult& c : run_chunks(model, cfg, queries, batch, derive_seed(cfg.seed, 0x9b0be), false)) {
    total += c.loss;
  }
  return total;
}

// ---- training loop ----------------------------------------------------------------

TrainResult train(const TrainConfig& cfg, const Dataset& data, const std::filesystem::path& out_dir,
                  const ProgressFn& progress) {
  cfg.validate();
  const std::vector<DatasetRecord>& records = data.split(kTrainSplit);
  if (records.empty()) throw Error("train: the train split is empty");
  if (cfg.latent && data.scene.instances.empty()) throw Error("train: latent mode requires instance ids");
  for (const auto& r : records) {
    if (r.instance >= data.scene.instances.size()) throw Error("train: record refers to an unknown instance");
  }

  const FieldDescriptor desc = cfg.descriptor(data.scene);
  auto model = std::make_shared<FieldModel>(desc, derive_seed(cfg.seed, 0));
  Adam adam(model->parameters(), AdamConfig{.learning_rate = cfg.learning_rate, .decay = cfg.decay});
  const RecordContext ctx(desc, records);

  std::vector<DatasetRecord> probe;
  {
    const auto& src = data.has_split(test_split_names().front()) ? data.split(test_split_names().front()) : records;
    for (std::size_t i = 0; i < std::min(cfg.val_images, src.size()); ++i) probe.push_back(src[i]);
  }

  std::ofstream csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    csv.open(out_dir / "metrics.csv");
    if (!csv) throw Error("train: cannot write " + (out_dir / "metrics.csv").string());
    csv << kMetricsHeader << '\n';
  }

  TrainResult result;
  auto snapshot = [&](std::uint64_t iteration) {
    Checkpoint c;
    // Copy so that later steps do not alter a returned snapshot.
    c.model = std::make_shared<FieldModel>(*model);
    c.optimizer = adam.state();
    c.iteration = iteration;
    c.config_hash = cfg.hash();
    c.train_config = cfg.to_json();
    return c;
  };

  Rng batch_rng(derive_seed(cfg.seed, 1));
  const auto start = std::chrono::steady_clock::now();
  std::size_t it = 0;
  for (; it < cfg.iterations; ++it) {
    const RayBatch batch = sample_ray_batch(records, cfg, batch_rng);
    const auto queries = make_queries(records, ctx, batch);
    const std::vector<ChunkResult> chunks =
        run_chunks(*model, cfg, queries, batch, derive_seed(cfg.seed, 2 + it), true);

    TrainLogRow row;
    row.iteration = it + 1;
    row.learning_rate = adam.learning_rate();
    model->parameters().zero_grad();
    for (const ChunkResult& c : chunks) {
      row.loss += c.loss;
      row.color_loss += c.color;
      row.mask_loss += c.mask;
      ad::accumulate(model->parameters(), c.grads);
    }
    if (!std::isfinite(row.loss)) {
      result.diverged = true;
      result.message = "non-finite loss at iteration " + std::to_string(it + 1);
      break;
    }
    try {
      adam.step(model->parameters());
    } catch (const DivergenceError& e) {
      result.diverged = true;
      result.message = std::string(e.what()) + " at iteration " + std::to_string(it + 1);
      break;
    }
    row.val_psnr = std::numeric_limits<double>::quiet_NaN();
    if (cfg.val_every > 0 && (it + 1) % cfg.val_every == 0 && !probe.empty()) {
      row.val_psnr = validation_psnr(*model, cfg, probe);
    }
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(row);
    if (csv.is_open()) csv << format_row(row) << '\n' << std::flush;
    if (progress) progress(row);
    if (!out_dir.empty() && cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_%06zu.narf", it + 1);
      save_checkpoint(out_dir / name, snapshot(it + 1));
    }
  }
  result.checkpoint = snapshot(it);
  if (!out_dir.empty()) save_checkpoint(out_dir / "checkpoint.narf", result.checkpoint);
  return result;
}

// ---- gradient check ------------------------------------------------------------------

const std::vector<std::string>& gradcheck_variants() {
  static const std::vector<std::string> names{"pnerf",  "rtnerf", "rtnerf_no_twist", "rpnerf",       "narf_p",
                                              "narf_h", "narf_d", "dnarf",           "narf_d_latent"};
  return names;
}

GradCheckResult render_gradcheck(const std::string& variant, std::uint64_t seed, const RenderGradCheckConfig& cfg) {
  Architecture arch;
  if (variant == "rtnerf_no_twist" || variant == "rpnerf") {
    arch = Architecture::RTNeRF;
  } else if (variant == "narf_d_latent") {
    arch = Architecture::NarfD;
  } else {
    arch = parse_architecture(variant);
  }
  Rng rng(derive_seed(seed, 0x6c));

  // Random tree with 2-4 bones, parent of joint j drawn among earlier joints.
  const std::size_t bones = 2 + uniform_index(rng, 3);
  std::vector<int> parents{-1};
  std::vector<Vec3> axes;
  for (std::size_t j = 1; j <= bones; ++j) {
    parents.push_back(static_cast<int>(uniform_index(rng, j)));
    axes.push_back(Vec3(normal01(rng), normal01(rng), normal01(rng)).normalized());
  }
  const KinematicTree tree(parents, axes);
  PoseConfig pose;
  pose.root.rotation = rotation_from_axis_angle(Vec3(normal01(rng), normal01(rng), normal01(rng)) * 0.3);
  for (std::size_t b = 0; b < bones; ++b) {
    pose.theta.push_back(Vec3(normal01(rng), normal01(rng), normal01(rng)).normalized() * uniform(rng, 0.0, 0.9));
    pose.zeta.push_back(uniform(rng, 0.2, 0.35));
  }

  FieldDescriptor d = FieldDescriptor::make(arch, tree, pose.zeta);
  d.depth = 3;
  d.width = 24;
  d.color_width = 12;
  d.skip_layer = 2;
  d.rt_color_twist = variant != "rtnerf_no_twist";
  d.rt_global = variant == "rpnerf";
  const bool latent = variant == "narf_d_latent";
  if (latent) {
    d.latent_instances = 3;
    d.latent_shape_dim = 4;
    d.latent_appearance_dim = 4;
  }
  d.validate();
  FieldModel model(d, derive_seed(seed, 1));
  for (ad::Parameter& p : model.parameters()) {
    if (p.name.rfind("latent.", 0) == 0) {
      for (double& v : p.value.values()) v = 0.5 * normal01(rng);
    }
  }
  const PartFrames frames = PartFrames::compute(tree, pose, d.part_order, d.encoding);

  std::vector<RayQuery> queries;
  Tensor rgb(cfg.rays, 3);
  Tensor mask(cfg.rays, 1);
  for (std::size_t i = 0; i < cfg.rays; ++i) {
    const Vec3 eye = Vec3(normal01(rng), normal01(rng), normal01(rng)).normalized() * 2.5;
    const Vec3 target = Vec3(normal01(rng), normal01(rng), normal01(rng)) * 0.2;
    Ray ray;
    ray.origin = eye;
    ray.direction = (target - eye).normalized();
    ray.hit = intersect_sphere(ray.origin, ray.direction, 1.0, ray.near, ray.far);
    const std::size_t inst = latent ? uniform_index(rng, d.latent_instances) : 0;
    queries.push_back({ray, &frames, inst, latent ? uniform_index(rng, d.latent_instances) : 0});
    for (int c = 0; c < 3; ++c) rgb(i, c) = uniform01(rng);
    mask[i] = uniform01(rng) < 0.5 ? 0.0 : 1.0;
  }

  RenderConfig rc;
  rc.samples = cfg.samples;
  rc.jitter = true;
  const FieldBinding binding = FieldBinding::of(model);
  const std::uint64_t sample_seed = derive_seed(seed, 2);
  const LossBuilder build = [&](ad::Tape& tape) {
    Rng r(sample_seed);
    const RenderedRays rr = render_rays(tape, binding, queries, rc, r);
    return compute_loss(rr.color, rr.mask, rgb, mask, 1.0).total;
  };
  GradCheckOptions opt;
  opt.max_coords_per_parameter = cfg.coords_per_parameter;
  opt.step = cfg.step;
  opt.fourth_order = cfg.fourth_order;
  return finite_difference_check(model.parameters(), build, opt);
}

}  // namespace narf
