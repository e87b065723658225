#include "narf/renderer.hpp"

#include "narf/error.hpp"
#include "narf/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace narf {

// ---- camera ------------------------------------------------------------------

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width,
                       int height) {
  const Vec3 back = (eye - target).normalized();
  const Vec3 right = up.cross(back).normalized();
  const Vec3 cam_up = back.cross(right);
  Camera c;
  c.focal = focal;
  c.width = width;
  c.height = height;
  c.cx = 0.5 * width;
  c.cy = 0.5 * height;
  c.camera_to_world.rotation.col(0) = right;
  c.camera_to_world.rotation.col(1) = cam_up;
  c.camera_to_world.rotation.col(2) = back;
  c.camera_to_world.translation = eye;
  return c;
}

void Camera::validate() const {
  if (!(focal > 0.0)) throw Error("Camera: focal must be > 0");
  if (width < 1 || height < 1) throw Error("Camera: width and height must be >= 1");
  if (!camera_to_world.is_valid(1e-6)) throw Error("Camera: extrinsic rotation is not a rotation matrix");
}

nlohmann::json Camera::to_json() const {
  const Mat3& r = camera_to_world.rotation;
  const Vec3& t = camera_to_world.translation;
  return {{"focal", focal},
          {"cx", cx},
          {"cy", cy},
          {"width", width},
          {"height", height},
          {"rotation", {{r(0, 0), r(0, 1), r(0, 2)}, {r(1, 0), r(1, 1), r(1, 2)}, {r(2, 0), r(2, 1), r(2, 2)}}},
          {"translation", {t.x(), t.y(), t.z()}}};
}

Camera Camera::from_json(const nlohmann::json& j) {
  try {
    Camera c;
    c.focal = j.at("focal");
    c.cx = j.at("cx");
    c.cy = j.at("cy");
    c.width = j.at("width");
    c.height = j.at("height");
    for (int r = 0; r < 3; ++r) {
      for (int k = 0; k < 3; ++k) c.camera_to_world.rotation(r, k) = j.at("rotation").at(r).at(k);
      c.camera_to_world.translation[r] = j.at("translation").at(r);
    }
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("Camera: malformed camera: ") + e.what());
  }
}

// ---- rays ----------------------------------------------------------------------

bool intersect_sphere(const Vec3& origin, const Vec3& dir, double radius, double& t0, double& t1) {
  const double b = origin.dot(dir);
  const double c = origin.squaredNorm() - radius * radius;
  const double disc = b * b - c;
  if (disc <= 0.0) return false;
  const double s = std::sqrt(disc);
  t0 = -b - s;
  t1 = -b + s;
  return true;
}

Ray camera_ray(const Camera& cam, Pixel px, double bound_radius) {
  if (px.x < 0 || px.y < 0 || px.x >= cam.width || px.y >= cam.height) {
    throw Error("camera_ray: pixel (" + std::to_string(px.x) + ", " + std::to_string(px.y) +
                ") outside a " + std::to_string(cam.width) + "x" + std::to_string(cam.height) + " image");
  }
  const Vec3 local((px.x + 0.5 - cam.cx) / cam.focal, -(px.y + 0.5 - cam.cy) / cam.focal, -1.0);
  Ray ray;
  ray.origin = cam.camera_to_world.translation;
  ray.direction = (cam.camera_to_world.rotation * local).normalized();
  double t0 = 0.0, t1 = 0.0;
  if (intersect_sphere(ray.origin, ray.direction, bound_radius, t0, t1) && t1 > 0.0) {
    ray.near = std::max(t0, 0.0);
    ray.far = t1;
    ray.hit = ray.near < ray.far;
  }
  return ray;
}

std::vector<Ray> generate_rays(const Camera& cam, std::span<const Pixel> pixels, double bound_radius) {
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const Pixel& p : pixels) rays.push_back(camera_ray(cam, p, bound_radius));
  return rays;
}

// ---- sampling ------------------------------------------------------------------

RaySampleBatch stratified_sample(double near, double far, std::size_t n, bool jitter, Rng& rng) {
  if (n < 1) throw Error("stratified_sample: need at least one sample");
  if (!(near < far)) throw Error("stratified_sample: near must be < far");
  RaySampleBatch s;
  s.depths.resize(n);
  s.deltas.resize(n);
  const double bin = (far - near) / static_cast<double>(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double u = jitter ? uniform01(rng) : 0.5;
    s.depths[j] = near + (static_cast<double>(j) + u) * bin;
  }
  for (std::size_t j = 0; j + 1 < n; ++j) s.deltas[j] = s.depths[j + 1] - s.depths[j];
  s.deltas[n - 1] = far - s.depths[n - 1];
  return s;
}

RaySampleBatch stratified_sample(const Ray& ray, std::size_t n, bool jitter, Rng& rng) {
  return stratified_sample(ray.near, ray.far, n, jitter, rng);
}

std::vector<double> sample_fine_depths(const RaySampleBatch& coarse, std::span<const double> weights,
                                       double near, double far, std::size_t n_fine, Rng& rng) {
  const std::size_t n = coarse.depths.size();
  if (weights.size() != n) throw ShapeError("sample_fine_depths: weight count differs from sample count");
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw Error("sample_fine_depths: weights must be >= 0");
    total += w;
  }
  if (!(total > 0.0)) return stratified_sample(near, far, n_fine, true, rng).depths;
  std::vector<double> cdf(n + 1, 0.0);
  for (std::size_t j = 0; j < n; ++j) cdf[j + 1] = cdf[j] + weights[j] / total;
  std::vector<double> out(n_fine);
  for (std::size_t k = 0; k < n_fine; ++k) {
    // Stratified uniforms keep the draws spread over the CDF.
    const double u = std::min((static_cast<double>(k) + uniform01(rng)) / static_cast<double>(n_fine), cdf[n]);
    std::size_t j = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    j = std::clamp<std::size_t>(j, 1, n) - 1;
    while (weights[j] <= 0.0 && j + 1 < n) ++j;  // u landed on a flat step
    const double frac = weights[j] > 0.0 ? std::clamp((u - cdf[j]) / (cdf[j + 1] - cdf[j]), 0.0, 1.0) : 0.5;
    out[k] = coarse.depths[j] + frac * coarse.deltas[j];
  }
  return out;
}

RaySampleBatch merge_samples(const RaySampleBatch& coarse, std::span<const double> fine, double far) {
  RaySampleBatch s;
  s.depths = coarse.depths;
  s.depths.insert(s.depths.end(), fine.begin(), fine.end());
  std::sort(s.depths.begin(), s.depths.end());
  s.deltas.resize(s.depths.size());
  for (std::size_t j = 0; j + 1 < s.depths.size(); ++j) s.deltas[j] = s.depths[j + 1] - s.depths[j];
  s.deltas.back() = far - s.depths.back();
  return s;
}

RaySampleBatch importance_resample(const RaySampleBatch& coarse, std::span<const double> weights,
                                   double near, double far, std::size_t n_fine, Rng& rng) {
  return merge_samples(coarse, sample_fine_depths(coarse, weights, near, far, n_fine, rng), far);
}

// ---- compositing ---------------------------------------------------------------

std::vector<std::size_t> argmax_rows(const Tensor& scores) {
  std::vector<std::size_t> out(scores.rows(), 0);
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    const double* row = scores.row_ptr(r);
    std::size_t best = 0;
    for (std::size_t c = 1; c < scores.cols(); ++c) {
      if (row[c] > row[best]) best = c;
    }
    out[r] = best;
  }
  return out;
}

CompositeResult composite(ad::Var sigma, ad::Var color, const Tensor& deltas, const Tensor& depths,
                          const Tensor* part_scores) {
  const std::size_t rays = deltas.rows();
  const std::size_t n = deltas.cols();
  if (sigma.rows() != rays * n || sigma.cols() != 1) {
    throw ShapeError("composite: sigma " + sigma.value().shape_string() + " does not match intervals " +
                     deltas.shape_string());
  }
  if (color.rows() != rays * n || color.cols() != 3) {
    throw ShapeError("composite: color " + color.value().shape_string() + " does not match intervals " +
                     deltas.shape_string());
  }
  if (!depths.same_shape(deltas)) throw ShapeError("composite: depths and deltas differ in shape");
  for (double s : sigma.value().values()) {
    if (!(s >= 0.0)) throw Error("composite: density must be >= 0");
  }
  ad::Tape& tape = *sigma.tape();
  CompositeResult out;
  const ad::Var od = ad::mul(ad::reshape(sigma, rays, n), tape.constant(deltas));
  out.transmittance = ad::exp(ad::neg(ad::exclusive_cumsum_cols(od)));
  const ad::Var alpha = ad::add_scalar(ad::neg(ad::exp(ad::neg(od))), 1.0);
  out.weights = ad::mul(out.transmittance, alpha);
  out.mask = ad::sum_cols(out.weights);
  out.color = ad::segment_sum_rows(ad::mul_col(color, ad::reshape(out.weights, rays * n, 1)), n);

  const Tensor& w = out.weights.value();
  const Tensor& m = out.mask.value();
  out.depth = Tensor(rays, 1);
  for (std::size_t r = 0; r < rays; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += w(r, j) * depths(r, j);
    out.depth[r] = acc / std::max(m[r], 1e-8);
  }
  if (part_scores != nullptr) {
    if (part_scores->rows() != rays * n) throw ShapeError("composite: part scores do not match samples");
    const std::vector<std::size_t> owner = argmax_rows(*part_scores);
    out.segmentation = Tensor(rays, part_scores->cols());
    for (std::size_t r = 0; r < rays; ++r) {
      for (std::size_t j = 0; j < n; ++j) out.segmentation(r, owner[r * n + j]) += w(r, j);
    }
  }
  return out;
}

// ---- field evaluation over rays ----------------------------------------------

FieldBinding FieldBinding::of(const FieldModel& model, EvalOptions options) {
  FieldBinding b;
  b.fn = [&model, options](ad::Tape& tape, const FieldInputs& in) { return model.evaluate(tape, in, options); };
  b.parts = model.descriptor().parts();
  b.encoding = model.descriptor().encoding;
  b.latent = model.descriptor().has_latent();
  b.segmentation = model.descriptor().supports_segmentation();
  return b;
}

void RenderConfig::validate() const {
  if (samples < 1) throw Error("RenderConfig: samples must be >= 1");
  if (chunk_rays < 1) throw Error("RenderConfig: chunk_rays must be >= 1");
  if (!(bound_radius > 0.0)) throw Error("RenderConfig: bound_radius must be > 0");
}

namespace {

PartFrames empty_frames() { return {}; }

FieldInputs build_inputs(const FieldBinding& field, std::span<const RayQuery> rays,
                         std::span<const std::size_t> hits, std::span<const RaySampleBatch> samples) {
  std::size_t total = 0;
  for (const auto& s : samples) total += s.depths.size();
  FieldInputs in = FieldInputs::allocate(total, field.parts, field.encoding, field.latent);
  static const PartFrames kNoParts = empty_frames();
  std::size_t row = 0;
  for (std::size_t h = 0; h < hits.size(); ++h) {
    const RayQuery& q = rays[hits[h]];
    const PartFrames& frames = q.frames != nullptr ? *q.frames : kNoParts;
    for (double t : samples[h].depths) {
      in.set(row++, q.ray.origin + t * q.ray.direction, q.ray.direction, frames, q.shape_instance,
             q.appearance_instance);
    }
  }
  return in;
}

Tensor to_matrix(std::span<const RaySampleBatch> samples, bool deltas) {
  const std::size_t n = samples.front().depths.size();
  Tensor t(samples.size(), n);
  for (std::size_t r = 0; r < samples.size(); ++r) {
    const auto& src = deltas ? samples[r].deltas : samples[r].depths;
    if (src.size() != n) throw ShapeError("render_rays: rays carry different sample counts");
    std::copy(src.begin(), src.end(), t.row_ptr(r));
  }
  return t;
}

}  // namespace

RenderedRays render_rays(ad::Tape& tape, const FieldBinding& field, std::span<const RayQuery> rays,
                         const RenderConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.segmentation && !field.segmentation) {
    throw UnsupportedError("segmentation requires a part-wise architecture (narf_p or narf_d)");
  }
  const std::size_t count = rays.size();
  std::vector<std::size_t> hits;
  for (std::size_t r = 0; r < count; ++r) {
    if (rays[r].ray.hit) hits.push_back(r);
  }
  RenderedRays out;
  out.depth = Tensor(count, 1);
  if (cfg.segmentation) out.segmentation = Tensor(count, field.parts);
  if (hits.empty()) {
    out.color = tape.constant(Tensor(count, 3));
    out.mask = tape.constant(Tensor(count, 1));
    return out;
  }

  std::vector<RaySampleBatch> samples;
  samples.reserve(hits.size());
  for (std::size_t r : hits) samples.push_back(stratified_sample(rays[r].ray, cfg.samples, cfg.jitter, rng));

  if (cfg.fine_samples > 0) {
    // Coarse pass on the same field, without gradients, to place the
    // importance samples.
    ad::Tape probe(ad::Tape::Options{.record_gradients = false});
    const FieldInputs in = build_inputs(field, rays, hits, samples);
    const FieldOutput f = field.fn(probe, in);
    const CompositeResult c = composite(f.sigma, f.color, to_matrix(samples, true), to_matrix(samples, false));
    const Tensor& w = c.weights.value();
    for (std::size_t h = 0; h < hits.size(); ++h) {
      const Ray& ray = rays[hits[h]].ray;
      samples[h] = importance_resample(samples[h], std::span<const double>(w.row_ptr(h), w.cols()), ray.near,
                                       ray.far, cfg.fine_samples, rng);
    }
  }

  const FieldInputs in = build_inputs(field, rays, hits, samples);
  const FieldOutput f = field.fn(tape, in);
  Tensor scores;
  if (cfg.segmentation) {
    const ad::Var s = f.part_scores();
    if (!s.valid()) throw UnsupportedError("segmentation: field produced no part scores");
    scores = s.value();
  }
  const CompositeResult c = composite(f.sigma, f.color, to_matrix(samples, true), to_matrix(samples, false),
                                      cfg.segmentation ? &scores : nullptr);

  // Scatter hit rows back to ray order; misses read an appended zero row.
  std::vector<std::size_t> index(count, hits.size());
  for (std::size_t h = 0; h < hits.size(); ++h) {
    index[hits[h]] = h;
    out.depth[hits[h]] = c.depth[h];
    if (cfg.segmentation) {
      std::copy_n(c.segmentation.row_ptr(h), field.parts, out.segmentation.row_ptr(hits[h]));
    }
  }
  if (hits.size() == count) {
    out.color = c.color;
    out.mask = c.mask;
  } else {
    const ad::Var color_rows[] = {c.color, tape.constant(Tensor(1, 3))};
    const ad::Var mask_rows[] = {c.mask, tape.constant(Tensor(1, 1))};
    out.color = ad::gather_rows(ad::concat_rows(color_rows), index);
    out.mask = ad::gather_rows(ad::concat_rows(mask_rows), index);
  }
  return out;
}

RenderedImage render_image(const FieldBinding& field, const Camera& cam, const PartFrames& frames,
                           const RenderConfig& cfg, std::size_t shape_instance, std::size_t appearance_instance) {
  cam.validate();
  cfg.validate();
  if (cfg.segmentation && !field.segmentation) {
    throw UnsupportedError("segmentation requires a part-wise architecture (narf_p or narf_d)");
  }
  const std::size_t pixels = static_cast<std::size_t>(cam.width) * static_cast<std::size_t>(cam.height);
  std::vector<RayQuery> queries(pixels);
  RenderedImage img;
  img.width = cam.width;
  img.height = cam.height;
  img.rgb = Tensor(pixels, 3);
  img.mask = Tensor(pixels, 1);
  img.depth = Tensor(pixels, 1);
  if (cfg.segmentation) img.segmentation = Tensor(pixels, field.parts);
  img.depth_near = std::numeric_limits<double>::infinity();
  img.depth_far = 0.0;
  for (std::size_t i = 0; i < pixels; ++i) {
    const Pixel px{static_cast<int>(i % cam.width), static_cast<int>(i / cam.width)};
    queries[i] = {camera_ray(cam, px, cfg.bound_radius), &frames, shape_instance, appearance_instance};
    if (queries[i].ray.hit) {
      img.depth_near = std::min(img.depth_near, queries[i].ray.near);
      img.depth_far = std::max(img.depth_far, queries[i].ray.far);
    }
  }
  if (!(img.depth_near < img.depth_far)) img.depth_near = img.depth_far = 0.0;

  const std::size_t chunks = (pixels + cfg.chunk_rays - 1) / cfg.chunk_rays;
  parallel_for(chunks, [&](std::size_t k) {
    const std::size_t begin = k * cfg.chunk_rays;
    const std::size_t end = std::min(pixels, begin + cfg.chunk_rays);
    ad::Tape tape(ad::Tape::Options{.record_gradients = false});
    Rng rng(derive_seed(cfg.seed, k));
    const RenderedRays r =
        render_rays(tape, field, std::span<const RayQuery>(queries).subspan(begin, end - begin), cfg, rng);
    for (std::size_t i = begin; i < end; ++i) {
      const std::size_t local = i - begin;
      std::copy_n(r.color.value().row_ptr(local), 3, img.rgb.row_ptr(i));
      img.mask[i] = r.mask.value()[local];
      img.depth[i] = r.depth[local];
      if (cfg.segmentation) std::copy_n(r.segmentation.row_ptr(local), field.parts, img.segmentation.row_ptr(i));
    }
  });
  return img;
}

RenderedImage render_image(const FieldModel& model, const Camera& cam, const PoseConfig& pose,
                           const RenderConfig& cfg, std::size_t shape_instance, std::size_t appearance_instance) {
  const FieldDescriptor& d = model.descriptor();
  if (cfg.segmentation && !d.supports_segmentation()) {
    throw UnsupportedError("segmentation masks cannot be generated by " + to_string(d.arch) +
                           " (part-wise architectures only: narf_p, narf_d)");
  }
  const PartFrames frames = PartFrames::compute(d.tree, pose, d.part_order, d.encoding);
  return render_image(FieldBinding::of(model), cam, frames, cfg, shape_instance, appearance_instance);
}

}  // namespace narf
