#pragma once

// Pinhole cameras, ray sampling and differentiable volume compositing.
//
// Cameras look down their local -z axis with +y up. Rays are bounded by a
// sphere around the origin that encloses the whole object; rays missing it
// composite to black with zero mask without evaluating the field.

#include "narf/autodiff.hpp"
#include "narf/fields.hpp"
#include "narf/kinematics.hpp"
#include "narf/random.hpp"
#include "narf/tensor.hpp"

#include "json.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace narf {

struct Camera {
  double focal = 75.0;  // pixels
  double cx = 32.0;     // principal point, pixels from the left/top edge
  double cy = 32.0;
  int width = 64;
  int height = 64;
  RigidTransform camera_to_world;

  // Camera at `eye` looking at `target`; principal point at the image center.
  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width,
                        int height);
  void validate() const;
  nlohmann::json to_json() const;
  static Camera from_json(const nlohmann::json& j);
};

struct Pixel {
  int x = 0;  // column
  int y = 0;  // row, top to bottom
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = -Vec3::UnitZ();
  double near = 0.0;
  double far = 0.0;
  bool hit = false;  // false when the ray misses the bounding sphere
};

// Entry/exit distances of a ray with a sphere at the origin; false on a miss.
bool intersect_sphere(const Vec3& origin, const Vec3& dir, double radius, double& t0, double& t1);

// Ray through the pixel center. Throws Error for pixels outside the image.
Ray camera_ray(const Camera& cam, Pixel px, double bound_radius = 1.0);
std::vector<Ray> generate_rays(const Camera& cam, std::span<const Pixel> pixels, double bound_radius = 1.0);

struct RaySampleBatch {
  std::vector<double> depths;  // ascending
  std::vector<double> deltas;  // depths[j+1] - depths[j]; last is far - depths.back()
};

// One sample per equal-width bin of [near, far]: the bin midpoint, or a
// uniform position within the bin when jittering.
RaySampleBatch stratified_sample(double near, double far, std::size_t n, bool jitter, Rng& rng);
RaySampleBatch stratified_sample(const Ray& ray, std::size_t n, bool jitter, Rng& rng);

// Inverse-CDF draws from the piecewise-constant density that places weight
// w_j uniformly on [t_j, t_j + delta_j]. Falls back to jittered stratified
// sampling over [near, far] when every weight is zero.
std::vector<double> sample_fine_depths(const RaySampleBatch& coarse, std::span<const double> weights,
                                       double near, double far, std::size_t n_fine, Rng& rng);
// Coarse and fine depths merged in ascending order, intervals recomputed.
RaySampleBatch merge_samples(const RaySampleBatch& coarse, std::span<const double> fine, double far);
RaySampleBatch importance_resample(const RaySampleBatch& coarse, std::span<const double> weights,
                                   double near, double far, std::size_t n_fine, Rng& rng);

struct CompositeResult {
  ad::Var color;          // [R x 3]
  ad::Var mask;           // [R x 1]
  ad::Var weights;        // [R x N]
  ad::Var transmittance;  // [R x N]
  Tensor depth;           // [R x 1]
  Tensor segmentation;    // [R x P] when part scores were given
};

// sigma [R*N x 1] and color [R*N x 3] are sample-major within each ray;
// deltas and depths are [R x N]. part_scores [R*N x P] assigns every sample
// to its argmax part (lowest index on ties). Throws Error on negative sigma.
CompositeResult composite(ad::Var sigma, ad::Var color, const Tensor& deltas, const Tensor& depths,
                          const Tensor* part_scores = nullptr);

// Per-sample argmax with lowest-index tie-break.
std::vector<std::size_t> argmax_rows(const Tensor& scores);

using FieldFn = std::function<FieldOutput(ad::Tape&, const FieldInputs&)>;

// A radiance field as seen by the renderer.
struct FieldBinding {
  FieldFn fn;
  std::size_t parts = 0;
  EncodingConfig encoding;
  bool latent = false;
  bool segmentation = false;  // whether part scores are meaningful

  static FieldBinding of(const FieldModel& model, EvalOptions options = {});
};

struct RenderConfig {
  std::size_t samples = 64;
  std::size_t fine_samples = 0;  // 0 disables the importance pass
  bool jitter = false;
  std::uint64_t seed = 0;
  std::size_t chunk_rays = 256;
  bool segmentation = false;
  double bound_radius = 1.0;

  void validate() const;
};

struct RayQuery {
  Ray ray;
  const PartFrames* frames = nullptr;
  std::size_t shape_instance = 0;
  std::size_t appearance_instance = 0;
};

struct RenderedRays {
  ad::Var color;        // [R x 3]
  ad::Var mask;         // [R x 1]
  Tensor depth;         // [R x 1]
  Tensor segmentation;  // [R x P] if requested
};

// Renders the given rays on `tape`. Gradients flow to the field parameters
// through color and mask.
RenderedRays render_rays(ad::Tape& tape, const FieldBinding& field, std::span<const RayQuery> rays,
                         const RenderConfig& cfg, Rng& rng);

struct RenderedImage {
  int width = 0;
  int height = 0;
  Tensor rgb;           // [H*W x 3], row-major pixels
  Tensor mask;          // [H*W x 1]
  Tensor depth;         // [H*W x 1]
  Tensor segmentation;  // [H*W x P] or empty
  double depth_near = 0.0;  // depth normalization range over hit rays
  double depth_far = 0.0;
};

// Renders every pixel. Output does not depend on the worker count.
RenderedImage render_image(const FieldBinding& field, const Camera& cam, const PartFrames& frames,
                           const RenderConfig& cfg, std::size_t shape_instance = 0,
                           std::size_t appearance_instance = 0);
// Throws UnsupportedError when segmentation is requested for an
// architecture without part-wise outputs.
RenderedImage render_image(const FieldModel& model, const Camera& cam, const PoseConfig& pose,
                           const RenderConfig& cfg, std::size_t shape_instance = 0,
                           std::size_t appearance_instance = 0);

}  // namespace narf
