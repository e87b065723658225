#pragma once

// Procedural articulated ground truth: every bone is a capsule of constant
// density around its segment, colored by a per-part albedo with simple
// ambient + diffuse shading.

#include "narf/kinematics.hpp"
#include "narf/random.hpp"
#include "narf/renderer.hpp"
#include "narf/tensor.hpp"

#include "json.hpp"

#include <cstddef>
#include <cstdint>
#include <vector>

namespace narf {

// Per-instance shape and appearance.
struct InstanceSpec {
  std::vector<double> zeta;    // rest bone lengths
  std::vector<double> radius;  // capsule radii
  std::vector<Vec3> albedo;    // RGB in [0, 1]
};

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double v) const { return v >= lo && v <= hi; }
  bool overlaps(const Range& o) const { return lo <= o.hi && o.lo <= hi; }
};

struct SceneSpec {
  KinematicTree tree = KinematicTree::chain(3);
  std::vector<InstanceSpec> instances;
  double sigma_max = 200.0;

  // Pose sampler: joint rotations have uniformly random axes and angles in
  // [0, theta_max]; the root turns about +y by an angle in root_yaw; bone
  // lengths are the instance lengths scaled by a factor in zeta_scale.
  double theta_max = 0.9;
  Range root_yaw{0.0, 0.0};
  Range zeta_scale{1.0, 1.0};

  // Camera sampler, angles in radians. Cameras look at the origin.
  Range distance{2.6, 3.2};
  Range train_elevation{-0.26, 0.61};  // about -15 to 35 degrees
  Range novel_elevation{0.87, 1.31};   // about 50 to 75 degrees
  Range azimuth{0.0, 6.283185307179586};
  double focal = 75.0;
  int width = 64;
  int height = 64;

  // Shading: ambient + (1 - ambient) * max(0, n . light).
  double ambient = 0.75;
  Vec3 light = Vec3(0.3, 0.8, 0.5).normalized();

  // Desk default: one 3-bone chain with fixed colors.
  static SceneSpec desk_default();
  // `count` instances with lengths and albedos drawn from fixed ranges.
  static SceneSpec multi_instance(std::size_t count, std::uint64_t seed);

  std::size_t parts() const { return tree.bone_count(); }
  // Largest distance from the origin any object point can reach.
  double max_extent() const;
  // Throws Error naming the first violated constraint.
  void validate() const;

  nlohmann::json to_json() const;
  static SceneSpec from_json(const nlohmann::json& j);
};

// Capsules of one instance in one pose.
struct PosedScene {
  std::vector<Vec3> start;  // per bone
  std::vector<Vec3> end;
  std::vector<double> radius;
  std::vector<Vec3> albedo;
  double sigma_max = 0.0;
  double ambient = 1.0;
  Vec3 light = Vec3::UnitY();

  static PosedScene build(const SceneSpec& scene, std::size_t instance, const PoseConfig& pose);
  // Shaded color of bone `part` at x.
  Vec3 shade(std::size_t part, const Vec3& x) const;
};

struct DensitySample {
  double sigma = 0.0;
  Vec3 color = Vec3::Zero();
  int part = -1;  // -1 outside every capsule
};

double point_segment_distance(const Vec3& x, const Vec3& a, const Vec3& b);

DensitySample analytic_density(const PosedScene& scene, const Vec3& x);
DensitySample analytic_density(const SceneSpec& scene, std::size_t instance, const PoseConfig& pose,
                               const Vec3& x);

// Range of ray parameters t >= 0 inside one capsule; false if never inside.
bool ray_capsule_interval(const Vec3& o, const Vec3& d, const Vec3& a, const Vec3& b, double r, double& lo,
                          double& hi);

struct ReferencePixel {
  Vec3 color = Vec3::Zero();
  double mask = 0.0;
};

// Marches `bins` equal intervals of [near, far] and integrates the piecewise
// constant capsule density exactly inside each interval.
ReferencePixel render_reference_ray(const PosedScene& scene, const Ray& ray, std::size_t bins);

struct ReferenceImage {
  int width = 0;
  int height = 0;
  Tensor rgb;   // [H*W x 3]
  Tensor mask;  // [H*W x 1]
};

ReferenceImage render_reference(const SceneSpec& scene, std::size_t instance, const PoseConfig& pose,
                                const Camera& cam, std::size_t bins = 256);
ReferenceImage render_reference(const PosedScene& scene, const Camera& cam, std::size_t bins = 256);

PoseConfig sample_pose(const SceneSpec& scene, std::size_t instance, Rng& rng);
Camera sample_camera(const SceneSpec& scene, const Range& elevation, Rng& rng);

}  // namespace narf
