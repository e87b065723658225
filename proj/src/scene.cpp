#include "narf/scene.hpp"

#include "narf/error.hpp"
#include "narf/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace narf {

namespace {

nlohmann::json range_json(const Range& r) { return {r.lo, r.hi}; }
Range range_from(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }
nlohmann::json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }
Vec3 vec_from(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

Vec3 closest_on_segment(const Vec3& x, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 <= 0.0) return a;
  const double s = std::clamp((x - a).dot(ab) / len2, 0.0, 1.0);
  return a + s * ab;
}

bool sphere_interval(const Vec3& o, const Vec3& d, const Vec3& c, double r, double& lo, double& hi) {
  return intersect_sphere(o - c, d, r, lo, hi);
}

// Nearest capsule containing x, or -1. Ties go to the lowest bone index.
int owner_at(const PosedScene& s, const Vec3& x) {
  int best = -1;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < s.start.size(); ++i) {
    const double dist = point_segment_distance(x, s.start[i], s.end[i]);
    if (dist <= s.radius[i] && dist < best_dist) {
      best = static_cast<int>(i);
      best_dist = dist;
    }
  }
  return best;
}

}  // namespace

// ---- scene specification --------------------------------------------------------

SceneSpec SceneSpec::desk_default() {
  SceneSpec s;
  InstanceSpec inst;
  inst.zeta = {0.27, 0.27, 0.27};
  inst.radius = {0.11, 0.10, 0.09};
  inst.albedo = {Vec3(0.85, 0.25, 0.20), Vec3(0.25, 0.75, 0.30), Vec3(0.20, 0.35, 0.85)};
  s.instances.push_back(inst);
  return s;
}

SceneSpec SceneSpec::multi_instance(std::size_t count, std::uint64_t seed) {
  if (count < 1) throw Error("SceneSpec: need at least one instance");
  SceneSpec s = desk_default();
  s.instances.clear();
  Rng rng(derive_seed(seed, 0x5ce7e));
  for (std::size_t k = 0; k < count; ++k) {
    InstanceSpec inst;
    for (std::size_t b = 0; b < s.parts(); ++b) {
      inst.zeta.push_back(uniform(rng, 0.22, 0.29));
      inst.radius.push_back(uniform(rng, 0.08, 0.11));
      inst.albedo.emplace_back(uniform(rng, 0.15, 0.9), uniform(rng, 0.15, 0.9), uniform(rng, 0.15, 0.9));
    }
    s.instances.push_back(inst);
  }
  return s;
}

double SceneSpec::max_extent() const {
  double extent = 0.0;
  for (const InstanceSpec& inst : instances) {
    // Upper bound on each joint's distance from the origin (root at origin).
    std::vector<double> reach(tree.joint_count(), -1.0);
    reach[0] = 0.0;
    for (std::size_t pass = 0; pass < tree.joint_count(); ++pass) {
      for (std::size_t b = 0; b < tree.bone_count(); ++b) {
        const int p = tree.parent_joint(b);
        if (reach[p] >= 0.0) reach[b + 1] = reach[p] + inst.zeta[b] * zeta_scale.hi;
      }
    }
    for (std::size_t b = 0; b < tree.bone_count(); ++b) {
      extent = std::max(extent, reach[b + 1] + inst.radius[b]);
    }
  }
  return extent;
}

void SceneSpec::validate() const {
  const std::size_t p = parts();
  if (p == 0) throw Error("SceneSpec: tree has no bones");
  if (instances.empty()) throw Error("SceneSpec: at least one instance is required");
  for (std::size_t k = 0; k < instances.size(); ++k) {
    const InstanceSpec& inst = instances[k];
    const std::string tag = "SceneSpec: instance " + std::to_string(k) + ": ";
    if (inst.zeta.size() != p || inst.radius.size() != p || inst.albedo.size() != p) {
      throw Error(tag + "expected " + std::to_string(p) + " lengths, radii and albedos");
    }
    for (std::size_t b = 0; b < p; ++b) {
      if (!(inst.zeta[b] > 0.0)) throw Error(tag + "bone lengths must be > 0");
      if (!(inst.radius[b] > 0.0)) throw Error(tag + "capsule radii must be > 0");
      if (inst.albedo[b].minCoeff() < 0.0 || inst.albedo[b].maxCoeff() > 1.0) {
        throw Error(tag + "albedo must lie in [0, 1]");
      }
    }
  }
  if (!(sigma_max > 0.0)) throw Error("SceneSpec: sigma_max must be > 0");
  if (!(theta_max >= 0.0 && theta_max < 3.14159)) throw Error("SceneSpec: theta_max must be in [0, pi)");
  if (root_yaw.lo > root_yaw.hi || zeta_scale.lo > zeta_scale.hi || !(zeta_scale.lo > 0.0)) {
    throw Error("SceneSpec: invalid pose sampler ranges");
  }
  if (!(distance.lo > 1.0) || distance.lo > distance.hi) {
    throw Error("SceneSpec: camera distance must exceed the unit bounding sphere");
  }
  for (const Range* r : {&train_elevation, &novel_elevation}) {
    if (r->lo > r->hi || r->lo <= -1.5 || r->hi >= 1.5) throw Error("SceneSpec: invalid elevation range");
  }
  if (train_elevation.overlaps(novel_elevation)) {
    throw Error("SceneSpec: novel-view elevations must not overlap training elevations");
  }
  if (!(focal > 0.0) || width < 1 || height < 1) throw Error("SceneSpec: invalid camera intrinsics");
  if (ambient < 0.0 || ambient > 1.0) throw Error("SceneSpec: ambient must lie in [0, 1]");
  if (max_extent() >= 1.0) {
    throw Error("SceneSpec: object can reach " + std::to_string(max_extent()) +
                " from the origin; it must stay inside the unit sphere");
  }
}

nlohmann::json SceneSpec::to_json() const {
  nlohmann::json axes = nlohmann::json::array();
  for (const Vec3& a : tree.axes()) axes.push_back(vec_json(a));
  nlohmann::json inst = nlohmann::json::array();
  for (const InstanceSpec& i : instances) {
    nlohmann::json albedo = nlohmann::json::array();
    for (const Vec3& a : i.albedo) albedo.push_back(vec_json(a));
    inst.push_back({{"zeta", i.zeta}, {"radius", i.radius}, {"albedo", albedo}});
  }
  return {{"tree", {{"parents", tree.parents()}, {"axes", axes}}},
          {"instances", inst},
          {"sigma_max", sigma_max},
          {"theta_max", theta_max},
          {"root_yaw", range_json(root_yaw)},
          {"zeta_scale", range_json(zeta_scale)},
          {"distance", range_json(distance)},
          {"train_elevation", range_json(train_elevation)},
          {"novel_elevation", range_json(novel_elevation)},
          {"azimuth", range_json(azimuth)},
          {"focal", focal},
          {"width", width},
          {"height", height},
          {"ambient", ambient},
          {"light", vec_json(light)}};
}

SceneSpec SceneSpec::from_json(const nlohmann::json& j) {
  try {
    SceneSpec s;
    std::vector<Vec3> axes;
    for (const auto& a : j.at("tree").at("axes")) axes.push_back(vec_from(a));
    s.tree = KinematicTree(j.at("tree").at("parents").get<std::vector<int>>(), std::move(axes));
    for (const auto& i : j.at("instances")) {
      InstanceSpec inst;
      inst.zeta = i.at("zeta").get<std::vector<double>>();
      inst.radius = i.at("radius").get<std::vector<double>>();
      for (const auto& a : i.at("albedo")) inst.albedo.push_back(vec_from(a));
      s.instances.push_back(inst);
    }
    s.sigma_max = j.at("sigma_max");
    s.theta_max = j.at("theta_max");
    s.root_yaw = range_from(j.at("root_yaw"));
    s.zeta_scale = range_from(j.at("zeta_scale"));
    s.distance = range_from(j.at("distance"));
    s.train_elevation = range_from(j.at("train_elevation"));
    s.novel_elevation = range_from(j.at("novel_elevation"));
    s.azimuth = range_from(j.at("azimuth"));
    s.focal = j.at("focal");
    s.width = j.at("width");
    s.height = j.at("height");
    s.ambient = j.at("ambient");
    s.light = vec_from(j.at("light")).normalized();
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("SceneSpec: malformed scene: ") + e.what());
  }
}

// ---- posed capsules ----------------------------------------------------------------

PosedScene PosedScene::build(const SceneSpec& scene, std::size_t instance, const PoseConfig& pose) {
  if (instance >= scene.instances.size()) throw Error("PosedScene: unknown instance " + std::to_string(instance));
  const InstanceSpec& inst = scene.instances[instance];
  const auto frames = joint_frames(scene.tree, pose);
  PosedScene s;
  for (std::size_t b = 0; b < scene.parts(); ++b) {
    s.start.push_back(frames[scene.tree.parent_joint(b)].translation);
    s.end.push_back(frames[b + 1].translation);
  }
  s.radius = inst.radius;
  s.albedo = inst.albedo;
  s.sigma_max = scene.sigma_max;
  s.ambient = scene.ambient;
  s.light = scene.light;
  return s;
}

Vec3 PosedScene::shade(std::size_t part, const Vec3& x) const {
  const Vec3 off = x - closest_on_segment(x, start[part], end[part]);
  const double len = off.norm();
  const double diffuse = len > 0.0 ? std::max(0.0, off.dot(light) / len) : 1.0;
  return albedo[part] * (ambient + (1.0 - ambient) * diffuse);
}

double point_segment_distance(const Vec3& x, const Vec3& a, const Vec3& b) {
  return (x - closest_on_segment(x, a, b)).norm();
}

DensitySample analytic_density(const PosedScene& scene, const Vec3& x) {
  DensitySample out;
  const int part = owner_at(scene, x);
  if (part < 0) return out;
  out.sigma = scene.sigma_max;
  out.part = part;
  out.color = scene.shade(static_cast<std::size_t>(part), x);
  return out;
}

DensitySample analytic_density(const SceneSpec& scene, std::size_t instance, const PoseConfig& pose,
                               const Vec3& x) {
  return analytic_density(PosedScene::build(scene, instance, pose), x);
}

bool ray_capsule_interval(const Vec3& o, const Vec3& d, const Vec3& a, const Vec3& b, double r, double& lo,
                          double& hi) {
  // Distance from a moving point to a convex set is convex in t, so the
  // points inside form one interval: the hull of the cap-sphere and
  // clipped-cylinder intervals.
  lo = std::numeric_limits<double>::infinity();
  hi = -std::numeric_limits<double>::infinity();
  auto take = [&](double t0, double t1) {
    lo = std::min(lo, t0);
    hi = std::max(hi, t1);
  };
  double t0 = 0.0, t1 = 0.0;
  if (sphere_interval(o, d, a, r, t0, t1)) take(t0, t1);
  if (sphere_interval(o, d, b, r, t0, t1)) take(t0, t1);
  const Vec3 ba = b - a;
  const Vec3 oa = o - a;
  const double k = ba.squaredNorm();
  const double kd = ba.dot(d);
  const double ko = ba.dot(oa);
  const double qa = k - kd * kd;
  if (k > 0.0 && qa > 1e-12 * k) {
    const double qb = k * oa.dot(d) - ko * kd;
    const double qc = k * oa.squaredNorm() - ko * ko - r * r * k;
    const double disc = qb * qb - qa * qc;
    if (disc > 0.0) {
      const double s = std::sqrt(disc);
      double c0 = (-qb - s) / qa;
      double c1 = (-qb + s) / qa;
      // Keep the part whose axial projection lies within the segment.
      double s0 = -std::numeric_limits<double>::infinity();
      double s1 = std::numeric_limits<double>::infinity();
      if (std::abs(kd) > 0.0) {
        s0 = (0.0 - ko) / kd;
        s1 = (k - ko) / kd;
        if (s0 > s1) std::swap(s0, s1);
      } else if (ko < 0.0 || ko > k) {
        s0 = 1.0;
        s1 = 0.0;
      }
      c0 = std::max(c0, s0);
      c1 = std::min(c1, s1);
      if (c0 < c1) take(c0, c1);
    }
  }
  lo = std::max(lo, 0.0);
  return lo < hi;
}

ReferencePixel render_reference_ray(const PosedScene& scene, const Ray& ray, std::size_t bins) {
  ReferencePixel px;
  if (!ray.hit) return px;
  if (bins < 1) throw Error("render_reference_ray: bins must be >= 1");
  const Vec3& o = ray.origin;
  const Vec3& d = ray.direction;
  const std::size_t parts = scene.start.size();

  std::vector<double> lo(parts), hi(parts);
  std::vector<bool> hit(parts, false);
  std::vector<double> events{ray.near, ray.far};
  for (std::size_t i = 0; i < parts; ++i) {
    if (ray_capsule_interval(o, d, scene.start[i], scene.end[i], scene.radius[i], lo[i], hi[i])) {
      lo[i] = std::max(lo[i], ray.near);
      hi[i] = std::min(hi[i], ray.far);
      hit[i] = lo[i] < hi[i];
      if (hit[i]) {
        events.push_back(lo[i]);
        events.push_back(hi[i]);
      }
    }
  }
  // Where two capsules overlap, the owner switches where their axis
  // distances cross; locate crossings by scanning and bisection.
  for (std::size_t i = 0; i < parts; ++i) {
    for (std::size_t j = i + 1; j < parts; ++j) {
      if (!hit[i] || !hit[j]) continue;
      const double s = std::max(lo[i], lo[j]);
      const double e = std::min(hi[i], hi[j]);
      if (!(s < e)) continue;
      auto f = [&](double t) {
        const Vec3 x = o + t * d;
        return point_segment_distance(x, scene.start[i], scene.end[i]) -
               point_segment_distance(x, scene.start[j], scene.end[j]);
      };
      constexpr int kScan = 32;
      double prev_t = s;
      double prev_f = f(s);
      for (int k = 1; k <= kScan; ++k) {
        const double t = s + (e - s) * k / kScan;
        const double ft = f(t);
        if ((prev_f < 0.0) != (ft < 0.0)) {
          double a = prev_t, b = t, fa = prev_f;
          for (int it = 0; it < 60; ++it) {
            const double m = 0.5 * (a + b);
            const double fm = f(m);
            if ((fa < 0.0) == (fm < 0.0)) {
              a = m;
              fa = fm;
            } else {
              b = m;
            }
          }
          events.push_back(0.5 * (a + b));
        }
        prev_t = t;
        prev_f = ft;
      }
    }
  }
  std::sort(events.begin(), events.end());

  // Pieces of constant owner; each piece carries the color at its entry.
  struct Piece {
    double a, b;
    Vec3 color;
  };
  std::vector<Piece> pieces;
  for (std::size_t k = 0; k + 1 < events.size(); ++k) {
    const double a = events[k];
    const double b = events[k + 1];
    if (!(b > a)) continue;
    const int owner = owner_at(scene, o + (0.5 * (a + b)) * d);
    if (owner < 0) continue;
    pieces.push_back({a, b, scene.shade(static_cast<std::size_t>(owner), o + a * d)});
  }

  // March equal bins; within a bin each piece is integrated in closed form.
  double transmittance = 1.0;
  const double width = (ray.far - ray.near) / static_cast<double>(bins);
  std::size_t first = 0;
  for (std::size_t k = 0; k < bins && first < pieces.size(); ++k) {
    const double a = ray.near + width * static_cast<double>(k);
    const double b = k + 1 == bins ? ray.far : a + width;
    for (std::size_t q = first; q < pieces.size() && pieces[q].a < b; ++q) {
      const double s = std::max(a, pieces[q].a);
      const double e = std::min(b, pieces[q].b);
      if (e <= s) continue;
      const double alpha = 1.0 - std::exp(-scene.sigma_max * (e - s));
      const double w = transmittance * alpha;
      px.color += w * pieces[q].color;
      px.mask += w;
      transmittance *= 1.0 - alpha;
    }
    while (first < pieces.size() && pieces[first].b <= b) ++first;
  }
  return px;
}

ReferenceImage render_reference(const PosedScene& scene, const Camera& cam, std::size_t bins) {
  cam.validate();
  ReferenceImage img;
  img.width = cam.width;
  img.height = cam.height;
  const std::size_t pixels = static_cast<std::size_t>(cam.width) * static_cast<std::size_t>(cam.height);
  img.rgb = Tensor(pixels, 3);
  img.mask = Tensor(pixels, 1);
  for (std::size_t i = 0; i < pixels; ++i) {
    const Ray ray = camera_ray(cam, {static_cast<int>(i % cam.width), static_cast<int>(i / cam.width)});
    const ReferencePixel px = render_reference_ray(scene, ray, bins);
    for (int c = 0; c < 3; ++c) img.rgb(i, c) = px.color[c];
    img.mask[i] = px.mask;
  }
  return img;
}

ReferenceImage render_reference(const SceneSpec& scene, std::size_t instance, const PoseConfig& pose,
                                const Camera& cam, std::size_t bins) {
  return render_reference(PosedScene::build(scene, instance, pose), cam, bins);
}

// ---- samplers --------------------------------------------------------------------

PoseConfig sample_pose(const SceneSpec& scene, std::size_t instance, Rng& rng) {
  const InstanceSpec& inst = scene.instances.at(instance);
  PoseConfig pose;
  const double yaw = uniform(rng, scene.root_yaw.lo, scene.root_yaw.hi);
  pose.root.rotation = rotation_from_axis_angle(Vec3(0.0, yaw, 0.0));
  for (std::size_t b = 0; b < scene.parts(); ++b) {
    Vec3 axis(normal01(rng), normal01(rng), normal01(rng));
    axis.normalize();
    pose.theta.push_back(uniform(rng, 0.0, scene.theta_max) * axis);
    pose.zeta.push_back(inst.zeta[b] * uniform(rng, scene.zeta_scale.lo, scene.zeta_scale.hi));
  }
  return pose;
}

Camera sample_camera(const SceneSpec& scene, const Range& elevation, Rng& rng) {
  const double dist = uniform(rng, scene.distance.lo, scene.distance.hi);
  const double el = uniform(rng, elevation.lo, elevation.hi);
  const double az = uniform(rng, scene.azimuth.lo, scene.azimuth.hi);
  const Vec3 eye = dist * Vec3(std::cos(el) * std::cos(az), std::sin(el), std::cos(el) * std::sin(az));
  return Camera::look_at(eye, Vec3::Zero(), Vec3::UnitY(), scene.focal, scene.width, scene.height);
}

}  // namespace narf
