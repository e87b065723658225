#include "doctest.h"

#include "narf/dataset.hpp"
#include "narf/error.hpp"
#include "narf/scene.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>

using namespace narf;
namespace fs = std::filesystem;

namespace {

DatasetCounts tiny_counts() {
  DatasetCounts c;
  c.train_poses = 4;
  c.views_per_pose = 2;
  c.test_per_split = 3;
  c.reference_bins = 64;
  return c;
}

const Dataset& tiny_dataset() {
  static const Dataset data = generate_dataset(SceneSpec::desk_default(), tiny_counts(), 17);
  return data;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("narf_test_scene_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

double elevation_of(const Camera& cam) {
  const Vec3 eye = cam.camera_to_world.translation;
  return std::asin(eye.y() / eye.norm());
}

bool same_pose(const PoseConfig& a, const PoseConfig& b) {
  if (a.theta.size() != b.theta.size()) return false;
  for (std::size_t i = 0; i < a.theta.size(); ++i) {
    if (a.theta[i] != b.theta[i] || a.zeta[i] != b.zeta[i]) return false;
  }
  return a.root.rotation == b.root.rotation && a.root.translation == b.root.translation;
}

}  // namespace

TEST_CASE("analytic density") {
  const SceneSpec scene = SceneSpec::desk_default();
  PoseConfig pose;
  pose.theta.assign(3, Vec3::Zero());
  pose.zeta = scene.instances[0].zeta;
  const PosedScene posed = PosedScene::build(scene, 0, pose);

  const Vec3 mid = 0.5 * (posed.start[1] + posed.end[1]);
  const DensitySample inside = analytic_density(posed, mid);
  CHECK(inside.sigma == scene.sigma_max);
  CHECK(inside.part == 1);
  CHECK((inside.color - posed.shade(1, mid)).norm() == 0.0);

  CHECK(analytic_density(posed, Vec3(10, 0, 0)).sigma == 0.0);
  CHECK(analytic_density(posed, Vec3(0, 10, 0)).part == -1);

  // Just outside the last capsule, beside the middle of its segment.
  const Vec3 a = posed.start[2], b = posed.end[2];
  const Vec3 side = (b - a).unitOrthogonal();
  const Vec3 out = 0.5 * (a + b) + (posed.radius[2] + 1e-3) * side;
  CHECK(point_segment_distance(out, a, b) == doctest::Approx(posed.radius[2] + 1e-3).epsilon(1e-12));
  CHECK(analytic_density(posed, out).sigma == 0.0);
}

TEST_CASE("a zero-density scene renders black with zero mask") {
  PosedScene empty;
  empty.start = {Vec3(-0.3, 0, 0)};
  empty.end = {Vec3(0.3, 0, 0)};
  empty.radius = {0.2};
  empty.albedo = {Vec3(1, 1, 1)};
  empty.sigma_max = 0.0;
  const Camera cam = Camera::look_at(Vec3(0, 0, 3), Vec3::Zero(), Vec3::UnitY(), 75.0, 32, 32);
  const ReferenceImage img = render_reference(empty, cam, 64);
  for (double v : img.rgb.values()) CHECK(v == 0.0);
  for (double v : img.mask.values()) CHECK(v == 0.0);
}

TEST_CASE("reference images barely change when the bin count doubles") {
  const Dataset& data = tiny_dataset();
  const DatasetRecord& r = data.split(kTrainSplit)[3];
  const ReferenceImage a = render_reference(data.scene, r.instance, r.pose, r.camera, 128);
  const ReferenceImage b = render_reference(data.scene, r.instance, r.pose, r.camera, 256);
  CHECK(max_abs_difference(a.rgb, b.rgb) < 1.0 / 255.0);
  CHECK(max_abs_difference(a.mask, b.mask) < 1.0 / 255.0);
}

TEST_CASE("a straight two-bone chain seen side-on has the capsule silhouette area") {
  const double r = 0.1, half = 0.3;
  PosedScene chain;
  chain.start = {Vec3(-half, 0, 0), Vec3(0, 0, 0)};
  chain.end = {Vec3(0, 0, 0), Vec3(half, 0, 0)};
  chain.radius = {r, r};
  chain.albedo = {Vec3(1, 0, 0), Vec3(0, 1, 0)};
  chain.sigma_max = 200.0;
  // Far camera with a long lens: 100 px per scene unit at the object.
  const double distance = 20.0, focal = 2000.0;
  const Camera cam = Camera::look_at(Vec3(0, 0, distance), Vec3::Zero(), Vec3::UnitY(), focal, 128, 128);
  const ReferenceImage img = render_reference(chain, cam, 64);
  std::size_t covered = 0;
  for (double m : img.mask.values()) covered += m > 0.5;
  const double scale = focal / distance;
  const double analytic = (2.0 * r * 2.0 * half + std::numbers::pi * r * r) * scale * scale;
  CHECK(std::abs(covered - analytic) / analytic < 0.02);
}

TEST_CASE("dataset generation is byte-identical for the same seed") {
  const Dataset a = generate_dataset(SceneSpec::desk_default(), tiny_counts(), 5);
  const Dataset b = generate_dataset(SceneSpec::desk_default(), tiny_counts(), 5);
  const fs::path da = temp_dir("a"), db = temp_dir("b");
  save_dataset(a, da);
  save_dataset(b, db);
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(da)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), da);
    REQUIRE(fs::exists(db / rel));
    CHECK(slurp(entry.path()) == slurp(db / rel));
    ++files;
  }
  std::size_t files_b = 0;
  for (const auto& entry : fs::recursive_directory_iterator(db)) files_b += entry.is_regular_file();
  CHECK(files == files_b);
  CHECK(files > 10);
  fs::remove_all(da);
  fs::remove_all(db);
}

TEST_CASE("saved datasets load back unchanged") {
  const Dataset& data = tiny_dataset();
  const fs::path dir = temp_dir("roundtrip");
  save_dataset(data, dir);
  const Dataset back = load_dataset(dir);
  CHECK(back.seed == data.seed);
  CHECK(back.scene.to_json() == data.scene.to_json());
  for (const auto& [name, records] : data.splits) {
    const auto& loaded = back.split(name);
    REQUIRE(loaded.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
      CHECK(bit_identical(loaded[i].rgb, records[i].rgb));
      CHECK(bit_identical(loaded[i].mask, records[i].mask));
      CHECK(loaded[i].pose_id == records[i].pose_id);
      CHECK(loaded[i].instance == records[i].instance);
      CHECK(pose_to_json(loaded[i].pose) == pose_to_json(records[i].pose));
      CHECK(loaded[i].camera.to_json() == records[i].camera.to_json());
    }
  }
  const Dataset only = load_dataset(dir, {"novel_pose_same_view"});
  CHECK(only.splits.size() == 1);
  CHECK_THROWS_AS(load_dataset(dir, {"no_such_split"}), Error);
  fs::remove_all(dir);
}

TEST_CASE("split semantics") {
  const Dataset& data = tiny_dataset();
  const auto& train = data.split(kTrainSplit);
  const std::size_t train_poses = data.counts.train_poses;
  CHECK(train.size() == train_poses * data.counts.views_per_pose);
  std::vector<const PoseConfig*> train_pose_by_id(train_poses, nullptr);
  for (const auto& r : train) {
    REQUIRE(r.pose_id < train_poses);
    train_pose_by_id[r.pose_id] = &r.pose;
    CHECK(data.scene.train_elevation.contains(elevation_of(r.camera) + 0.0));
  }
  std::set<std::size_t> novel_ids;
  for (const std::string& split : test_split_names()) {
    const auto& records = data.split(split);
    CHECK(records.size() == data.counts.test_per_split);
    for (const auto& r : records) {
      const double elev = elevation_of(r.camera);
      if (is_novel_view_split(split)) {
        CHECK(data.scene.novel_elevation.contains(elev + 0.0));
        CHECK_FALSE(data.scene.train_elevation.contains(elev));
      } else {
        CHECK(data.scene.train_elevation.contains(elev + 0.0));
      }
      if (is_novel_pose_split(split)) {
        CHECK(r.pose_id >= train_poses);
        CHECK(novel_ids.insert(r.pose_id).second);
        for (const PoseConfig* p : train_pose_by_id) CHECK_FALSE(same_pose(*p, r.pose));
      } else {
        REQUIRE(r.pose_id < train_poses);
        CHECK(same_pose(*train_pose_by_id[r.pose_id], r.pose));
      }
    }
  }
  CHECK_FALSE(data.scene.train_elevation.overlaps(data.scene.novel_elevation));
}

TEST_CASE("every object point lies inside the unit sphere") {
  const Dataset& data = tiny_dataset();
  CHECK(data.scene.max_extent() < 1.0);
  for (const auto& [name, records] : data.splits) {
    for (const auto& r : records) {
      const PosedScene posed = PosedScene::build(data.scene, r.instance, r.pose);
      for (std::size_t b = 0; b < posed.start.size(); ++b) {
        CHECK(posed.start[b].norm() + posed.radius[b] < 1.0);
        CHECK(posed.end[b].norm() + posed.radius[b] < 1.0);
      }
    }
  }
  const SceneSpec multi = SceneSpec::multi_instance(5, 3);
  CHECK(multi.max_extent() < 1.0);
}

TEST_CASE("mask pixels agree with analytic ray hits up to a one-pixel band") {
  const Dataset& data = tiny_dataset();
  std::size_t foreground = 0;
  for (const auto& [name, records] : data.splits) {
    for (const auto& r : records) {
      const PosedScene posed = PosedScene::build(data.scene, r.instance, r.pose);
      const int w = r.camera.width, h = r.camera.height;
      std::vector<char> hit(static_cast<std::size_t>(w * h), 0);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const Ray ray = camera_ray(r.camera, {x, y});
          for (std::size_t b = 0; b < posed.start.size() && ray.hit; ++b) {
            double lo = 0, hi = 0;
            if (ray_capsule_interval(ray.origin, ray.direction, posed.start[b], posed.end[b], posed.radius[b], lo, hi) &&
                hi > lo) {
              hit[y * w + x] = 1;
            }
          }
        }
      }
      auto near_miss = [&](int x, int y) {
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = x + dx, ny = y + dy;
            if (nx >= 0 && ny >= 0 && nx < w && ny < h && !hit[ny * w + nx]) return true;
          }
        }
        return false;
      };
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double m = r.mask[y * w + x];
          if (m == 1.0) {
            ++foreground;
            CHECK(hit[y * w + x]);
          } else if (m > 0.0) {
            CHECK(hit[y * w + x]);
            CHECK(near_miss(x, y));
          } else if (hit[y * w + x]) {
            CHECK(near_miss(x, y));
          }
        }
      }
    }
  }
  CHECK(foreground > 0);
}

TEST_CASE("scene validation") {
  SceneSpec s = SceneSpec::desk_default();
  s.instances[0].radius.pop_back();
  CHECK_THROWS_AS(s.validate(), Error);
  SceneSpec big = SceneSpec::desk_default();
  big.instances[0].zeta = {0.5, 0.5, 0.5};
  CHECK_THROWS_AS(big.validate(), Error);
  CHECK(SceneSpec::from_json(SceneSpec::desk_default().to_json()).to_json() == SceneSpec::desk_default().to_json());
}

TEST_CASE("dataset counts must be positive") {
  DatasetCounts c = tiny_counts();
  c.test_per_split = 0;
  CHECK_THROWS_AS(c.validate(), Error);
}
