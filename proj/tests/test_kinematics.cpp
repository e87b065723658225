#include "doctest.h"

#include "narf/error.hpp"
#include "narf/kinematics.hpp"
#include "narf/random.hpp"

#include <cmath>
#include <numbers>
#include <vector>

using namespace narf;

namespace {

constexpr double kPi = std::numbers::pi;

Vec3 random_unit(Rng& rng) {
  Vec3 v(normal01(rng), normal01(rng), normal01(rng));
  return v.normalized();
}

Vec3 random_rotation_vector(Rng& rng, double max_angle) { return random_unit(rng) * uniform(rng, 0.0, max_angle); }

KinematicTree random_tree(Rng& rng, std::size_t bones) {
  std::vector<int> parents{-1};
  std::vector<Vec3> axes;
  for (std::size_t j = 1; j <= bones; ++j) {
    parents.push_back(static_cast<int>(uniform_index(rng, j)));
    axes.push_back(random_unit(rng));
  }
  return KinematicTree(parents, axes);
}

PoseConfig random_pose(Rng& rng, const KinematicTree& tree) {
  PoseConfig pose;
  pose.root.rotation = rotation_from_axis_angle(random_rotation_vector(rng, 3.0));
  pose.root.translation = Vec3(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
  for (std::size_t b = 0; b < tree.bone_count(); ++b) {
    pose.theta.push_back(random_rotation_vector(rng, 3.0));
    pose.zeta.push_back(uniform(rng, 0.1, 2.0));
  }
  return pose;
}

// Straightforward recursion through Eigen's own angle-axis rotation.
Mat4 naive_joint(const KinematicTree& tree, const PoseConfig& pose, int joint) {
  if (joint == 0) return pose.root.matrix();
  const std::size_t bone = static_cast<std::size_t>(joint - 1);
  Mat4 rot = Mat4::Identity();
  const Vec3& w = pose.theta[bone];
  if (w.norm() > 0.0) rot.topLeftCorner<3, 3>() = Eigen::AngleAxisd(w.norm(), w.normalized()).toRotationMatrix();
  Mat4 trans = Mat4::Identity();
  trans.topRightCorner<3, 1>() = pose.zeta[bone] * tree.axes()[bone];
  return naive_joint(tree, pose, tree.parents()[joint]) * rot * trans;
}

double max_diff(const Mat4& a, const Mat4& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("local transform examples") {
  const Mat4 a = local_transform(Vec3::Zero(), 1.0, Vec3::UnitX());
  CHECK((a.topLeftCorner<3, 3>() - Mat3::Identity()).norm() == 0.0);
  CHECK((a.topRightCorner<3, 1>() - Vec3(1, 0, 0)).norm() == 0.0);

  const Mat4 b = local_transform(Vec3(0, 0, kPi / 2), 1.0, Vec3::UnitX());
  const Vec3 child = (b * Eigen::Vector4d(0, 0, 0, 1)).head<3>();
  CHECK((child - Vec3(0, 1, 0)).norm() < 1e-12);
  // Same thing by explicit matrices.
  Mat4 rz = Mat4::Identity();
  rz.topLeftCorner<3, 3>() << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  Mat4 tx = Mat4::Identity();
  tx(0, 3) = 1.0;
  CHECK(max_diff(b, rz * tx) < 1e-12);

  const Mat4 c = local_transform(Vec3::Zero(), 2.0, Vec3::UnitY());
  CHECK((c.topRightCorner<3, 1>() - Vec3(0, 2, 0)).norm() == 0.0);
}

TEST_CASE("local transform rejects a non-unit axis and a non-positive length") {
  CHECK_THROWS_AS(local_transform(Vec3::Zero(), 1.0, Vec3(1, 1, 0)), Error);
  CHECK_THROWS_AS(local_transform(Vec3::Zero(), 0.0, Vec3::UnitX()), Error);
}

TEST_CASE("straight chain forward kinematics") {
  const KinematicTree tree = KinematicTree::chain(2);
  PoseConfig pose;
  pose.theta = {Vec3::Zero(), Vec3::Zero()};
  pose.zeta = {1.0, 1.0};
  const auto g = forward_kinematics(tree, pose);
  REQUIRE(g.size() == 2);
  CHECK((g[1].translation - Vec3(2, 0, 0)).norm() < 1e-15);

  pose.theta[1] = Vec3(0, 0, kPi / 2);
  const auto h = forward_kinematics(tree, pose);
  CHECK((h[1].rotation - rotation_from_axis_angle(Vec3(0, 0, kPi / 2))).norm() < 1e-12);
  CHECK((h[1].translation - Vec3(1, 1, 0)).norm() < 1e-12);
  CHECK(max_diff(h[1].matrix(), naive_joint(tree, pose, 2)) < 1e-12);
}

TEST_CASE("forward kinematics rejects mismatched pose dimensions") {
  const KinematicTree tree = KinematicTree::chain(3);
  PoseConfig pose;
  pose.theta = {Vec3::Zero(), Vec3::Zero()};
  pose.zeta = {1.0, 1.0};
  CHECK_THROWS_AS(forward_kinematics(tree, pose), Error);
}

TEST_CASE("pose validation") {
  const KinematicTree tree = KinematicTree::chain(1);
  PoseConfig pose;
  pose.theta = {Vec3::Zero()};
  pose.zeta = {-1.0};
  CHECK_THROWS_AS(pose.validate(tree), Error);
  pose.zeta = {1.0};
  pose.theta = {Vec3(0, kPi, 0)};
  CHECK_THROWS_AS(pose.validate(tree), Error);
  pose.theta = {Vec3(0, 3.1, 0)};
  CHECK_NOTHROW(pose.validate(tree));
}

TEST_CASE("tree validation") {
  CHECK_THROWS_AS(KinematicTree({0, 0}, {Vec3::UnitX()}), Error);
  CHECK_THROWS_AS(KinematicTree({-1, 2, 1}, {Vec3::UnitX(), Vec3::UnitX()}), Error);
  CHECK_THROWS_AS(KinematicTree({-1, 0}, {Vec3(2, 0, 0)}), Error);
  CHECK_THROWS_AS(KinematicTree({-1, 0}, {}), Error);
}

TEST_CASE("preorder visits parents before children") {
  const KinematicTree tree({-1, 0, 0, 1, 2, 3}, std::vector<Vec3>(5, Vec3::UnitY()));
  const auto order = tree.preorder();
  REQUIRE(order.size() == 5);
  CHECK(order == std::vector<std::size_t>{0, 2, 4, 1, 3});
}

TEST_CASE("forward kinematics agrees with a naive recursion on random trees") {
  Rng rng(11);
  double worst = 0.0;
  for (int trial = 0; trial < 300; ++trial) {
    const KinematicTree tree = random_tree(rng, 1 + uniform_index(rng, 8));
    const PoseConfig pose = random_pose(rng, tree);
    const auto g = forward_kinematics(tree, pose);
    for (std::size_t b = 0; b < tree.bone_count(); ++b) {
      worst = std::max(worst, max_diff(g[b].matrix(), naive_joint(tree, pose, static_cast<int>(b) + 1)));
      CHECK(g[b].is_valid());
    }
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("splitting the chain product at any joint gives the same global matrix") {
  Rng rng(12);
  const KinematicTree tree = KinematicTree::chain(6);
  const PoseConfig pose = random_pose(rng, tree);
  const auto frames = joint_frames(tree, pose);
  std::vector<Mat4> locals;
  for (std::size_t b = 0; b < 6; ++b) locals.push_back(local_transform(pose.theta[b], pose.zeta[b], tree.axes()[b]));
  const Mat4 end = frames.back().matrix();
  for (std::size_t split = 0; split <= 6; ++split) {
    Mat4 head = pose.root.matrix();
    for (std::size_t b = 0; b < split; ++b) head = head * locals[b];
    Mat4 tail = Mat4::Identity();
    for (std::size_t b = split; b < 6; ++b) tail = tail * locals[b];
    CHECK(max_diff(head * tail, end) < 1e-12);
    CHECK(max_diff(head, frames[split].matrix()) < 1e-12);
  }
}

TEST_CASE("world to local") {
  Rng rng(13);
  const Vec3 x(0.3, -0.2, 0.9);
  CHECK((world_to_local(x, RigidTransform::identity()) - x).norm() == 0.0);
  for (int i = 0; i < 100; ++i) {
    RigidTransform l;
    l.rotation = rotation_from_axis_angle(random_rotation_vector(rng, 3.1));
    l.translation = Vec3(uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, -2, 2));
    CHECK(world_to_local(l.translation, l).norm() < 1e-12);
    const Vec3 p(uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, -2, 2));
    CHECK((l.apply(world_to_local(p, l)) - p).norm() < 1e-12);
    const Vec3 d = random_unit(rng);
    CHECK((l.rotation * direction_to_local(d, l) - d).norm() < 1e-12);
  }
}

TEST_CASE("twist examples") {
  CHECK(twist_of(RigidTransform::identity()).norm() == 0.0);

  RigidTransform t;
  t.translation = Vec3(1, 2, 3);
  Twist expected;
  expected << 0, 0, 0, 1, 2, 3;
  CHECK((twist_of(t) - expected).norm() < 1e-15);

  RigidTransform r;
  r.rotation << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  Twist expected_r;
  expected_r << 0, 0, kPi / 2, 0, 0, 0;
  CHECK((twist_of(r) - expected_r).norm() < 1e-12);
}

TEST_CASE("twist is rejected near the log-map singularity") {
  RigidTransform r;
  r.rotation = rotation_from_axis_angle(Vec3(0, kPi - 1e-8, 0));
  CHECK_THROWS_AS(twist_of(r), Error);
}

TEST_CASE("twist exp of log reconstructs the transform") {
  Rng rng(14);
  for (int i = 0; i < 500; ++i) {
    RigidTransform l;
    l.rotation = rotation_from_axis_angle(random_rotation_vector(rng, kPi - 1e-3));
    l.translation = Vec3(uniform(rng, -3, 3), uniform(rng, -3, 3), uniform(rng, -3, 3));
    const RigidTransform back = transform_from_twist(twist_of(l));
    CHECK(max_diff(back.matrix(), l.matrix()) < 1e-9);
  }
}

TEST_CASE("axis-angle round trip including angles near pi") {
  Rng rng(15);
  for (int i = 0; i < 500; ++i) {
    const Vec3 w = random_rotation_vector(rng, kPi - 1e-7);
    const Mat3 r = rotation_from_axis_angle(w);
    CHECK((rotation_from_axis_angle(axis_angle_from_rotation(r)) - r).norm() < 1e-9);
  }
}
