#include "narf/kinematics.hpp"

#include "narf/error.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace narf {

namespace {

Vec3 vee(const Mat3& m) { return {m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1)}; }

Mat3 hat(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

constexpr double kTwistSingularity = 1e-6;

}  // namespace

// ---- RigidTransform ----------------------------------------------------------

RigidTransform RigidTransform::from_matrix(const Mat4& m) {
  RigidTransform t;
  t.rotation = m.topLeftCorner<3, 3>();
  t.translation = m.topRightCorner<3, 1>();
  return t;
}

Mat4 RigidTransform::matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

RigidTransform RigidTransform::operator*(const RigidTransform& rhs) const {
  return {rotation * rhs.rotation, rotation * rhs.translation + translation};
}

RigidTransform RigidTransform::inverse() const {
  const Mat3 rt = rotation.transpose();
  return {rt, -(rt * translation)};
}

bool RigidTransform::is_valid(double tol) const {
  const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
}

// ---- KinematicTree -----------------------------------------------------------

KinematicTree::KinematicTree(std::vector<int> parents, std::vector<Vec3> axes)
    : parents_(std::move(parents)), axes_(std::move(axes)) {
  if (parents_.empty() || parents_[0] != -1) throw Error("KinematicTree: joint 0 must be the root (parent -1)");
  if (axes_.size() + 1 != parents_.size()) {
    throw Error("KinematicTree: expected " + std::to_string(parents_.size() - 1) + " bone axes, got " +
                std::to_string(axes_.size()));
  }
  const int joints = static_cast<int>(parents_.size());
  for (int j = 1; j < joints; ++j) {
    const int p = parents_[j];
    if (p < 0 || p >= joints || p == j) {
      throw Error("KinematicTree: joint " + std::to_string(j) + " has invalid parent " + std::to_string(p));
    }
  }
  // Every joint must reach the root without revisiting a joint.
  for (int j = 1; j < joints; ++j) {
    int cur = j;
    int steps = 0;
    while (cur != 0) {
      cur = parents_[cur];
      if (++steps > joints) throw Error("KinematicTree: parent links contain a cycle");
    }
  }
  for (std::size_t b = 0; b < axes_.size(); ++b) {
    if (std::abs(axes_[b].norm() - 1.0) > 1e-9) {
      throw Error("KinematicTree: axis of bone " + std::to_string(b) + " is not unit length");
    }
  }
}

KinematicTree KinematicTree::chain(std::size_t bones) {
  std::vector<int> parents(bones + 1);
  parents[0] = -1;
  for (std::size_t j = 1; j <= bones; ++j) parents[j] = static_cast<int>(j) - 1;
  return KinematicTree(std::move(parents), std::vector<Vec3>(bones, Vec3::UnitX()));
}

std::vector<std::size_t> KinematicTree::preorder() const {
  std::vector<std::size_t> order;
  order.reserve(bone_count());
  std::vector<int> stack{0};
  while (!stack.empty()) {
    const int joint = stack.back();
    stack.pop_back();
    if (joint > 0) order.push_back(static_cast<std::size_t>(joint - 1));
    // Push children in reverse so the lowest-numbered child is visited first.
    for (int c = static_cast<int>(parents_.size()) - 1; c >= 1; --c) {
      if (parents_[c] == joint) stack.push_back(c);
    }
  }
  return order;
}

// ---- PoseConfig --------------------------------------------------------------

void PoseConfig::validate(const KinematicTree& tree) const {
  if (theta.size() != tree.bone_count() || zeta.size() != tree.bone_count()) {
    throw Error("PoseConfig: expected " + std::to_string(tree.bone_count()) + " bones, got theta " +
                std::to_string(theta.size()) + " / zeta " + std::to_string(zeta.size()));
  }
  for (std::size_t b = 0; b < zeta.size(); ++b) {
    if (!(zeta[b] > 0.0)) throw Error("PoseConfig: zeta[" + std::to_string(b) + "] must be > 0");
    if (!(theta[b].norm() < std::numbers::pi)) {
      throw Error("PoseConfig: theta[" + std::to_string(b) + "] outside the principal range");
    }
  }
  if (!root.is_valid()) throw Error("PoseConfig: root rotation is not a rotation matrix");
}

// ---- rotations ---------------------------------------------------------------

Mat3 rotation_from_axis_angle(const Vec3& w) {
  const double angle = w.norm();
  const Mat3 k = hat(w);
  if (angle < 1e-8) {
    // Second-order series; exact to double precision at this size.
    return Mat3::Identity() + k + 0.5 * k * k;
  }
  const double a = std::sin(angle) / angle;
  const double b = (1.0 - std::cos(angle)) / (angle * angle);
  return Mat3::Identity() + a * k + b * k * k;
}

double rotation_angle(const Mat3& r) {
  const double s = 0.5 * vee(r).norm();
  const double c = 0.5 * (r.trace() - 1.0);
  return std::atan2(s, c);
}

Vec3 axis_angle_from_rotation(const Mat3& r) {
  const double angle = rotation_angle(r);
  const Vec3 v = vee(r);
  if (angle < 1e-8) return 0.5 * v;
  if (std::numbers::pi - angle < 1e-4) {
    // Near pi the antisymmetric part vanishes; recover the axis from the
    // symmetric part R + I = 2 a a^T (1 - cos) + ...
    const Mat3 b = 0.5 * (r + Mat3::Identity());
    Eigen::Index col = 0;
    b.diagonal().maxCoeff(&col);
    Vec3 axis = b.col(col).normalized();
    if (axis.dot(v) < 0.0) axis = -axis;
    return angle * axis;
  }
  return (angle / (2.0 * std::sin(angle))) * v;
}

// ---- kinematics --------------------------------------------------------------

Mat4 local_transform(const Vec3& theta, double zeta, const Vec3& axis) {
  if (std::abs(axis.norm() - 1.0) > 1e-9) throw Error("local_transform: axis must be unit length");
  if (!(zeta > 0.0)) throw Error("local_transform: bone length must be > 0");
  Mat4 rot = Mat4::Identity();
  rot.topLeftCorner<3, 3>() = rotation_from_axis_angle(theta);
  Mat4 trans = Mat4::Identity();
  trans.topRightCorner<3, 1>() = zeta * axis;
  return rot * trans;
}

std::vector<RigidTransform> joint_frames(const KinematicTree& tree, const PoseConfig& pose) {
  pose.validate(tree);
  const std::size_t joints = tree.joint_count();
  std::vector<Mat4> global(joints);
  std::vector<bool> done(joints, false);
  global[0] = pose.root.matrix();
  done[0] = true;
  // Parents are resolved on demand, so any valid parent numbering works.
  for (std::size_t j = 1; j < joints; ++j) {
    std::vector<std::size_t> path;
    std::size_t cur = j;
    while (!done[cur]) {
      path.push_back(cur);
      cur = static_cast<std::size_t>(tree.parents()[cur]);
    }
    for (auto it = path.rbegin(); it != path.rend(); ++it) {
      const std::size_t joint = *it;
      const std::size_t bone = joint - 1;
      global[joint] = global[static_cast<std::size_t>(tree.parents()[joint])] *
                      local_transform(pose.theta[bone], pose.zeta[bone], tree.axes()[bone]);
      done[joint] = true;
    }
  }
  std::vector<RigidTransform> out;
  out.reserve(joints);
  for (const Mat4& m : global) out.push_back(RigidTransform::from_matrix(m));
  return out;
}

std::vector<RigidTransform> forward_kinematics(const KinematicTree& tree, const PoseConfig& pose) {
  std::vector<RigidTransform> frames = joint_frames(tree, pose);
  frames.erase(frames.begin());
  return frames;
}

Vec3 world_to_local(const Vec3& x, const RigidTransform& l) {
  return l.rotation.transpose() * (x - l.translation);
}

Vec3 direction_to_local(const Vec3& d, const RigidTransform& l) { return l.rotation.transpose() * d; }

Twist twist_of(const RigidTransform& l) {
  if (std::numbers::pi - rotation_angle(l.rotation) < kTwistSingularity) {
    throw Error("twist_of: rotation angle within 1e-6 of pi (log map singular)");
  }
  Twist xi;
  xi.head<3>() = axis_angle_from_rotation(l.rotation);
  xi.tail<3>() = l.translation;
  return xi;
}

RigidTransform transform_from_twist(const Twist& xi) {
  return {rotation_from_axis_angle(xi.head<3>()), xi.tail<3>()};
}

}  // namespace narf
