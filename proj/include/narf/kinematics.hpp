#pragma once

// Kinematic trees, explicit forward kinematics and rigid-transform helpers.
//
// Conventions: homogeneous matrices act on column vectors. A joint's global
// frame maps coordinates expressed in that joint's frame to world space.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstddef>
#include <vector>

namespace narf {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Twist = Eigen::Matrix<double, 6, 1>;

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }
  static RigidTransform from_matrix(const Mat4& m);
  Mat4 matrix() const;
  RigidTransform operator*(const RigidTransform& rhs) const;
  RigidTransform inverse() const;
  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  // RᵀR = I and det R = +1 within tol.
  bool is_valid(double tol = 1e-9) const;
};

// P bones joining P+1 joints. Joint 0 is the root; bone b ends at joint b+1
// and starts at joint parent[b+1].
class KinematicTree {
 public:
  KinematicTree() = default;
  // parents has one entry per joint, parents[0] == -1. axes has one unit
  // vector per bone giving the direction its length translates along.
  KinematicTree(std::vector<int> parents, std::vector<Vec3> axes);

  // Straight chain of `bones` bones along +x.
  static KinematicTree chain(std::size_t bones);

  std::size_t bone_count() const { return axes_.size(); }
  std::size_t joint_count() const { return parents_.size(); }
  const std::vector<int>& parents() const { return parents_; }
  const std::vector<Vec3>& axes() const { return axes_; }
  // Joint index where bone b starts.
  int parent_joint(std::size_t bone) const { return parents_[bone + 1]; }
  // Bones in depth-first pre-order from the root.
  std::vector<std::size_t> preorder() const;

 private:
  std::vector<int> parents_;
  std::vector<Vec3> axes_;
};

// Pose configuration {T0, zeta, theta}.
struct PoseConfig {
  RigidTransform root;
  // Axis-angle rotation of each joint relative to its parent, radians.
  std::vector<Vec3> theta;
  // Bone lengths.
  std::vector<double> zeta;

  // Throws Error when dimensions disagree with the tree, a length is not
  // positive, or a rotation leaves the principal range.
  void validate(const KinematicTree& tree) const;
};

Mat3 rotation_from_axis_angle(const Vec3& axis_angle);
// Matrix logarithm of a rotation as an axis-angle vector with norm in [0, pi].
Vec3 axis_angle_from_rotation(const Mat3& rotation);
double rotation_angle(const Mat3& rotation);

// Rot(theta) * Trans(zeta * axis). Throws Error for a non-unit axis or
// non-positive length.
Mat4 local_transform(const Vec3& theta, double zeta, const Vec3& axis);

// Global transform of every bone's end joint, indexed by bone. The global
// frame of joint j is T0 * L(a1) * ... * L(j) along the root-to-j path.
std::vector<RigidTransform> forward_kinematics(const KinematicTree& tree, const PoseConfig& pose);

// Global frame of every joint, including the root at index 0.
std::vector<RigidTransform> joint_frames(const KinematicTree& tree, const PoseConfig& pose);

// R^-1 (x - t)
Vec3 world_to_local(const Vec3& x, const RigidTransform& l);
// R^-1 d
Vec3 direction_to_local(const Vec3& d, const RigidTransform& l);

// (log R, t). Throws Error when the rotation angle is within 1e-6 of pi.
Twist twist_of(const RigidTransform& l);
RigidTransform transform_from_twist(const Twist& xi);

}  // namespace narf
