// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <span>

namespace vaguide {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3 &a, const Vec3 &b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3 &a, const Vec3 &b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3 &a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3 &a, const Vec3 &b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3 &a, const Vec3 &b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3 &a) { return std::sqrt(dot(a, a)); }
Vec3 normalized(const Vec3 &a);

struct Quaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  static Quaternion identity() { return {}; }
  static Quaternion from_axis_angle(const Vec3 &axis, double angle_rad);
  // Orthonormal right-handed basis given as the images of the local x, y, z axes.
  static Quaternion from_basis(const Vec3 &x_axis, const Vec3 &y_axis, const Vec3 &z_axis);

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  Quaternion conjugate() const { return {w, -x, -y, -z}; }
  Vec3 rotate(const Vec3 &v) const;

  friend bool operator==(const Quaternion &, const Quaternion &) = default;
};

Quaternion operator*(const Quaternion &a, const Quaternion &b);

// Unit-norm, w >= 0. Zero quaternions are rejected.
Quaternion canonical(const Quaternion &q);

// Rigid probe pose. Position in mm; orientation always stored canonical so
// that equal rotations compare equal.
class Pose {
 public:
  Pose() = default;
  Pose(const Vec3 &position, const Quaternion &orientation);

  static Pose identity() { return {}; }
  static Pose translation(double x, double y, double z) { return Pose({x, y, z}, Quaternion::identity()); }

  const Vec3 &position() const { return position_; }
  const Quaternion &orientation() const { return orientation_; }

  // Image of a point given in this pose's local frame.
  Vec3 transform(const Vec3 &local) const { return position_ + orientation_.rotate(local); }

  // [px, py, pz, qw, qx, qy, qz]
  std::array<double, 7> to_array() const;
  static Pose from_array(std::span<const double> v);

  friend bool operator==(const Pose &, const Pose &) = default;

 private:
  Vec3 position_{0.0, 0.0, 0.0};
  Quaternion orientation_{};
};

// Relative motion: translation (mm) in the source frame, then intrinsic
// Z-Y-X Euler angles (deg) stored as [rx, ry, rz], each in (-180, 180].
struct Action6 {
  Vec3 translation{0.0, 0.0, 0.0};
  Vec3 rotation_deg{0.0, 0.0, 0.0};

  static Action6 zero() { return {}; }
  // [tx, ty, tz, rx, ry, rz]
  std::array<double, 6> to_array() const;
  static Action6 from_array(std::span<const double> v);
  double operator[](std::size_t i) const { return i < 3 ? translation[i] : rotation_deg[i - 3]; }

  friend bool operator==(const Action6 &, const Action6 &) = default;
};

Quaternion quaternion_from_euler_zyx_deg(const Vec3 &rotation_deg);
Vec3 euler_zyx_deg_from_quaternion(const Quaternion &q);

Pose compose(const Pose &a, const Pose &b);
Pose inverse(const Pose &p);

// Motion taking p_i to p_j, expressed in p_i's frame (T_i^-1 T_j).
Action6 relative_action(const Pose &p_i, const Pose &p_j);
Pose apply_action(const Pose &p, const Action6 &a);

// Linear position blend + shortest-arc slerp. s must lie in [0, 1].
Pose interpolate(const Pose &p0, const Pose &p1, double s);

struct PoseDistance {
  double trans_mm = 0.0;
  double rot_deg = 0.0;
};

PoseDistance pose_distance(const Pose &p0, const Pose &p1);

}  // namespace vaguide
