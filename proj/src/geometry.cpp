// SPDX-License-Identifier: Apache-2.0
#include "vaguide/geometry.hpp"

#include <algorithm>
#include <numbers>

#include "vaguide/error.hpp"

namespace vaguide {
namespace {

constexpr double kDegPerRad = 180.0 / std::numbers::pi;

double wrap_deg(double deg) {
  // atan2 yields [-180, 180]; the open end of the range is -180.
  return deg <= -180.0 ? deg + 360.0 : deg;
}

}  // namespace

Vec3 normalized(const Vec3 &a) {
  const double n = norm(a);
  if (!(n > 0.0)) fail(ErrorCode::invalid_argument, "cannot normalize a zero vector");
  return (1.0 / n) * a;
}

Quaternion Quaternion::from_axis_angle(const Vec3 &axis, double angle_rad) {
  const Vec3 u = normalized(axis);
  const double s = std::sin(0.5 * angle_rad);
  return canonical({std::cos(0.5 * angle_rad), s * u[0], s * u[1], s * u[2]});
}

Quaternion Quaternion::from_basis(const Vec3 &xa, const Vec3 &ya, const Vec3 &za) {
  // Columns of the rotation matrix are the basis vectors.
  const double m00 = xa[0], m01 = ya[0], m02 = za[0];
  const double m10 = xa[1], m11 = ya[1], m12 = za[1];
  const double m20 = xa[2], m21 = ya[2], m22 = za[2];
  const double trace = m00 + m11 + m22;
  Quaternion q;
  if (trace > 0.0) {
    const double s = 2.0 * std::sqrt(1.0 + trace);
    q = {0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s};
  } else if (m00 > m11 && m00 > m22) {
    const double s = 2.0 * std::sqrt(1.0 + m00 - m11 - m22);
    q = {(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s};
  } else if (m11 > m22) {
    const double s = 2.0 * std::sqrt(1.0 + m11 - m00 - m22);
    q = {(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s};
  } else {
    const double s = 2.0 * std::sqrt(1.0 + m22 - m00 - m11);
    q = {(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s};
  }
  return canonical(q);
}

Vec3 Quaternion::rotate(const Vec3 &v) const {
  // v' = v + 2w (u x v) + 2 u x (u x v), u = vector part
  const Vec3 u{x, y, z};
  const Vec3 t = 2.0 * cross(u, v);
  return v + w * t + cross(u, t);
}

Quaternion operator*(const Quaternion &a, const Quaternion &b) {
  // Terms grouped in pairs so conj(q) * q cancels to an exact identity.
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          (a.w * b.x + a.x * b.w) + (a.y * b.z - a.z * b.y),
          (a.w * b.y + a.y * b.w) + (a.z * b.x - a.x * b.z),
          (a.w * b.z + a.z * b.w) + (a.x * b.y - a.y * b.x)};
}

Quaternion canonical(const Quaternion &q) {
  const double n = q.norm();
  if (!(n > 0.0) || !std::isfinite(n)) fail(ErrorCode::invalid_argument, "quaternion must be finite and nonzero");
  // Already-unit inputs pass through untouched so canonical() is idempotent
  // and serialized poses read back bit-identically.
  Quaternion r = std::abs(n - 1.0) <= 1e-14 ? q : Quaternion{q.w / n, q.x / n, q.y / n, q.z / n};
  bool flip = r.w < 0.0;
  if (r.w == 0.0) {
    // Tie on the hemisphere boundary: first nonzero component positive.
    flip = r.x < 0.0 || (r.x == 0.0 && (r.y < 0.0 || (r.y == 0.0 && r.z < 0.0)));
  }
  if (flip) r = {-r.w, -r.x, -r.y, -r.z};
  return r;
}

Pose::Pose(const Vec3 &position, const Quaternion &orientation)
    : position_(position), orientation_(canonical(orientation)) {
  for (double c : position_)
    if (!std::isfinite(c)) fail(ErrorCode::invalid_argument, "pose position must be finite");
}

std::array<double, 7> Pose::to_array() const {
  return {position_[0], position_[1], position_[2], orientation_.w, orientation_.x, orientation_.y, orientation_.z};
}

Pose Pose::from_array(std::span<const double> v) {
  if (v.size() != 7) fail(ErrorCode::invalid_argument, "pose needs 7 numbers");
  return Pose({v[0], v[1], v[2]}, {v[3], v[4], v[5], v[6]});
}

std::array<double, 6> Action6::to_array() const {
  return {translation[0], translation[1], translation[2], rotation_deg[0], rotation_deg[1], rotation_deg[2]};
}

Action6 Action6::from_array(std::span<const double> v) {
  if (v.size() != 6) fail(ErrorCode::invalid_argument, "action needs 6 numbers");
  for (double c : v)
    if (!std::isfinite(c)) fail(ErrorCode::invalid_argument, "action components must be finite");
  return {{v[0], v[1], v[2]}, {v[3], v[4], v[5]}};
}

Quaternion quaternion_from_euler_zyx_deg(const Vec3 &r) {
  const double hx = 0.5 * r[0] / kDegPerRad, hy = 0.5 * r[1] / kDegPerRad, hz = 0.5 * r[2] / kDegPerRad;
  const Quaternion qx{std::cos(hx), std::sin(hx), 0.0, 0.0};
  const Quaternion qy{std::cos(hy), 0.0, std::sin(hy), 0.0};
  const Quaternion qz{std::cos(hz), 0.0, 0.0, std::sin(hz)};
  return canonical(qz * qy * qx);
}

Vec3 euler_zyx_deg_from_quaternion(const Quaternion &q) {
  const double roll = std::atan2(2.0 * (q.w * q.x + q.y * q.z), 1.0 - 2.0 * (q.x * q.x + q.y * q.y));
  const double sp = std::clamp(2.0 * (q.w * q.y - q.z * q.x), -1.0, 1.0);
  const double pitch = std::asin(sp);
  const double yaw = std::atan2(2.0 * (q.w * q.z + q.x * q.y), 1.0 - 2.0 * (q.y * q.y + q.z * q.z));
  return {wrap_deg(roll * kDegPerRad), wrap_deg(pitch * kDegPerRad), wrap_deg(yaw * kDegPerRad)};
}

Pose compose(const Pose &a, const Pose &b) {
  return Pose(a.transform(b.position()), a.orientation() * b.orientation());
}

Pose inverse(const Pose &p) {
  const Quaternion qi = p.orientation().conjugate();
  const Vec3 t = qi.rotate(p.position());
  return Pose({-t[0], -t[1], -t[2]}, qi);
}

Action6 relative_action(const Pose &p_i, const Pose &p_j) {
  const Quaternion qi = p_i.orientation().conjugate();
  Action6 a;
  a.translation = qi.rotate(p_j.position() - p_i.position());
  a.rotation_deg = euler_zyx_deg_from_quaternion(qi * p_j.orientation());
  return a;
}

Pose apply_action(const Pose &p, const Action6 &a) {
  return compose(p, Pose(a.translation, quaternion_from_euler_zyx_deg(a.rotation_deg)));
}

Pose interpolate(const Pose &p0, const Pose &p1, double s) {
  if (!(s >= 0.0 && s <= 1.0)) fail(ErrorCode::invalid_argument, "interpolation parameter must lie in [0, 1]");
  if (s == 0.0) return p0;
  if (s == 1.0) return p1;
  const Vec3 pos = p0.position() + s * (p1.position() - p0.position());
  const Quaternion &a = p0.orientation();
  Quaternion b = p1.orientation();
  double d = a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
  if (d < 0.0) {
    b = {-b.w, -b.x, -b.y, -b.z};
    d = -d;
  }
  double wa, wb;
  if (d > 1.0 - 1e-12) {
    wa = 1.0 - s;
    wb = s;
  } else {
    const double theta = std::acos(d);
    const double st = std::sin(theta);
    wa = std::sin((1.0 - s) * theta) / st;
    wb = std::sin(s * theta) / st;
  }
  return Pose(pos, {wa * a.w + wb * b.w, wa * a.x + wb * b.x, wa * a.y + wb * b.y, wa * a.z + wb * b.z});
}

PoseDistance pose_distance(const Pose &p0, const Pose &p1) {
  // 2*acos(|<q0,q1>|) evaluated through atan2 for accuracy near zero.
  const Quaternion r = p0.orientation().conjugate() * p1.orientation();
  const double v = std::sqrt(r.x * r.x + r.y * r.y + r.z * r.z);
  return {norm(p1.position() - p0.position()), 2.0 * std::atan2(v, std::abs(r.w)) * kDegPerRad};
}

}  // namespace vaguide
