#pragma once

// Quaternion log/exp parameterization, relative pose targets, absolute pose
// recovery, error metrics and robust averaging.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "gnnreloc/error.hpp"

namespace gnnreloc {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

// Quaternion log, i.e. axis * half-angle.
using RotVec = Vec3;

// Scalar part w, vector part (x, y, z).
struct UnitQuaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static UnitQuaternion identity() { return {}; }
  UnitQuaternion operator-() const { return {-w, -x, -y, -z}; }
  bool operator==(const UnitQuaternion&) const = default;
};

inline double dot(const UnitQuaternion& a, const UnitQuaternion& b) {
  return a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
}
inline double norm(const UnitQuaternion& q) { return std::sqrt(dot(q, q)); }

struct Pose {
  Vec3 t{0.0, 0.0, 0.0};
  UnitQuaternion q{};
  bool operator==(const Pose&) const = default;
};

// Relative pose between an ordered pair of images: translation difference and
// difference of quaternion logs.
struct RelPoseTarget {
  Vec3 dt{0.0, 0.0, 0.0};
  Vec3 dw{0.0, 0.0, 0.0};
  bool operator==(const RelPoseTarget&) const = default;
};

// ||v|| (resp. ||w||) below this selects the zero branch of log/exp.
inline constexpr double kLogBranchEps = 1e-12;

// Unit norm with non-negative scalar part; q and -q are the same rotation.
inline UnitQuaternion canonicalize(const UnitQuaternion& q) {
  const double n = norm(q);
  if (!(n > 0.0) || !std::isfinite(n)) throw QuaternionError("canonicalize: zero or non-finite quaternion");
  const double s = (q.w < 0.0 ? -1.0 : 1.0) / n;
  return {q.w * s, q.x * s, q.y * s, q.z * s};
}

inline RotVec quat_log(const UnitQuaternion& q_in) {
  const UnitQuaternion q = canonicalize(q_in);
  const Vec3 v{q.x, q.y, q.z};
  const double nv = norm(v);
  if (nv <= kLogBranchEps) return {0.0, 0.0, 0.0};
  const double angle = std::acos(std::clamp(q.w, -1.0, 1.0));
  return (angle / nv) * v;
}

inline UnitQuaternion quat_exp(const RotVec& w) {
  const double nw = norm(w);
  if (nw < kLogBranchEps) return UnitQuaternion::identity();
  const double s = std::sin(nw) / nw;
  return {std::cos(nw), w[0] * s, w[1] * s, w[2] * s};
}

// World-frame translation difference; rotation as a difference of logs.
inline RelPoseTarget relative_target(const Pose& from, const Pose& to) {
  return {to.t - from.t, quat_log(to.q) - quat_log(from.q)};
}

inline Pose recover_absolute(const Pose& from, const RelPoseTarget& rel) {
  return {from.t + rel.dt, canonicalize(quat_exp(quat_log(from.q) + rel.dw))};
}

// Angle of conj(a) * b via atan2, which stays exact at zero where acos of a
// rounded dot product does not.
inline double rotation_error_deg(const UnitQuaternion& a, const UnitQuaternion& b) {
  const double s = dot(a, b);
  const Vec3 v{a.w * b.x - b.w * a.x - (a.y * b.z - a.z * b.y), a.w * b.y - b.w * a.y - (a.z * b.x - a.x * b.z),
               a.w * b.z - b.w * a.z - (a.x * b.y - a.y * b.x)};
  return 2.0 * std::atan2(norm(v), std::abs(s)) * 180.0 / std::numbers::pi;
}

inline double translation_error_m(const Vec3& a, const Vec3& b) { return norm(a - b); }

// Geometric median by Weiszfeld iteration, started at the coordinatewise mean.
inline Vec3 weiszfeld_median(std::span<const Vec3> points, int max_iterations = 100, double step_tol = 1e-9) {
  require(!points.empty(), "weiszfeld_median: empty point set");
  Vec3 x{0.0, 0.0, 0.0};
  for (const auto& p : points) x = x + p;
  x = (1.0 / static_cast<double>(points.size())) * x;

  for (int it = 0; it < max_iterations; ++it) {
    Vec3 num{0.0, 0.0, 0.0};
    double den = 0.0;
    for (const auto& p : points) {
      const double d = std::max(norm(x - p), 1e-12);
      num = num + (1.0 / d) * p;
      den += 1.0 / d;
    }
    const Vec3 next = (1.0 / den) * num;
    const double step = norm(next - x);
    x = next;
    if (step < step_tol) break;
  }
  return x;
}

// Chordal mean: sign-align to the first element, sum, normalize.
// A zero sum (degenerate input) returns the first element.
inline UnitQuaternion quaternion_mean(std::span<const UnitQuaternion> quats) {
  require(!quats.empty(), "quaternion_mean: empty set");
  const UnitQuaternion& ref = quats.front();
  UnitQuaternion sum{0.0, 0.0, 0.0, 0.0};
  for (const auto& q : quats) {
    const double s = dot(q, ref) < 0.0 ? -1.0 : 1.0;
    sum.w += s * q.w;
    sum.x += s * q.x;
    sum.y += s * q.y;
    sum.z += s * q.z;
  }
  if (norm(sum) < 1e-12) return canonicalize(ref);
  return canonicalize(sum);
}

}  // namespace gnnreloc
