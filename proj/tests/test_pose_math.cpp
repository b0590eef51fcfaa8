#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "gnnreloc/pose_math.hpp"

using namespace gnnreloc;

namespace {

constexpr double kPi = std::numbers::pi;

// Uniform on SO(3) via a normalized 4-D Gaussian.
UnitQuaternion random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return canonicalize({n(rng), n(rng), n(rng), n(rng)});
}

void expect_quat_near(const UnitQuaternion& a, const UnitQuaternion& b, double tol) {
  EXPECT_NEAR(a.w, b.w, tol);
  EXPECT_NEAR(a.x, b.x, tol);
  EXPECT_NEAR(a.y, b.y, tol);
  EXPECT_NEAR(a.z, b.z, tol);
}

double sum_dist(const Vec3& x, const std::vector<Vec3>& pts) {
  double s = 0.0;
  for (const auto& p : pts) s += norm(x - p);
  return s;
}

}  // namespace

TEST(QuatLog, IdentityIsZero) {
  const RotVec w = quat_log(UnitQuaternion::identity());
  EXPECT_EQ(w, (RotVec{0.0, 0.0, 0.0}));
}

TEST(QuatLog, QuarterTurnSpotValue) {
  const double h = std::sqrt(2.0) / 2.0;
  const RotVec w = quat_log({h, h, 0.0, 0.0});
  EXPECT_NEAR(w[0], kPi / 4.0, 1e-12);
  EXPECT_NEAR(w[1], 0.0, 1e-12);
  EXPECT_NEAR(w[2], 0.0, 1e-12);
}

TEST(QuatExp, SpotValues) {
  EXPECT_EQ(quat_exp({0.0, 0.0, 0.0}), UnitQuaternion::identity());
  expect_quat_near(quat_exp({kPi / 2.0, 0.0, 0.0}), {0.0, 1.0, 0.0, 0.0}, 1e-15);
}

TEST(QuatExp, UnitNormOnRandomInputs) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (int i = 0; i < 1000; ++i) {
    const UnitQuaternion q = quat_exp({u(rng), u(rng), u(rng)});
    EXPECT_NEAR(norm(q), 1.0, 1e-12);
  }
}

TEST(QuatLog, RoundTripThousandRandomRotations) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 1000; ++i) {
    const UnitQuaternion q = random_rotation(rng);
    const RotVec w = quat_log(q);
    EXPECT_LE(norm(w), kPi / 2.0 + 1e-9);
    expect_quat_near(canonicalize(quat_exp(w)), q, 1e-9);
  }
}

TEST(Canonicalize, SignAndScale) {
  EXPECT_EQ(canonicalize({-1.0, 0.0, 0.0, 0.0}), UnitQuaternion::identity());
  EXPECT_EQ(canonicalize({2.0, 0.0, 0.0, 0.0}), UnitQuaternion::identity());
  const double h = std::sqrt(2.0) / 2.0;
  expect_quat_near(canonicalize({-h, h, 0.0, 0.0}), {h, -h, 0.0, 0.0}, 1e-15);
}

TEST(Canonicalize, RejectsZeroNorm) { EXPECT_THROW(canonicalize({0.0, 0.0, 0.0, 0.0}), Error); }

TEST(RelativeTarget, Examples) {
  const Pose p{{0.3, -1.0, 2.0}, quat_exp({0.1, 0.2, -0.3})};
  const RelPoseTarget same = relative_target(p, p);
  EXPECT_EQ(same.dt, (Vec3{0.0, 0.0, 0.0}));
  EXPECT_EQ(same.dw, (Vec3{0.0, 0.0, 0.0}));

  const RelPoseTarget tr = relative_target(Pose{}, Pose{{1.0, 2.0, 3.0}, {}});
  EXPECT_EQ(tr.dt, (Vec3{1.0, 2.0, 3.0}));
  EXPECT_EQ(tr.dw, (Vec3{0.0, 0.0, 0.0}));

  const RelPoseTarget rot =
      relative_target(Pose{{}, quat_exp({kPi / 8.0, 0.0, 0.0})}, Pose{{}, quat_exp({kPi / 4.0, 0.0, 0.0})});
  EXPECT_NEAR(rot.dw[0], kPi / 8.0, 1e-12);
  EXPECT_NEAR(rot.dw[1], 0.0, 1e-12);
  EXPECT_NEAR(rot.dw[2], 0.0, 1e-12);
}

TEST(RecoverAbsolute, Examples) {
  const Pose p{{0.3, -1.0, 2.0}, quat_exp({0.1, 0.2, -0.3})};
  const Pose same = recover_absolute(p, {});
  EXPECT_EQ(same.t, p.t);
  expect_quat_near(same.q, p.q, 1e-15);

  const Pose q = recover_absolute(Pose{}, {{1.0, 0.0, 0.0}, {0.0, kPi / 4.0, 0.0}});
  EXPECT_EQ(q.t, (Vec3{1.0, 0.0, 0.0}));
  expect_quat_near(q.q, quat_exp({0.0, kPi / 4.0, 0.0}), 1e-15);
}

TEST(RecoverAbsolute, InvertsRelativeTargetInPrincipalBranch) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> t(-3.0, 3.0);
  std::uniform_real_distribution<double> a(-0.45, 0.45);  // |log| < pi/2 for both and for the difference
  for (int i = 0; i < 500; ++i) {
    const Pose pi{{t(rng), t(rng), t(rng)}, quat_exp({a(rng), a(rng), a(rng)})};
    const Pose pj{{t(rng), t(rng), t(rng)}, quat_exp({a(rng), a(rng), a(rng)})};
    const Pose back = recover_absolute(pi, relative_target(pi, pj));
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(back.t[k], pj.t[k], 1e-9);
    expect_quat_near(back.q, pj.q, 1e-9);
  }
}

TEST(RotationError, Examples) {
  std::mt19937_64 rng(2);
  const UnitQuaternion q = random_rotation(rng);
  EXPECT_EQ(rotation_error_deg(q, q), 0.0);
  EXPECT_EQ(rotation_error_deg(q, -q), 0.0);
  EXPECT_NEAR(rotation_error_deg(UnitQuaternion::identity(), quat_exp({kPi / 6.0, 0.0, 0.0})), 60.0, 1e-9);
}

TEST(RotationError, ExactlyZeroForNegatedQuaternion) {
  std::mt19937_64 rng(21);
  for (int i = 0; i < 1000; ++i) {
    const UnitQuaternion q = random_rotation(rng);
    ASSERT_EQ(rotation_error_deg(q, -q), 0.0) << i;
    ASSERT_EQ(rotation_error_deg(q, q), 0.0) << i;
  }
  // Tiny angles resolve rather than round to zero.
  EXPECT_NEAR(rotation_error_deg(UnitQuaternion::identity(), quat_exp({1e-9, 0.0, 0.0})), 2e-9 * 180.0 / kPi, 1e-20);
}

TEST(RotationError, SymmetricAndSignInvariant) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 200; ++i) {
    const UnitQuaternion a = random_rotation(rng);
    const UnitQuaternion b = random_rotation(rng);
    const double e = rotation_error_deg(a, b);
    EXPECT_EQ(e, rotation_error_deg(b, a));
    EXPECT_EQ(e, rotation_error_deg(-a, b));
    EXPECT_EQ(e, rotation_error_deg(a, -b));
  }
}

TEST(Weiszfeld, TrivialCases) {
  const std::vector<Vec3> one{{1.5, -2.0, 0.25}};
  EXPECT_EQ(weiszfeld_median(one), one[0]);
  const std::vector<Vec3> cross{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}};
  const Vec3 m = weiszfeld_median(cross);
  EXPECT_NEAR(norm(m), 0.0, 1e-12);
}

TEST(Weiszfeld, MatchesGridSearchOracle) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Vec3> pts;
    for (int i = 0; i < 5; ++i) pts.push_back({u(rng), u(rng), u(rng)});

    // Coarse-to-fine lattice search of the summed distance.
    Vec3 best{0.0, 0.0, 0.0};
    double span = 1.0;
    for (int level = 0; level < 12; ++level) {
      Vec3 centre = best;
      double best_val = sum_dist(best, pts);
      const int steps = 10;
      for (int a = -steps; a <= steps; ++a)
        for (int b = -steps; b <= steps; ++b)
          for (int c = -steps; c <= steps; ++c) {
            const Vec3 x{centre[0] + span * a / steps, centre[1] + span * b / steps, centre[2] + span * c / steps};
            const double v = sum_dist(x, pts);
            if (v < best_val) {
              best_val = v;
              best = x;
            }
          }
      span *= 0.3;
    }
    const Vec3 w = weiszfeld_median(pts);
    EXPECT_LT(norm(w - best), 1e-3);
    Vec3 mean{0.0, 0.0, 0.0};
    for (const auto& p : pts) mean = mean + 0.2 * p;
    EXPECT_LE(sum_dist(w, pts), sum_dist(mean, pts) + 1e-12);
  }
}

TEST(QuaternionMean, TrivialCases) {
  std::mt19937_64 rng(4);
  const UnitQuaternion q = random_rotation(rng);
  const std::vector<UnitQuaternion> copies(5, q);
  expect_quat_near(quaternion_mean(copies), q, 1e-15);
  const std::vector<UnitQuaternion> pair{q, -q};
  expect_quat_near(quaternion_mean(pair), q, 1e-15);
}

TEST(QuaternionMean, SmallClusterMatchesDenseSearch) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> small(-0.04, 0.04);  // half-angle log, < 10 deg rotations
  for (int trial = 0; trial < 5; ++trial) {
    const UnitQuaternion centre = random_rotation(rng);
    const RotVec c = quat_log(centre);
    std::vector<UnitQuaternion> qs;
    for (int i = 0; i < 7; ++i) qs.push_back(canonicalize(quat_exp({c[0] + small(rng), c[1] + small(rng), c[2] + small(rng)})));
    // A sign-flipped member must not disturb the result.
    qs[3] = -qs[3];

    auto chordal = [&](const UnitQuaternion& r) {
      double s = 0.0;
      for (const auto& q : qs) {
        const double d = std::abs(dot(q, r));
        s += 2.0 - 2.0 * d;  // ||q - r||^2 with q sign-aligned to r
      }
      return s;
    };
    // Dense search over rotations near the centre, parameterized by the log.
    UnitQuaternion best = centre;
    double best_val = chordal(best);
    RotVec base = c;
    double span = 0.08;
    for (int level = 0; level < 6; ++level) {
      const RotVec from = base;
      for (int a = -10; a <= 10; ++a)
        for (int b = -10; b <= 10; ++b)
          for (int d = -10; d <= 10; ++d) {
            const RotVec w{from[0] + span * a / 10, from[1] + span * b / 10, from[2] + span * d / 10};
            const UnitQuaternion r = quat_exp(w);
            const double v = chordal(r);
            if (v < best_val) {
              best_val = v;
              best = r;
              base = w;
            }
          }
      span *= 0.3;
    }
    const UnitQuaternion m = quaternion_mean(qs);
    EXPECT_NEAR(norm(m), 1.0, 1e-12);
    EXPECT_LT(rotation_error_deg(m, best), 0.5);
  }
}
