#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "helpers.hpp"
#include "lid/kin.hpp"

using namespace lid;
using lid::testing::max_abs_diff;

namespace {

using Mat4 = Eigen::Matrix4d;

/// Rodrigues rotation about a unit axis as a 4x4 homogeneous matrix.
Mat4 rotation(const Vec3& k, double a) {
  Eigen::Matrix3d kx;
  kx << 0, -k.z(), k.y(), k.z(), 0, -k.x(), -k.y(), k.x(), 0;
  Mat4 m = Mat4::Identity();
  m.block<3, 3>(0, 0) = Eigen::Matrix3d::Identity() + std::sin(a) * kx + (1.0 - std::cos(a)) * kx * kx;
  return m;
}

std::vector<Mat4> link_matrices(const KinematicChain& c, const Vector& q) {
  std::vector<Mat4> ms{c.base.matrix()};
  for (Eigen::Index i = 0; i < c.dof(); ++i) {
    const auto& j = c.joints[static_cast<std::size_t>(i)];
    ms.push_back(j.offset.matrix());
    ms.push_back(rotation(j.axis, q(i)));
  }
  ms.push_back(c.tip.matrix());
  return ms;
}

Vector random_q(const KinematicChain& c, Rng& rng) {
  Vector q(c.dof());
  for (Eigen::Index i = 0; i < c.dof(); ++i) q(i) = rng.uniform(c.joints[i].lo, c.joints[i].hi);
  return q;
}

/// Chain with random offsets (translation and rotation) and random axes.
KinematicChain random_chain(int n, Rng& rng) {
  KinematicChain c;
  for (int i = 0; i < n; ++i) {
    Joint j;
    j.axis = rng.normal_vector(3).normalized();
    Transform off = Transform::Identity();
    off.translate(Vec3(rng.normal_vector(3) * 0.3));
    off.rotate(Eigen::AngleAxisd(rng.uniform(-1.0, 1.0), Vec3(rng.normal_vector(3).normalized())));
    j.offset = off;
    j.name = "j" + std::to_string(i);
    c.joints.push_back(j);
  }
  c.tip = Transform(Eigen::Translation3d(0.1, 0.2, 0.0));
  return c;
}

}  // namespace

TEST(Fk, PlanarExtended) {
  const auto c = planar_two_link();
  EXPECT_LT((fk(c, Vector::Zero(2)) - Vec3(2, 0, 0)).norm(), 1e-15);
}

TEST(Fk, PlanarQuarterTurn) {
  const auto c = planar_two_link();
  Vector q(2);
  q << std::numbers::pi / 2, 0.0;
  EXPECT_LT((fk(c, q) - Vec3(0, 2, 0)).norm(), 1e-12);
}

TEST(Fk, ArmMatchesHomogeneousProduct) {
  Rng rng(71);
  const auto c = arm4();
  for (int rep = 0; rep < 50; ++rep) {
    const Vector q = random_q(c, rng);
    Mat4 m = Mat4::Identity();
    for (const auto& f : link_matrices(c, q)) m = m * f;
    EXPECT_LT((fk(c, q) - m.block<3, 1>(0, 3)).norm(), 1e-12);
  }
}

TEST(Fk, ArmHangsStraightDownAtZero) {
  const auto c = arm4(0.3, 0.25);
  EXPECT_LT((fk(c, Vector::Zero(4)) - Vec3(0, 0, -0.55)).norm(), 1e-15);
}

TEST(Fk, ProductOrderIndependent) {
  Rng rng(72);
  for (int rep = 0; rep < 20; ++rep) {
    const auto c = random_chain(5, rng);
    const Vector q = random_q(c, rng);
    const auto ms = link_matrices(c, q);
    Mat4 right = Mat4::Identity();
    for (auto it = ms.rbegin(); it != ms.rend(); ++it) right = *it * right;
    EXPECT_LT((fk(c, q) - right.block<3, 1>(0, 3)).norm(), 1e-12);
  }
}

TEST(Fk, ClampsOutOfRangeWithWarning) {
  const auto c = arm4();
  lid::testing::WarningCapture warnings;
  Vector q = Vector::Zero(4);
  q(3) = -0.5;  // elbow below its lower limit
  EXPECT_LT((fk(c, q) - fk(c, Vector::Zero(4))).norm(), 1e-15);
  EXPECT_TRUE(warnings.contains("clamped"));
}

TEST(Fk, WrongLength) { EXPECT_THROW(fk(arm4(), Vector::Zero(3)), ConfigError); }

TEST(Chain, ValidateRejectsBadAxesAndLimits) {
  auto c = planar_two_link();
  c.joints[0].axis = Vec3(1, 1, 0);
  EXPECT_THROW(c.validate(), ConfigError);
  c = planar_two_link();
  c.joints[1].lo = 1.0;
  c.joints[1].hi = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(IkBaseline, AlreadySolved) {
  Rng rng(73);
  const auto c = arm4();
  const Vector q0 = random_q(c, rng);
  const IkSolution s = ik_baseline(c, fk(c, q0), q0);
  EXPECT_LE(s.iterations, 1);
  EXPECT_LT(s.residual, 1e-10);
  EXPECT_EQ(max_abs_diff(s.q, q0), 0.0);
  EXPECT_TRUE(s.converged);
}

TEST(IkBaseline, ReachablePlanarTargets) {
  Rng rng(74);
  const auto c = planar_two_link();
  for (int rep = 0; rep < 100; ++rep) {
    const Vec3 target = fk(c, random_q(c, rng));
    const IkSolution s = ik_baseline(c, target, random_q(c, rng));
    EXPECT_LT((fk(c, s.q) - target).norm(), 1e-4);
    EXPECT_TRUE(s.converged);
  }
}

TEST(IkBaseline, UnreachableTarget) {
  const auto c = planar_two_link();
  const Vec3 target(2.4, 1.8, 0.0);  // norm 3 > reach 2
  Vector q0(2);
  q0 << 0.3, 0.4;
  const IkSolution s = ik_baseline(c, target, q0);
  EXPECT_FALSE(s.converged);
  EXPECT_NEAR(s.residual, target.norm() - c.reach(), 1e-3);
}

TEST(IkBaseline, SolutionWithinLimits) {
  Rng rng(75);
  const auto c = arm4();
  for (int rep = 0; rep < 20; ++rep) {
    const IkSolution s = ik_baseline(c, Vec3(rng.normal_vector(3) * 0.4), random_q(c, rng));
    EXPECT_TRUE((s.q.array() >= c.lower().array()).all());
    EXPECT_TRUE((s.q.array() <= c.upper().array()).all());
    EXPECT_GE(s.residual, 0.0);
  }
}

TEST(IkBaseline, NonFiniteTarget) {
  EXPECT_THROW(ik_baseline(planar_two_link(), Vec3(std::nan(""), 0, 0), Vector::Zero(2)), ConfigError);
}

TEST(IkWithPrior, ConsistentPriorIsFixedPoint) {
  Rng rng(76);
  const auto c = arm4();
  for (int rep = 0; rep < 20; ++rep) {
    const Vector mu = random_q(c, rng);
    const IkSolution s = ik_with_prior(c, fk(c, mu), mu);
    EXPECT_EQ(max_abs_diff(s.q, mu), 0.0);
  }
}

TEST(IkWithPrior, StrongPriorDominates) {
  Rng rng(77);
  const auto c = arm4();
  const Vector mu = random_q(c, rng);
  const IkSolution s = ik_with_prior(c, Vec3(0.2, -0.1, 0.1), mu, 1.0, 1e9);
  EXPECT_LT(max_abs_diff(s.q, mu), 1e-4);
}

TEST(IkWithPrior, MatchesGridSearchOptimum) {
  Rng rng(78);
  const auto c = planar_two_link();
  const double pi = std::numbers::pi;
  const int n = 1000;  // 10^6 grid points
  for (int inst = 0; inst < 10; ++inst) {
    const Vector mu = random_q(c, rng);
    const Vec3 target = fk(c, random_q(c, rng)) * rng.uniform(0.5, 1.2);
    const IkSolution s = ik_with_prior(c, target, mu, 1.0, 0.01);
    double best = std::numeric_limits<double>::infinity();
    Vector q(2);
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) {
        q << -pi + 2 * pi * (a + 0.5) / n, -pi + 2 * pi * (b + 0.5) / n;
        const Vec3 p(std::cos(q(0)) + std::cos(q(0) + q(1)), std::sin(q(0)) + std::sin(q(0) + q(1)), 0.0);
        best = std::min(best, (target - p).squaredNorm() + 0.01 * (mu - q).squaredNorm());
      }
    EXPECT_LE(ik_prior_objective(c, target, mu, s.q, 1.0, 0.01), best + 1e-3) << "instance " << inst;
  }
}

TEST(IkWithPrior, ObjectiveNotAboveStart) {
  Rng rng(79);
  const auto c = arm4();
  for (int rep = 0; rep < 20; ++rep) {
    const Vector mu = random_q(c, rng);
    const Vec3 target = fk(c, random_q(c, rng));
    const IkSolution s = ik_with_prior(c, target, mu);
    EXPECT_LE(s.objective, ik_prior_objective(c, target, mu, mu, 1.0, 0.01) + 1e-15);
    EXPECT_NEAR(s.objective, ik_prior_objective(c, target, mu, s.q, 1.0, 0.01), 1e-12);
  }
}

TEST(IkWithPrior, ZeroPriorWeightAgreesWithBaseline) {
  Rng rng(80);
  const auto c = planar_two_link();
  for (int rep = 0; rep < 30; ++rep) {
    const Vector mu = random_q(c, rng);
    const Vec3 target = fk(c, random_q(c, rng));
    const IkSolution a = ik_with_prior(c, target, mu, 1.0, 0.0);
    const IkSolution b = ik_baseline(c, target, mu);
    EXPECT_NEAR(a.residual, b.residual, 1e-4);
  }
}

TEST(IkWithPrior, NegativeWeightsRejected) {
  EXPECT_THROW(ik_with_prior(planar_two_link(), Vec3(1, 0, 0), Vector::Zero(2), -1.0, 0.01), ConfigError);
  EXPECT_THROW(ik_with_prior(planar_two_link(), Vec3(1, 0, 0), Vector::Zero(2), 1.0, -0.01), ConfigError);
}

TEST(Jacobian, MatchesPlanarAnalytic) {
  const auto c = planar_two_link();
  Vector q(2);
  q << 0.3, 0.7;
  Matrix expected(3, 2);
  expected << -std::sin(0.3) - std::sin(1.0), -std::sin(1.0), std::cos(0.3) + std::cos(1.0), std::cos(1.0), 0, 0;
  EXPECT_LT(max_abs_diff(position_jacobian(c, q), expected), 1e-8);
}
