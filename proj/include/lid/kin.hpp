#pragma once

// Serial revolute chains: forward kinematics, position-only IK and IK
// regularized towards a joint-space prior.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "lid/common.hpp"

namespace lid {

using Vec3 = Eigen::Vector3d;
using Transform = Eigen::Isometry3d;

struct Joint {
  Transform offset = Transform::Identity();  // fixed transform from the parent frame
  Vec3 axis = Vec3::UnitZ();
  double lo = -std::numbers::pi;
  double hi = std::numbers::pi;
  std::string name;
};

/// Ordered revolute joints. Link i's frame is parent * offset_i * R(axis_i, q_i);
/// `tip` is the end-effector offset in the last joint's frame.
struct KinematicChain {
  Transform base = Transform::Identity();
  std::vector<Joint> joints;
  Transform tip = Transform::Identity();

  [[nodiscard]] Eigen::Index dof() const { return static_cast<Eigen::Index>(joints.size()); }

  [[nodiscard]] Vector lower() const {
    Vector v(dof());
    for (Eigen::Index i = 0; i < dof(); ++i) v(i) = joints[i].lo;
    return v;
  }

  [[nodiscard]] Vector upper() const {
    Vector v(dof());
    for (Eigen::Index i = 0; i < dof(); ++i) v(i) = joints[i].hi;
    return v;
  }

  [[nodiscard]] Vector clamp(const Eigen::Ref<const Vector>& q) const { return q.cwiseMax(lower()).cwiseMin(upper()); }

  [[nodiscard]] double reach() const {
    double r = tip.translation().norm();
    for (std::size_t i = 1; i < joints.size(); ++i) r += joints[i].offset.translation().norm();
    return r;
  }

  void validate() const {
    for (const auto& j : joints) {
      if (std::abs(j.axis.norm() - 1.0) > 1e-9) throw ConfigError("chain: joint '" + j.name + "' axis is not unit length");
      if (!(j.lo < j.hi)) throw ConfigError("chain: joint '" + j.name + "' has lo >= hi");
    }
  }
};

/// Full end-effector pose; joint values outside the limits are clamped with
/// a warning.
inline Transform fk_pose(const KinematicChain& chain, const Eigen::Ref<const Vector>& q) {
  if (q.size() != chain.dof())
    throw ConfigError("fk: expected " + std::to_string(chain.dof()) + " joint values, got " + std::to_string(q.size()));
  const Vector qc = chain.clamp(q);
  if ((qc - q).cwiseAbs().maxCoeff() > 0.0) log_warn("fk: joint values outside limits were clamped");
  Transform t = chain.base;
  for (Eigen::Index i = 0; i < chain.dof(); ++i) {
    const auto& j = chain.joints[static_cast<std::size_t>(i)];
    t = t * j.offset * Eigen::AngleAxisd(qc(i), j.axis);
  }
  return t * chain.tip;
}

/// End-effector position in meters.
inline Vec3 fk(const KinematicChain& chain, const Eigen::Ref<const Vector>& q) { return fk_pose(chain, q).translation(); }

/// Two revolute joints about z with links of the given lengths along x.
inline KinematicChain planar_two_link(double l1 = 1.0, double l2 = 1.0) {
  KinematicChain c;
  Joint j1;
  j1.name = "j1";
  Joint j2;
  j2.name = "j2";
  j2.offset = Transform(Eigen::Translation3d(l1, 0.0, 0.0));
  c.joints = {j1, j2};
  c.tip = Transform(Eigen::Translation3d(l2, 0.0, 0.0));
  return c;
}

/// Right-arm chain in the x-forward / y-left / z-up frame with the shoulder at
/// the origin: shoulder yaw (z), shoulder pitch (y), shoulder roll (about the
/// upper arm), elbow flexion. All zeros is the arm hanging straight down;
/// positive elbow flexion bends the forearm forward.
inline KinematicChain arm4(double upper_arm = 0.30, double forearm = 0.25) {
  const double pi = std::numbers::pi;
  KinematicChain c;
  Joint yaw;
  yaw.name = "shoulder_yaw";
  yaw.axis = Vec3::UnitZ();
  Joint pitch;
  pitch.name = "shoulder_pitch";
  pitch.axis = Vec3::UnitY();
  pitch.lo = 0.0;
  pitch.hi = pi;
  Joint roll;
  roll.name = "shoulder_roll";
  roll.axis = Vec3::UnitZ();
  Joint elbow;
  elbow.name = "elbow";
  elbow.axis = -Vec3::UnitY();
  elbow.offset = Transform(Eigen::Translation3d(0.0, 0.0, -upper_arm));
  elbow.lo = 0.0;
  elbow.hi = pi;
  c.joints = {yaw, pitch, roll, elbow};
  c.tip = Transform(Eigen::Translation3d(0.0, 0.0, -forearm));
  return c;
}

struct IkSolution {
  Vector q;
  double residual = 0.0;  // end-effector distance to target, meters
  int iterations = 0;
  bool converged = false;
  double objective = 0.0;
};

struct IkOptions {
  int max_iters = 200;
  double residual_tol = 1e-4;
  double gradient_tol = 1e-6;
  double fd_step = 1e-6;
  double damping = 1e-3;
  double max_step = 0.5;  // rad, per joint
  int lattice = 2;         // extra starts per joint, 0 disables restarts
};

/// Central-difference Jacobian of the end-effector position (3 x dof).
inline Matrix position_jacobian(const KinematicChain& chain, const Eigen::Ref<const Vector>& q, double h = 1e-6) {
  Matrix j(3, chain.dof());
  Vector qp = q;
  for (Eigen::Index i = 0; i < chain.dof(); ++i) {
    const double orig = qp(i);
    // stay inside the joint box so fk does not clamp the probe
    const double up = std::min(orig + h, chain.joints[i].hi);
    const double dn = std::max(orig - h, chain.joints[i].lo);
    qp(i) = up;
    const Vec3 fu = fk(chain, qp);
    qp(i) = dn;
    const Vec3 fd = fk(chain, qp);
    qp(i) = orig;
    j.col(i) = (fu - fd) / (up - dn);
  }
  return j;
}

namespace detail {

/// Levenberg-Marquardt on λx‖f(q) − x‖² + λq‖q − μq‖² with projection onto
/// the joint box. With λq = 0 this is the plain position IK.
inline IkSolution solve_ik(const KinematicChain& chain, const Vec3& target, const Vector& q0, const Vector& prior,
                           double lambda_x, double lambda_q, const IkOptions& opt, bool stop_on_residual) {
  if (!target.allFinite()) throw ConfigError("ik: non-finite target");
  const Vector lo = chain.lower();
  const Vector hi = chain.upper();
  auto objective = [&](const Vector& q) {
    const double px = (fk(chain, q) - target).squaredNorm();
    return lambda_x * px + (lambda_q > 0.0 ? lambda_q * (q - prior).squaredNorm() : 0.0);
  };
  IkSolution sol;
  sol.q = chain.clamp(q0);
  double obj = objective(sol.q);
  double mu = opt.damping;
  const Eigen::Index n = chain.dof();
  for (int it = 0; it < opt.max_iters; ++it) {
    const Vec3 err = fk(chain, sol.q) - target;
    if (stop_on_residual && err.norm() < opt.residual_tol) break;
    const Matrix jac = position_jacobian(chain, sol.q, opt.fd_step);
    Vector grad = lambda_x * jac.transpose() * err;
    Matrix h = lambda_x * jac.transpose() * jac;
    if (lambda_q > 0.0) {
      grad += lambda_q * (sol.q - prior);
      h.diagonal().array() += lambda_q;
    }
    // projected gradient: ignore components pushing into an active bound
    Vector pg = grad;
    for (Eigen::Index i = 0; i < n; ++i)
      if ((sol.q(i) <= lo(i) && grad(i) > 0.0) || (sol.q(i) >= hi(i) && grad(i) < 0.0)) pg(i) = 0.0;
    if (pg.norm() < opt.gradient_tol) break;
    bool accepted = false;
    for (int tries = 0; tries < 30 && !accepted; ++tries) {
      Matrix damped = h;
      damped.diagonal().array() += mu * (1.0 + h.diagonal().array());
      Vector step = damped.ldlt().solve(-grad);
      const double biggest = step.cwiseAbs().maxCoeff();
      if (biggest > opt.max_step) step *= opt.max_step / biggest;
      const Vector cand = (sol.q + step).cwiseMax(lo).cwiseMin(hi);
      const double cand_obj = objective(cand);
      if (cand_obj < obj) {
        sol.q = cand;
        obj = cand_obj;
        mu = std::max(mu * 0.3, 1e-12);
        accepted = true;
      } else {
        mu *= 10.0;
      }
    }
    sol.iterations = it + 1;
    if (!accepted) break;
  }
  sol.objective = obj;
  sol.residual = (fk(chain, sol.q) - target).norm();
  return sol;
}

/// Restart points: a lattice^dof grid at the cell centres of the joint box.
inline std::vector<Vector> restart_points(const KinematicChain& chain, int lattice) {
  std::vector<Vector> out;
  if (lattice < 1) return out;
  const Eigen::Index n = chain.dof();
  std::vector<int> idx(static_cast<std::size_t>(n), 0);
  for (;;) {
    Vector q(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& j = chain.joints[static_cast<std::size_t>(i)];
      q(i) = j.lo + (j.hi - j.lo) * (idx[static_cast<std::size_t>(i)] + 0.5) / lattice;
    }
    out.push_back(q);
    Eigen::Index k = 0;
    while (k < n && ++idx[static_cast<std::size_t>(k)] == lattice) idx[static_cast<std::size_t>(k++)] = 0;
    if (k == n) return out;
  }
}

}  // namespace detail

/// Position-only IK: minimizes ‖f(q) − x‖² from q_init. If that run stalls
/// above the residual tolerance (joint limits can trap a local descent) the
/// solver restarts from a lattice over the joint box and keeps the best.
inline IkSolution ik_baseline(const KinematicChain& chain, const Vec3& target, const Eigen::Ref<const Vector>& q_init,
                              const IkOptions& opt = {}) {
  if (q_init.size() != chain.dof()) throw ConfigError("ik_baseline: q_init has wrong length");
  const Vector none = Vector::Zero(chain.dof());
  IkSolution sol = detail::solve_ik(chain, target, q_init, none, 1.0, 0.0, opt, true);
  if (sol.residual >= opt.residual_tol) {
    for (const Vector& start : detail::restart_points(chain, opt.lattice)) {
      IkSolution alt = detail::solve_ik(chain, target, start, none, 1.0, 0.0, opt, true);
      alt.iterations += sol.iterations;
      if (alt.residual < sol.residual) sol = alt;
      if (sol.residual < opt.residual_tol) break;
    }
  }
  sol.converged = sol.residual < opt.residual_tol;
  return sol;
}

/// IK regularized towards a joint-space prior:
/// argmin λx‖x − f(q)‖² + λq‖μq − q‖², warm-started at μq. The objective is
/// not convex, so the lattice restarts also run; a restart only replaces the
/// warm-started result when its objective is strictly lower.
inline IkSolution ik_with_prior(const KinematicChain& chain, const Vec3& target, const Eigen::Ref<const Vector>& mu_q,
                                double lambda_x = 1.0, double lambda_q = 0.01, const IkOptions& opt = {}) {
  if (lambda_x < 0.0 || lambda_q < 0.0) throw ConfigError("ik_with_prior: weights must be non-negative");
  if (mu_q.size() != chain.dof()) throw ConfigError("ik_with_prior: prior has wrong length");
  const Vector prior = mu_q;
  IkSolution sol = detail::solve_ik(chain, target, prior, prior, lambda_x, lambda_q, opt, lambda_q == 0.0);
  if (sol.objective > 0.0) {
    for (const Vector& start : detail::restart_points(chain, opt.lattice)) {
      const IkSolution alt = detail::solve_ik(chain, target, start, prior, lambda_x, lambda_q, opt, lambda_q == 0.0);
      if (alt.objective < sol.objective) sol = alt;
    }
  }
  // converged when the projected gradient vanished or, without a prior term,
  // the target was reached
  const Matrix jac = position_jacobian(chain, sol.q, opt.fd_step);
  Vector grad = lambda_x * jac.transpose() * (fk(chain, sol.q) - target) + lambda_q * (sol.q - chain.clamp(prior));
  for (Eigen::Index i = 0; i < chain.dof(); ++i)
    if ((sol.q(i) <= chain.joints[i].lo && grad(i) > 0.0) || (sol.q(i) >= chain.joints[i].hi && grad(i) < 0.0))
      grad(i) = 0.0;
  sol.converged = grad.norm() < 1e-4 || (lambda_q == 0.0 && sol.residual < opt.residual_tol);
  return sol;
}

inline double ik_prior_objective(const KinematicChain& chain, const Vec3& target, const Eigen::Ref<const Vector>& mu_q,
                                 const Eigen::Ref<const Vector>& q, double lambda_x, double lambda_q) {
  return lambda_x * (target - fk(chain, q)).squaredNorm() + lambda_q * (mu_q - q).squaredNorm();
}

}  // namespace lid
