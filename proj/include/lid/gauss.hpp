#pragma once

// Dense Gaussian algebra: log-density, KL divergence, exact block
// conditioning, reparameterized sampling and SPD repair.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lid/common.hpp"

namespace lid {

/// Multivariate normal with a full covariance.
struct Gaussian {
  Vector mean;
  Matrix cov;

  Gaussian() = default;
  Gaussian(Vector m, Matrix c) : mean(std::move(m)), cov(std::move(c)) {}

  [[nodiscard]] Eigen::Index dim() const { return mean.size(); }

  static Gaussian standard(Eigen::Index d) { return {Vector::Zero(d), Matrix::Identity(d, d)}; }

  static Gaussian diagonal(Vector m, const Vector& var) {
    return {std::move(m), var.asDiagonal().toDenseMatrix()};
  }
};

/// A Gaussian over the concatenation (h; r) where both blocks have the same
/// width. The h block occupies the leading `split` dimensions.
struct BlockedGaussian {
  Gaussian base;
  Eigen::Index split = 0;

  BlockedGaussian() = default;
  BlockedGaussian(Gaussian g, Eigen::Index s) : base(std::move(g)), split(s) {}

  [[nodiscard]] Eigen::Index h_dim() const { return split; }
  [[nodiscard]] Eigen::Index r_dim() const { return base.dim() - split; }

  [[nodiscard]] auto mu_h() const { return base.mean.head(h_dim()); }
  [[nodiscard]] auto mu_r() const { return base.mean.tail(r_dim()); }
  [[nodiscard]] auto cov_hh() const { return base.cov.topLeftCorner(h_dim(), h_dim()); }
  [[nodiscard]] auto cov_hr() const { return base.cov.topRightCorner(h_dim(), r_dim()); }
  [[nodiscard]] auto cov_rh() const { return base.cov.bottomLeftCorner(r_dim(), h_dim()); }
  [[nodiscard]] auto cov_rr() const { return base.cov.bottomRightCorner(r_dim(), r_dim()); }

  [[nodiscard]] Gaussian marginal_h() const { return {mu_h(), cov_hh()}; }
  [[nodiscard]] Gaussian marginal_r() const { return {mu_r(), cov_rr()}; }
};

/// Covariance repair recipes.
///  - kNone: symmetrize only.
///  - kFlat: add 1e-4 to every diagonal entry.
///  - kLinear: add diagonal increments spaced linearly from 9.1e-5 to 1e-4.
///  - kEigen: while Cholesky fails, lift the spectrum by an amount
///    proportional to |lambda_min|.
///  - kLinearEigen: kLinear followed by kEigen (used on conditional outputs).
enum class RegMode { kNone, kFlat, kLinear, kEigen, kLinearEigen };

struct RegSchedule {
  RegMode mode = RegMode::kFlat;
  double flat = 1e-4;
  double linear_first = 9.1e-5;
  double linear_last = 1e-4;
  double eigen_factor = 1e-2;
  int eigen_max_iters = 50;

  static RegSchedule none() { return {RegMode::kNone}; }
  static RegSchedule flat_default() { return {RegMode::kFlat}; }
  static RegSchedule linear_default() { return {RegMode::kLinear}; }
  static RegSchedule eigen_default() { return {RegMode::kEigen}; }
  static RegSchedule conditional() { return {RegMode::kLinearEigen}; }
};

namespace detail {

inline bool cholesky_ok(const Matrix& m) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) return false;
  // LLT reports success on some semi-definite inputs; require a strictly
  // positive pivot.
  return llt.matrixL().toDenseMatrix().diagonal().minCoeff() > 0.0;
}

inline Eigen::LLT<Matrix> checked_llt(const Matrix& cov) {
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success || !(llt.matrixLLT().diagonal().array() > 0.0).all())
    throw NumericalError("covariance not positive definite");
  return llt;
}

inline void require_same_dim(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a != b)
    throw ConfigError(std::string(what) + ": dimension mismatch (" + std::to_string(a) + " vs " +
                      std::to_string(b) + ")");
}

inline double log_det_from_llt(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace detail

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// Applies the requested repair to a square matrix. The input is always
/// symmetrized first.
inline Matrix regularize_spd(const Matrix& m, const RegSchedule& schedule = {}) {
  if (m.rows() != m.cols()) throw ConfigError("regularize_spd: matrix not square");
  if (!m.allFinite()) throw NumericalError("regularize_spd: non-finite entries");
  Matrix out = symmetrize(m);
  const Eigen::Index d = out.rows();

  auto add_linear = [&] {
    for (Eigen::Index i = 0; i < d; ++i) {
      const double frac = d > 1 ? static_cast<double>(i) / static_cast<double>(d - 1) : 1.0;
      out(i, i) += schedule.linear_first + frac * (schedule.linear_last - schedule.linear_first);
    }
  };

  auto eigen_repair = [&] {
    for (int it = 0; it < schedule.eigen_max_iters && !detail::cholesky_ok(out); ++it) {
      Eigen::SelfAdjointEigenSolver<Matrix> es(out, Eigen::EigenvaluesOnly);
      const double lmin = es.eigenvalues().minCoeff();
      const double scale = std::max(1.0, out.diagonal().cwiseAbs().maxCoeff());
      double shift = schedule.eigen_factor * std::abs(lmin);
      // a non-positive eigenvalue is not lifted by a fraction of itself; move
      // it just past zero first
      if (lmin <= 0.0) shift += std::abs(lmin) + 1e-12 * scale;
      out.diagonal().array() += shift;
    }
    if (!detail::cholesky_ok(out))
      throw NumericalError("regularize_spd: eigenvalue repair did not reach a positive definite matrix");
  };

  switch (schedule.mode) {
    case RegMode::kNone:
      break;
    case RegMode::kFlat:
      out.diagonal().array() += schedule.flat;
      break;
    case RegMode::kLinear:
      add_linear();
      break;
    case RegMode::kEigen:
      eigen_repair();
      break;
    case RegMode::kLinearEigen:
      add_linear();
      eigen_repair();
      break;
  }
  return out;
}

/// log N(x; mean, cov) evaluated through a Cholesky factorization.
inline double log_pdf(const Gaussian& g, const Eigen::Ref<const Vector>& x) {
  detail::require_same_dim(x.size(), g.dim(), "log_pdf");
  const auto llt = detail::checked_llt(g.cov);
  const Vector diff = x - g.mean;
  const Vector w = llt.matrixL().solve(diff);
  const double d = static_cast<double>(g.dim());
  return -0.5 * (w.squaredNorm() + detail::log_det_from_llt(llt) + d * std::log(2.0 * std::numbers::pi));
}

/// Pre-factored Gaussian for repeated density evaluation (HMM emissions).
class GaussianDensity {
 public:
  GaussianDensity() = default;
  explicit GaussianDensity(const Gaussian& g) : mean_(g.mean), llt_(detail::checked_llt(g.cov)) {
    const double d = static_cast<double>(g.dim());
    log_norm_ = -0.5 * (detail::log_det_from_llt(llt_) + d * std::log(2.0 * std::numbers::pi));
  }

  [[nodiscard]] double log_pdf(const Eigen::Ref<const Vector>& x) const {
    const Vector w = llt_.matrixL().solve(x - mean_);
    return log_norm_ - 0.5 * w.squaredNorm();
  }

  /// Column-wise log densities of a d x n matrix of points.
  [[nodiscard]] Vector log_pdf_columns(const Matrix& xs) const {
    Matrix diff = xs.colwise() - mean_;
    llt_.matrixL().solveInPlace(diff);
    return (log_norm_ - 0.5 * diff.colwise().squaredNorm().array()).transpose();
  }

 private:
  Vector mean_;
  Eigen::LLT<Matrix> llt_;
  double log_norm_ = 0.0;
};

/// KL(q || p) in closed form. q may be diagonal, p full.
inline double kl_divergence(const Gaussian& q, const Gaussian& p) {
  detail::require_same_dim(q.dim(), p.dim(), "kl_divergence");
  const auto llt_p = detail::checked_llt(p.cov);
  const auto llt_q = detail::checked_llt(q.cov);
  const Vector diff = p.mean - q.mean;
  const double trace_term = llt_p.solve(q.cov).trace();
  const double maha = diff.dot(llt_p.solve(diff));
  const double d = static_cast<double>(q.dim());
  return 0.5 * (trace_term + maha - d + detail::log_det_from_llt(llt_p) - detail::log_det_from_llt(llt_q));
}

/// Exact conditional of the r block given an observed h block.
inline Gaussian condition_exact(const BlockedGaussian& j, const Eigen::Ref<const Vector>& z_h) {
  detail::require_same_dim(z_h.size(), j.h_dim(), "condition_exact");
  const Matrix hh = j.cov_hh();
  Eigen::LLT<Matrix> llt(hh);
  if (llt.info() != Eigen::Success) throw NumericalError("condition_exact: singular h-block covariance");
  const Matrix gain = llt.solve(Matrix(j.cov_hr())).transpose();  // Σrh Σhh^-1
  Vector mean = j.mu_r() + gain * (z_h - j.mu_h());
  Matrix cov = j.cov_rr() - gain * j.cov_hr();
  return {std::move(mean), symmetrize(cov)};
}

/// Draws `count` samples as columns of a d x count matrix: mean + L * eps.
inline Matrix sample(const Gaussian& g, int count, Rng& rng) {
  const auto llt = detail::checked_llt(g.cov);
  const Matrix eps = rng.normal_matrix(g.dim(), count);
  return (llt.matrixL() * eps).colwise() + g.mean;
}

/// Same as sample() with externally supplied standard-normal noise (d x k).
inline Matrix sample_with_noise(const Gaussian& g, const Matrix& eps) {
  const auto llt = detail::checked_llt(g.cov);
  return (llt.matrixL() * eps).colwise() + g.mean;
}

}  // namespace lid
