#pragma once

// Full-covariance hidden Markov model over the concatenated latent space of
// two agents: forward variables (observed and observation-free), Baum-Welch
// fitting, mixture conditioning and contact-segment gating.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lid/common.hpp"
#include "lid/gauss.hpp"

namespace lid {

/// HMM whose emissions are Gaussians over (z_h; z_r).
struct Hmm {
  Vector pi;
  Matrix trans;  // row-stochastic, trans(j, i) = P(i | j)
  std::vector<BlockedGaussian> components;
  std::vector<int> contact_states;
  std::vector<int> reach_states;

  [[nodiscard]] int n_states() const { return static_cast<int>(components.size()); }
  [[nodiscard]] Eigen::Index dim() const { return components.empty() ? 0 : components.front().base.dim(); }
  [[nodiscard]] Eigen::Index latent_dim() const { return components.empty() ? 0 : components.front().split; }

  /// Every component N(0, I) over 2*d_z, left-to-right transitions.
  static Hmm standard(int n_states, Eigen::Index d_z);

  void validate() const;
};

/// Row t holds the state distribution at step t.
struct AlphaSequence {
  Matrix values;  // T x N

  [[nodiscard]] Eigen::Index length() const { return values.rows(); }
  [[nodiscard]] Vector row(Eigen::Index t) const { return values.row(t).transpose(); }
};

enum class Block { kFull, kHuman, kRobot };

struct ForwardResult {
  AlphaSequence alpha;
  double log_likelihood = 0.0;
};

namespace detail {

inline Matrix left_to_right(int n, double stay = 0.9) {
  Matrix t = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    if (i + 1 < n) {
      t(i, i) = stay;
      t(i, i + 1) = 1.0 - stay;
    } else {
      t(i, i) = 1.0;
    }
  }
  return t;
}

inline Gaussian block_of(const BlockedGaussian& c, Block block) {
  switch (block) {
    case Block::kFull:
      return c.base;
    case Block::kHuman:
      return c.marginal_h();
    case Block::kRobot:
      return c.marginal_r();
  }
  return c.base;
}

}  // namespace detail

inline Hmm Hmm::standard(int n_states, Eigen::Index d_z) {
  Hmm h;
  h.pi = Vector::Zero(n_states);
  h.pi(0) = 1.0;
  h.trans = detail::left_to_right(n_states);
  for (int i = 0; i < n_states; ++i) h.components.emplace_back(Gaussian::standard(2 * d_z), d_z);
  return h;
}

inline void Hmm::validate() const {
  const int n = n_states();
  if (n < 1) throw ConfigError("hmm: no states");
  if (pi.size() != n || trans.rows() != n || trans.cols() != n) throw ConfigError("hmm: shape mismatch");
  if (std::abs(pi.sum() - 1.0) > 1e-9 || (pi.array() < 0.0).any())
    throw ConfigError("hmm: initial distribution is not a probability vector");
  for (int i = 0; i < n; ++i)
    if (std::abs(trans.row(i).sum() - 1.0) > 1e-9 || (trans.row(i).array() < 0.0).any())
      throw ConfigError("hmm: transition row " + std::to_string(i) + " is not stochastic");
  for (const auto& c : components)
    if (c.base.dim() != dim() || c.split != latent_dim()) throw ConfigError("hmm: inconsistent component shapes");
  std::set<int> contact(contact_states.begin(), contact_states.end());
  for (int s : reach_states)
    if (contact.count(s)) throw ConfigError("hmm: state " + std::to_string(s) + " is both contact and reach");
  for (int s : contact_states)
    if (s < 0 || s >= n) throw ConfigError("hmm: contact state out of range");
  for (int s : reach_states)
    if (s < 0 || s >= n) throw ConfigError("hmm: reach state out of range");
}

/// Per-state emission log-densities, N x T, for observations stored as the
/// columns of `obs`.
inline Matrix log_emissions(const Hmm& hmm, const Matrix& obs, Block block) {
  const int n = hmm.n_states();
  Matrix out(n, obs.cols());
  for (int i = 0; i < n; ++i) {
    const Gaussian g = detail::block_of(hmm.components[i], block);
    if (obs.rows() != g.dim()) throw ConfigError("forward: observation width does not match the selected block");
    out.row(i) = GaussianDensity(g).log_pdf_columns(obs).transpose();
  }
  return out;
}

/// Normalized forward recursion. When `log_b` has zero columns the
/// likelihood term is unity and `horizon` steps are produced; otherwise one
/// step per column.
inline ForwardResult forward_recursion(const Vector& pi, const Matrix& trans, const Matrix& log_b,
                                       Eigen::Index horizon, const Vector* alpha_prev = nullptr) {
  const bool observed = log_b.cols() > 0;
  const Eigen::Index steps = observed ? log_b.cols() : horizon;
  const Eigen::Index n = pi.size();
  ForwardResult res;
  res.alpha.values.resize(steps, n);
  Vector prev;
  for (Eigen::Index t = 0; t < steps; ++t) {
    Vector pred;
    if (t == 0 && alpha_prev == nullptr)
      pred = pi;
    else
      pred = trans.transpose() * (t == 0 ? *alpha_prev : prev);
    Vector a = pred;
    double shift = 0.0;
    if (observed) {
      shift = log_b.col(t).maxCoeff();
      if (!std::isfinite(shift))
        throw NumericalError("forward: all-zero likelihood row at timestep " + std::to_string(t));
      a = pred.array() * (log_b.col(t).array() - shift).exp();
    }
    const double total = a.sum();
    if (!(total > 0.0) || !std::isfinite(total))
      throw NumericalError("forward: all-zero likelihood row at timestep " + std::to_string(t));
    a /= total;
    res.log_likelihood += std::log(total) + shift;
    res.alpha.values.row(t) = a.transpose();
    prev = std::move(a);
  }
  return res;
}

/// Forward variable given observations (columns of `obs`) of the chosen block.
inline ForwardResult forward(const Hmm& hmm, const Matrix& obs, Block block) {
  if (obs.cols() < 1) throw ConfigError("forward: empty observation sequence");
  return forward_recursion(hmm.pi, hmm.trans, log_emissions(hmm, obs, block), 0);
}

/// Forward variable with the likelihood term set to unity; row 0 is pi.
inline AlphaSequence forward_unobserved(const Hmm& hmm, Eigen::Index horizon) {
  if (horizon < 1) throw ConfigError("forward_unobserved: horizon must be >= 1");
  return forward_recursion(hmm.pi, hmm.trans, Matrix(hmm.n_states(), 0), horizon).alpha;
}

/// Single step of the observed recursion continuing from `alpha_prev` (or
/// starting from pi when absent).
inline Vector forward_step(const Hmm& hmm, const std::optional<Vector>& alpha_prev,
                           const Eigen::Ref<const Vector>& z, Block block) {
  Matrix obs = z;
  const Matrix lb = log_emissions(hmm, obs, block);
  const auto res = forward_recursion(hmm.pi, hmm.trans, lb, 0, alpha_prev ? &*alpha_prev : nullptr);
  return res.alpha.row(0);
}

/// Index of the largest entry; ties resolve to the lowest index.
inline int most_likely(const Eigen::Ref<const Vector>& alpha) {
  int best = 0;
  for (Eigen::Index i = 1; i < alpha.size(); ++i)
    if (alpha(i) > alpha(best)) best = static_cast<int>(i);
  return best;
}

// ---- initialization and EM ----

namespace detail {

inline Gaussian fit_gaussian(const std::vector<Vector>& pts, Eigen::Index d, const RegSchedule& reg) {
  Vector mean = Vector::Zero(d);
  if (pts.empty()) return {mean, regularize_spd(Matrix::Identity(d, d), reg)};
  for (const auto& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  Matrix cov = Matrix::Zero(d, d);
  for (const auto& p : pts) cov.noalias() += (p - mean) * (p - mean).transpose();
  cov /= static_cast<double>(pts.size());
  return {mean, regularize_spd(cov, reg)};
}

/// Points of each equal time slice pooled across sequences.
inline std::vector<std::vector<Vector>> segment_points(const std::vector<Matrix>& seqs, int n_states) {
  std::vector<std::vector<Vector>> slices(n_states);
  for (const auto& s : seqs) {
    const Eigen::Index len = s.cols();
    for (int i = 0; i < n_states; ++i) {
      const Eigen::Index lo = i * len / n_states;
      const Eigen::Index hi = (i + 1) * len / n_states;
      for (Eigen::Index t = lo; t < hi; ++t) slices[i].push_back(s.col(t));
    }
  }
  return slices;
}

}  // namespace detail

/// Initial model from equal time slices: state i is fitted to the i-th slice
/// of every sequence, transitions are left-to-right (0.9 stay / 0.1 advance).
/// Sequences are d x T matrices with d = 2 * d_z.
inline Hmm init_segments(const std::vector<Matrix>& seqs, int n_states, const RegSchedule& reg = {}) {
  if (n_states < 1) throw ConfigError("init_segments: n_states must be >= 1");
  if (seqs.empty()) throw DataError("init_segments: no sequences");
  const Eigen::Index d = seqs.front().rows();
  if (d % 2 != 0) throw ConfigError("init_segments: latent width must be even (h and r blocks)");
  for (const auto& s : seqs) {
    if (s.cols() < n_states)
      throw DataError("init_segments: sequence of length " + std::to_string(s.cols()) + " shorter than " +
                      std::to_string(n_states) + " states");
    if (s.rows() != d) throw DataError("init_segments: inconsistent sequence widths");
  }
  Hmm h;
  h.pi = Vector::Zero(n_states);
  h.pi(0) = 1.0;
  h.trans = detail::left_to_right(n_states);
  const auto slices = detail::segment_points(seqs, n_states);
  for (int i = 0; i < n_states; ++i) h.components.emplace_back(detail::fit_gaussian(slices[i], d, reg), d / 2);
  return h;
}

struct EmOptions {
  int max_iters = 20;
  double tol = 1e-4;
  RegSchedule reg = RegSchedule::flat_default();
  double starvation_mass = 1e-8;
};

struct EmResult {
  Hmm hmm;
  std::vector<double> log_likelihood;  // entry k: parameters after k M-steps
  int reinitialized = 0;
};

namespace detail {

struct EStepStats {
  double log_likelihood = 0.0;
  Vector gamma0;             // sum over sequences of first-step responsibilities
  Matrix xi;                 // expected transition counts
  Vector mass;               // total responsibility per state
  Matrix weighted_sum;       // d x N
  std::vector<Matrix> gammas;  // per sequence N x T
};

inline EStepStats e_step(const Hmm& hmm, const std::vector<Matrix>& seqs) {
  const int n = hmm.n_states();
  const Eigen::Index d = hmm.dim();
  EStepStats st;
  st.gamma0 = Vector::Zero(n);
  st.xi = Matrix::Zero(n, n);
  st.mass = Vector::Zero(n);
  st.weighted_sum = Matrix::Zero(d, n);
  std::vector<GaussianDensity> dens;
  dens.reserve(n);
  for (const auto& c : hmm.components) dens.emplace_back(c.base);

  for (const auto& seq : seqs) {
    const Eigen::Index len = seq.cols();
    Matrix log_b(n, len);
    for (int i = 0; i < n; ++i) log_b.row(i) = dens[i].log_pdf_columns(seq).transpose();
    Matrix b(n, len);
    Vector shift(len);
    for (Eigen::Index t = 0; t < len; ++t) {
      shift(t) = log_b.col(t).maxCoeff();
      b.col(t) = (log_b.col(t).array() - shift(t)).exp();
    }
    Matrix alpha(n, len);
    Vector scale(len);
    for (Eigen::Index t = 0; t < len; ++t) {
      Vector pred = t == 0 ? hmm.pi : Vector(hmm.trans.transpose() * alpha.col(t - 1));
      Vector a = pred.array() * b.col(t).array();
      const double c = a.sum();
      if (!(c > 0.0) || !std::isfinite(c))
        throw NumericalError("em_fit: all-zero likelihood row at timestep " + std::to_string(t));
      scale(t) = c;
      alpha.col(t) = a / c;
      st.log_likelihood += std::log(c) + shift(t);
    }
    Matrix beta(n, len);
    beta.col(len - 1).setOnes();
    for (Eigen::Index t = len - 1; t > 0; --t) {
      const Vector bb = b.col(t).array() * beta.col(t).array();
      beta.col(t - 1) = hmm.trans * bb / scale(t);
    }
    Matrix gamma = alpha.array() * beta.array();
    for (Eigen::Index t = 0; t < len; ++t) {
      const double s = gamma.col(t).sum();
      if (s > 0.0) gamma.col(t) /= s;
    }
    for (Eigen::Index t = 0; t + 1 < len; ++t) {
      const Vector bb = b.col(t + 1).array() * beta.col(t + 1).array();
      st.xi.noalias() += (alpha.col(t) * bb.transpose()).cwiseProduct(hmm.trans) / scale(t + 1);
    }
    st.gamma0 += gamma.col(0);
    st.mass += gamma.rowwise().sum();
    st.weighted_sum.noalias() += seq * gamma.transpose();
    st.gammas.push_back(std::move(gamma));
  }
  return st;
}

}  // namespace detail

/// Baum-Welch over multiple d x T sequences starting from `init`.
inline EmResult em_fit(const Hmm& init, const std::vector<Matrix>& seqs, const EmOptions& opt = {}) {
  if (seqs.empty()) throw DataError("em_fit: no sequences");
  for (const auto& s : seqs) {
    if (s.cols() < 2) throw DataError("em_fit: every sequence needs at least 2 steps");
    if (s.rows() != init.dim()) throw DataError("em_fit: sequence width does not match the model");
  }
  init.validate();
  EmResult res;
  res.hmm = init;
  Hmm& hmm = res.hmm;
  const int n = hmm.n_states();
  const Eigen::Index d = hmm.dim();

  auto stats = detail::e_step(hmm, seqs);
  res.log_likelihood.push_back(stats.log_likelihood);
  for (int it = 0; it < opt.max_iters; ++it) {
    // M-step
    hmm.pi = stats.gamma0 / stats.gamma0.sum();
    for (int i = 0; i < n; ++i) {
      const double row = stats.xi.row(i).sum();
      if (row > 0.0) hmm.trans.row(i) = stats.xi.row(i) / row;
    }
    for (int i = 0; i < n; ++i) {
      if (stats.mass(i) < opt.starvation_mass) {
        const auto slices = detail::segment_points(seqs, n);
        int widest = 0;
        double widest_var = -1.0;
        for (int k = 0; k < n; ++k) {
          if (slices[k].size() < 2) continue;
          const Gaussian g = detail::fit_gaussian(slices[k], d, RegSchedule::none());
          if (g.cov.trace() > widest_var) {
            widest_var = g.cov.trace();
            widest = k;
          }
        }
        hmm.components[i].base = detail::fit_gaussian(slices[widest], d, opt.reg);
        ++res.reinitialized;
        log_warn("em_fit: component " + std::to_string(i) + " starved (mass " + std::to_string(stats.mass(i)) +
                 "), reinitialized from segment " + std::to_string(widest));
        continue;
      }
      const Vector mean = stats.weighted_sum.col(i) / stats.mass(i);
      Matrix cov = Matrix::Zero(d, d);
      for (std::size_t s = 0; s < seqs.size(); ++s) {
        const Matrix diff = seqs[s].colwise() - mean;
        cov.noalias() += diff * stats.gammas[s].row(i).asDiagonal() * diff.transpose();
      }
      cov /= stats.mass(i);
      hmm.components[i].base = Gaussian(mean, regularize_spd(cov, opt.reg));
    }
    stats = detail::e_step(hmm, seqs);
    const double prev = res.log_likelihood.back();
    res.log_likelihood.push_back(stats.log_likelihood);
    if (std::abs(stats.log_likelihood - prev) <= opt.tol * std::max(1.0, std::abs(prev))) break;
  }
  return res;
}

/// Mass of responsibility each state receives on `seqs`, normalized to sum 1.
inline Vector state_occupancy(const Hmm& hmm, const std::vector<Matrix>& seqs) {
  const auto st = detail::e_step(hmm, seqs);
  return st.mass / st.mass.sum();
}

// ---- conditioning ----

enum class ConditionMode { kPoint, kWithCov };

/// Per-component conditioning gains for a given posterior covariance.
/// For every state: K_i = Σ^rh_i (Σ^hh_i + Σ_z)^-1.
struct ConditionGains {
  std::vector<Matrix> gain;

  ConditionGains(const Hmm& hmm, const Matrix& posterior_cov) {
    gain.reserve(hmm.components.size());
    for (const auto& c : hmm.components) {
      const Matrix hh = Matrix(c.cov_hh()) + posterior_cov;
      Eigen::LLT<Matrix> llt(hh);
      if (llt.info() != Eigen::Success) throw NumericalError("gmr_condition: singular conditioning matrix");
      gain.push_back(llt.solve(Matrix(c.cov_hr())).transpose());
    }
  }
};

/// Mixture conditional mean as an affine map of the conditioning point:
/// mean(z) = A z + b. Used when many posterior samples share one alpha.
struct ConditionalAffine {
  Matrix a;
  Vector b;

  ConditionalAffine(const Hmm& hmm, const ConditionGains& g, const Eigen::Ref<const Vector>& alpha) {
    const Eigen::Index dz = hmm.latent_dim();
    a = Matrix::Zero(dz, dz);
    b = Vector::Zero(dz);
    for (int i = 0; i < hmm.n_states(); ++i) {
      const auto& c = hmm.components[i];
      a.noalias() += alpha(i) * g.gain[i];
      b.noalias() += alpha(i) * (Vector(c.mu_r()) - g.gain[i] * c.mu_h());
    }
  }

  [[nodiscard]] Matrix apply(const Matrix& zs) const { return (a * zs).colwise() + b; }
};

/// Conditional distribution of the r block given a posterior over the h
/// block, mixed by `alpha`. Point mode ignores the posterior covariance.
inline Gaussian gmr_condition(const Hmm& hmm, const Gaussian& posterior, const Eigen::Ref<const Vector>& alpha,
                              ConditionMode mode, const RegSchedule& reg = RegSchedule::conditional()) {
  const Eigen::Index dz = hmm.latent_dim();
  if (posterior.dim() != dz) throw ConfigError("gmr_condition: posterior width does not match the h block");
  if (alpha.size() != hmm.n_states()) throw ConfigError("gmr_condition: alpha length does not match state count");
  const Matrix post_cov = mode == ConditionMode::kWithCov ? posterior.cov : Matrix::Zero(dz, dz);
  const ConditionGains gains(hmm, post_cov);
  Vector mean = Vector::Zero(dz);
  Matrix second = Matrix::Zero(dz, dz);
  for (int i = 0; i < hmm.n_states(); ++i) {
    const auto& c = hmm.components[i];
    const Vector mu_i = c.mu_r() + gains.gain[i] * (posterior.mean - c.mu_h());
    const Matrix sigma_i = Matrix(c.cov_rr()) - gains.gain[i] * c.cov_hr() + mu_i * mu_i.transpose();
    mean.noalias() += alpha(i) * mu_i;
    second.noalias() += alpha(i) * sigma_i;
  }
  Matrix cov = second - mean * mean.transpose();
  return {std::move(mean), regularize_spd(cov, reg)};
}

// ---- contact gating ----

/// Auxiliary density over human latents that the human-only forward
/// variable misassigns at the reach -> contact boundary.
struct TransitionStateModel {
  std::optional<Gaussian> gate;
  std::vector<int> contact_states;
  std::vector<int> reach_states;

  [[nodiscard]] bool gate_enabled() const { return gate.has_value(); }
};

struct GateState {
  bool fired = false;
};

struct GateDecision {
  bool in_contact = false;
  bool stiffness_low = false;
};

/// Decides whether the interaction has entered its contact phase. Fires when
/// the contact segment outweighs the reach segment under alpha, or when the
/// transition-state density at z_h exceeds the alpha-weighted reach
/// evidence. Latches once fired.
inline GateDecision contact_gate(const Hmm& hmm, const Eigen::Ref<const Vector>& alpha, const TransitionStateModel& tsm,
                                 const Eigen::Ref<const Vector>& z_h, GateState& state) {
  if (state.fired) return {true, true};
  if (tsm.contact_states.empty()) {
    log_warn("contact_gate: no contact states configured, gate stays off");
    return {false, false};
  }
  double p_contact = 0.0;
  double p_reach = 0.0;
  for (int s : tsm.contact_states) p_contact += alpha(s);
  for (int s : tsm.reach_states) p_reach += alpha(s);
  bool fire = p_contact > p_reach;
  if (!fire && tsm.gate_enabled() && !tsm.reach_states.empty()) {
    const double log_gate = log_pdf(*tsm.gate, z_h);
    double log_reach = -std::numeric_limits<double>::infinity();
    for (int s : tsm.reach_states) {
      if (alpha(s) <= 0.0) continue;
      const double term = std::log(alpha(s)) + log_pdf(hmm.components[s].marginal_h(), z_h);
      log_reach = std::max(log_reach, term) + std::log1p(std::exp(-std::abs(log_reach - term)));
    }
    fire = log_gate > log_reach;
  }
  state.fired = fire;
  return {fire, fire};
}

}  // namespace lid
