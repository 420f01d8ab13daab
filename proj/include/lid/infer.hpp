#pragma once

// Reactive generation of the second agent's motion from streamed human
// observations: encode, filter the state distribution, condition, decode and
// optionally adapt the command with prior-regularized IK once in contact.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lid/bundle.hpp"
#include "lid/data.hpp"
#include "lid/hmm.hpp"
#include "lid/kin.hpp"
#include "lid/vae.hpp"

namespace lid {

struct ReactiveState {
  std::optional<Vector> alpha_prev;
  GateState gate;
};

struct StepOutput {
  Vector q_cmd;          // last-frame command (joints in radians, or partner positions)
  Vector window;         // full decoded window
  bool stiffness_low = false;
  bool ik_applied = false;
  bool ik_skipped = false;  // gate fired but no hand position was available
  Vector alpha;
  Gaussian latent_r;
  Gaussian posterior_h;
};

/// Last frame of a decoded window. For joint windows this is the trailing
/// joint vector; for position windows the positions (not deltas) of the
/// final frame.
inline Vector last_frame_of(const Eigen::Ref<const Vector>& window, FeatureKind kind, int w) {
  if (kind == FeatureKind::kJoints) return window.tail(window.size() / w);
  const Eigen::Index per_frame = window.size() / w;
  const Eigen::Index joints = per_frame / 6;
  Vector out(3 * joints);
  const auto frame = window.tail(per_frame);
  for (Eigen::Index j = 0; j < joints; ++j) out.segment(3 * j, 3) = frame.segment(6 * j, 3);
  return out;
}

namespace detail {

inline void check_human_width(const ModelBundle& b, Eigen::Index rows) {
  if (rows != b.human_vae.input_dim)
    throw ConfigError("human window width " + std::to_string(rows) + " does not match the human VAE (" +
                      std::to_string(b.human_vae.input_dim) + ")");
}

}  // namespace detail

/// One control step. `x_h` is the current human feature window; `hand_pos`
/// the partner-facing target used by IK once the gate has fired.
inline StepOutput reactive_step(const ModelBundle& bundle, const std::string& label, const Eigen::Ref<const Vector>& x_h,
                                const std::optional<Vec3>& hand_pos, const KinematicChain& chain, ReactiveState& state) {
  const InteractionModel& im = bundle.interaction(label);
  detail::check_human_width(bundle, x_h.size());
  StepOutput out;
  out.posterior_h = encode(bundle.human_vae, x_h);
  out.alpha = forward_step(im.hmm, state.alpha_prev, out.posterior_h.mean, Block::kHuman);
  state.alpha_prev = out.alpha;
  out.latent_r = gmr_condition(im.hmm, out.posterior_h, out.alpha, condition_mode(bundle.variant));
  out.window = decode(bundle.output_vae(), out.latent_r.mean);
  out.q_cmd = last_frame_of(out.window, bundle.output_kind(), bundle.config.window);
  if (!im.tsm.contact_states.empty()) {
    const GateDecision g = contact_gate(im.hmm, out.alpha, im.tsm, out.posterior_h.mean, state.gate);
    out.stiffness_low = g.stiffness_low;
    if (g.in_contact && bundle.output_kind() == FeatureKind::kJoints) {
      if (hand_pos && out.q_cmd.size() == chain.dof()) {
        out.q_cmd = ik_with_prior(chain, *hand_pos, out.q_cmd, 1.0, 0.01).q;
        out.ik_applied = true;
      } else {
        out.ik_skipped = true;
      }
    }
  }
  return out;
}

/// Causal weighted moving average over rows of `traj` (T x n). weights[k]
/// multiplies the sample K-1-k steps back, so the last weight applies to the
/// newest sample. During startup the available suffix of weights is
/// renormalized.
inline Matrix smooth(const Matrix& traj, const std::vector<double>& weights = {0.1, 0.2, 0.3, 0.4}) {
  if (weights.empty()) throw ConfigError("smooth: empty weights");
  for (double wv : weights)
    if (!(wv >= 0.0)) throw ConfigError("smooth: weights must be non-negative");
  const auto k = static_cast<Eigen::Index>(weights.size());
  Matrix out(traj.rows(), traj.cols());
  for (Eigen::Index t = 0; t < traj.rows(); ++t) {
    const Eigen::Index avail = std::min(k, t + 1);
    double total = 0.0;
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(traj.cols());
    for (Eigen::Index b = 0; b < avail; ++b) {
      const double wv = weights[static_cast<std::size_t>(k - 1 - b)];
      acc += wv * traj.row(t - b);
      total += wv;
    }
    if (!(total > 0.0)) throw ConfigError("smooth: weights over the available prefix sum to zero");
    out.row(t) = acc / total;
  }
  return out;
}

struct RolloutOptions {
  std::optional<std::vector<double>> smoothing;  // applied to q after the rollout
  std::optional<Matrix> hand_positions;           // T x 3 per input frame
};

struct RolloutResult {
  Matrix q;       // count x n commands, one row per window
  Matrix windows; // width x count decoded windows
  Matrix alpha;   // count x N
  std::vector<bool> gate;
  std::vector<bool> ik_skipped;
  Matrix latent_h;  // d_z x count posterior means
  Matrix latent_r;  // d_z x count conditional means

  [[nodiscard]] Eigen::Index length() const { return q.rows(); }
};

/// Folds reactive_step over a human frame sequence (T x 9); the output has
/// T - w + 1 rows. Hand positions, if given, are read at each window's last
/// frame.
inline RolloutResult rollout(const ModelBundle& bundle, const std::string& label, const Matrix& h_frames,
                             const KinematicChain& chain, const RolloutOptions& opt = {}) {
  const int w = bundle.config.window;
  const Matrix x_h = window_features(h_frames, w, FeatureKind::kPositions);
  if (opt.hand_positions && (opt.hand_positions->rows() != h_frames.rows() || opt.hand_positions->cols() != 3))
    throw DataError("rollout: hand positions must be T x 3");
  const Eigen::Index n = x_h.cols();
  RolloutResult r;
  ReactiveState state;
  for (Eigen::Index t = 0; t < n; ++t) {
    std::optional<Vec3> hand;
    if (opt.hand_positions) hand = opt.hand_positions->row(t + w - 1).transpose();
    const StepOutput s = reactive_step(bundle, label, x_h.col(t), hand, chain, state);
    if (t == 0) {
      r.q.resize(n, s.q_cmd.size());
      r.windows.resize(s.window.size(), n);
      r.alpha.resize(n, s.alpha.size());
      r.latent_h.resize(s.posterior_h.dim(), n);
      r.latent_r.resize(s.latent_r.dim(), n);
    }
    r.q.row(t) = s.q_cmd.transpose();
    r.windows.col(t) = s.window;
    r.alpha.row(t) = s.alpha.transpose();
    r.gate.push_back(s.stiffness_low);
    r.ik_skipped.push_back(s.ik_skipped);
    r.latent_h.col(t) = s.posterior_h.mean;
    r.latent_r.col(t) = s.latent_r.mean;
  }
  if (opt.smoothing) r.q = smooth(r.q, *opt.smoothing);
  return r;
}

/// Decoded windows of the second agent for a whole human window sequence
/// (width x T), computed in batch. Matches rollout() without IK.
inline Matrix predict_windows(const ModelBundle& bundle, const std::string& label, const Matrix& x_h) {
  const InteractionModel& im = bundle.interaction(label);
  detail::check_human_width(bundle, x_h.rows());
  const PosteriorBatch post = encode_batch(bundle.human_vae, x_h);
  const ForwardResult fw = forward(im.hmm, post.mean, Block::kHuman);
  Matrix z(bundle.human_vae.d_z, x_h.cols());
  const ConditionMode mode = condition_mode(bundle.variant);
  for (Eigen::Index t = 0; t < x_h.cols(); ++t) z.col(t) = gmr_condition(im.hmm, post.at(t), fw.alpha.row(t), mode).mean;
  return decode_batch(bundle.output_vae(), z);
}

/// CSV with columns t, q_1..q_n, stiffness_low, alpha_1..alpha_N, gate.
inline void write_rollout_csv(const RolloutResult& r, const std::filesystem::path& path) {
  std::vector<std::string> header{"t"};
  for (Eigen::Index i = 0; i < r.q.cols(); ++i) header.push_back("q_" + std::to_string(i + 1));
  header.emplace_back("stiffness_low");
  for (Eigen::Index i = 0; i < r.alpha.cols(); ++i) header.push_back("alpha_" + std::to_string(i + 1));
  header.emplace_back("gate");
  Matrix m(r.length(), static_cast<Eigen::Index>(header.size()));
  for (Eigen::Index t = 0; t < r.length(); ++t) {
    const auto ut = static_cast<std::size_t>(t);
    Eigen::Index c = 0;
    m(t, c++) = static_cast<double>(t);
    for (Eigen::Index i = 0; i < r.q.cols(); ++i) m(t, c++) = r.q(t, i);
    m(t, c++) = r.gate[ut] ? 1.0 : 0.0;
    for (Eigen::Index i = 0; i < r.alpha.cols(); ++i) m(t, c++) = r.alpha(t, i);
    m(t, c++) = r.gate[ut] ? 1.0 : 0.0;
  }
  write_csv(path, m, header);
}

}  // namespace lid
