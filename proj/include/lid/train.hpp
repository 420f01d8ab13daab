#pragma once

// Training pipelines: joint two-human training of the VAE with per-interaction
// HMM priors, conditional training of the robot VAE against the frozen human
// model, and the transition-state gate fit.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lid/bundle.hpp"
#include "lid/infer.hpp"

namespace lid {

struct EpochRecord {
  int epoch = 0;
  double recon_h = 0.0;
  double recon_r = 0.0;
  double kl = 0.0;
  double cond = 0.0;
  double total = 0.0;
  double val_mse = 0.0;
};

struct TrainTrace {
  std::vector<EpochRecord> epochs;
};

inline void write_trace_csv(const TrainTrace& trace, const std::filesystem::path& path) {
  Matrix m(static_cast<Eigen::Index>(trace.epochs.size()), 7);
  for (std::size_t i = 0; i < trace.epochs.size(); ++i) {
    const auto& e = trace.epochs[i];
    m.row(static_cast<Eigen::Index>(i)) << e.epoch, e.recon_h, e.recon_r, e.kl, e.cond, e.total, e.val_mse;
  }
  write_csv(path, m, {"epoch", "recon_h", "recon_r", "kl", "cond", "total", "val_mse"});
}

inline void adam_step(Vae& v, const VaeGrad& g, AdamState& s, const std::string& name) {
  Vector p = v.flatten();
  std::vector<ParamBlock> blocks = param_blocks(v.encoder, name + ".encoder");
  for (auto b : param_blocks(v.decoder, name + ".decoder")) {
    b.offset += v.encoder.param_count();
    blocks.push_back(b);
  }
  adam_step(p, g.flatten(), s, blocks);
  v.unflatten(p);
}

/// Mean over windows, frames and features of the squared error.
inline double window_mse(const Matrix& pred, const Matrix& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) throw ConfigError("mse: shape mismatch");
  if (pred.size() == 0) throw ConfigError("mse: empty input");
  return (pred - gt).squaredNorm() / static_cast<double>(pred.size());
}

namespace detail {

inline AdamState make_adam(const TrainConfig& c) {
  AdamState s;
  s.lr = c.lr;
  s.weight_decay = c.weight_decay;
  return s;
}

/// Carves a validation subset from `train`, stratified by label.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> carve_validation(const Dataset& ds,
                                                                                      double fraction,
                                                                                      std::uint64_t seed) {
  std::vector<std::size_t> fit;
  std::vector<std::size_t> val;
  if (fraction <= 0.0) return {ds.train, val};
  std::mt19937_64 engine(seed ^ 0x5eedfacecafeULL);
  std::map<std::string, std::vector<std::size_t>> by_label;
  for (std::size_t i : ds.train) by_label[ds.pairs[i].label].push_back(i);
  for (auto& [label, idx] : by_label) {
    std::shuffle(idx.begin(), idx.end(), engine);
    auto n_val = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size())));
    if (n_val >= idx.size()) n_val = idx.size() - 1;  // keep at least one training trajectory
    for (std::size_t k = 0; k < idx.size(); ++k) (k < n_val ? val : fit).push_back(idx[k]);
  }
  std::sort(fit.begin(), fit.end());
  std::sort(val.begin(), val.end());
  return {fit, val};
}

inline void require_labels(const Dataset& ds, const std::vector<std::size_t>& idx, const std::string& who) {
  if (idx.empty()) throw DataError(who + ": no training trajectories");
  for (const auto& label : ds.labels()) {
    const bool any = std::any_of(idx.begin(), idx.end(), [&](std::size_t i) { return ds.pairs[i].label == label; });
    if (!any) throw DataError(who + ": interaction '" + label + "' has no training trajectories");
  }
}

/// Windows of the second agent as seen by the first training stage: the
/// partner skeleton when the VAE is shared, else the recorded r frames.
inline Matrix second_agent_windows(const TrajectoryPair& p, bool shared, int w) {
  return shared ? window_features(p.partner_frames, w, FeatureKind::kPositions)
                : window_features(p.r_frames, w, FeatureKind::kJoints);
}

inline void check_finite(double v, int epoch, const std::string& who) {
  if (!std::isfinite(v)) throw NumericalError(who + ": non-finite loss at epoch " + std::to_string(epoch));
}

}  // namespace detail

/// Posterior-mean latents of both agents (2 d_z x T) under the first-stage
/// model; used for HMM fits and the gate fit.
inline Matrix joint_latents(const ModelBundle& b, const TrajectoryPair& p) {
  const int w = b.config.window;
  const bool shared = !b.partner_vae.has_value();
  const Matrix zh = encode_batch(b.human_vae, window_features(p.h_frames, w, FeatureKind::kPositions)).mean;
  const Matrix zr = encode_batch(shared ? b.human_vae : *b.partner_vae, detail::second_agent_windows(p, shared, w)).mean;
  Matrix z(zh.rows() + zr.rows(), zh.cols());
  z << zh, zr;
  return z;
}

/// Gate density fitted to human latents where the human-only forward
/// variable picks a reach state while the joint one picks a contact state.
/// Sequences are the joint latents (2 d_z x T). Returns a model without a
/// gate (and warns) if no such points exist.
inline TransitionStateModel fit_transition_model(const Hmm& hmm, const std::vector<int>& contact,
                                                 const std::vector<int>& reach, const std::vector<Matrix>& joint_seqs,
                                                 const RegSchedule& reg = RegSchedule::flat_default()) {
  for (int s : contact)
    if (s < 0 || s >= hmm.n_states()) throw ConfigError("fit_transition_states: contact state out of range");
  for (int s : reach)
    if (s < 0 || s >= hmm.n_states()) throw ConfigError("fit_transition_states: reach state out of range");
  TransitionStateModel tsm;
  tsm.contact_states = contact;
  tsm.reach_states = reach;
  const Eigen::Index dz = hmm.latent_dim();
  auto in = [](const std::vector<int>& set, int s) { return std::find(set.begin(), set.end(), s) != set.end(); };
  std::vector<Vector> pts;
  for (const auto& z : joint_seqs) {
    const Matrix zh = z.topRows(dz);
    const AlphaSequence a_h = forward(hmm, zh, Block::kHuman).alpha;
    const AlphaSequence a_full = forward(hmm, z, Block::kFull).alpha;
    for (Eigen::Index t = 0; t < z.cols(); ++t)
      if (in(reach, most_likely(a_h.row(t))) && in(contact, most_likely(a_full.row(t)))) pts.push_back(zh.col(t));
  }
  if (pts.empty()) {
    log_warn("fit_transition_states: no misclassified boundary points, transition gate disabled");
    return tsm;
  }
  tsm.gate = detail::fit_gaussian(pts, dz, reg);
  return tsm;
}

/// Fits the transition-state gate of every interaction with configured
/// contact states from the given training trajectories.
inline void fit_transition_states(ModelBundle& b, const Dataset& ds, const std::vector<std::size_t>& idx) {
  for (auto& [label, im] : b.hmms) {
    auto c = b.config.contact_states.find(label);
    if (c == b.config.contact_states.end()) continue;
    auto r = b.config.reach_states.find(label);
    const std::vector<int> reach = r == b.config.reach_states.end() ? std::vector<int>{} : r->second;
    std::vector<Matrix> seqs;
    for (std::size_t i : idx)
      if (ds.pairs[i].label == label) seqs.push_back(joint_latents(b, ds.pairs[i]));
    im.tsm = fit_transition_model(im.hmm, c->second, reach, seqs);
    im.hmm.contact_states = c->second;
    im.hmm.reach_states = reach;
  }
}

/// Refits one interaction's HMM on sampled joint latents. EM starts from the
/// equal-segment initialization; if a state ends up nearly unused the
/// segment initialization is kept instead.
inline Hmm refit_hmm(const std::vector<Matrix>& seqs, const TrainConfig& c, const std::string& label) {
  const Hmm init = init_segments(seqs, c.n_states, RegSchedule::flat_default());
  EmOptions opt;
  opt.max_iters = c.em_iters;
  opt.tol = c.em_tol;
  Hmm fitted = em_fit(init, seqs, opt).hmm;
  const Vector occ = state_occupancy(fitted, seqs);
  const double floor = 1.0 / (10.0 * c.n_states);
  if (occ.minCoeff() < floor) {
    log_warn("HMM for '" + label + "': a state holds " + std::to_string(occ.minCoeff()) +
             " of the responsibility mass (< " + std::to_string(floor) +
             "), mode collapse; falling back to the equal-segment model");
    return init;
  }
  return fitted;
}

/// Mean validation MSE of the second agent's predicted windows.
inline double validation_mse(const ModelBundle& b, const Dataset& ds, const std::vector<std::size_t>& idx) {
  if (idx.empty()) return 0.0;
  const int w = b.config.window;
  const bool hri = b.robot_vae.has_value();
  const bool shared = !b.partner_vae.has_value();
  double sum = 0.0;
  for (std::size_t i : idx) {
    const auto& p = ds.pairs[i];
    const Matrix x_h = window_features(p.h_frames, w, FeatureKind::kPositions);
    const Matrix gt = hri ? window_features(p.r_frames, w, FeatureKind::kJoints) : detail::second_agent_windows(p, shared, w);
    sum += window_mse(predict_windows(b, p.label, x_h), gt);
  }
  return sum / static_cast<double>(idx.size());
}

/// Joint two-agent training: alternates one VAE epoch against per-timestep
/// HMM priors with an EM refit of every interaction's HMM on the encoded
/// training set. Both humans share one VAE when partner skeletons are
/// present; otherwise a second VAE is trained on the r frames.
inline ModelBundle train_hhi(const Dataset& ds, const TrainConfig& cfg, std::uint64_t seed, TrainTrace* trace = nullptr) {
  cfg.validate();
  detail::require_labels(ds, ds.train, "train_hhi");
  const auto [fit_idx, val_idx] = detail::carve_validation(ds, cfg.val_fraction, seed);
  const int w = cfg.window;
  const bool shared = std::all_of(ds.pairs.begin(), ds.pairs.end(), [](const auto& p) { return p.has_partner(); });

  Rng rng(seed);
  ModelBundle b;
  b.config = cfg;
  b.seed = seed;
  b.stage = "hhi";
  b.variant = Variant::kV1;
  const Eigen::Index width_h = feature_width(FeatureKind::kPositions, kSkeletonWidth, w);
  b.human_vae = make_vae(width_h, cfg.d_z, rng, cfg.hidden);
  if (!shared) {
    const Eigen::Index width_r = feature_width(FeatureKind::kJoints, ds.pairs.front().r_frames.cols(), w);
    b.partner_vae = make_vae(width_r, cfg.d_z, rng, cfg.hidden);
  }
  for (const auto& label : ds.labels()) b.hmms[label] = InteractionModel{Hmm::standard(cfg.n_states, cfg.d_z), {}};

  std::vector<Matrix> xs_h;
  std::vector<Matrix> xs_r;
  for (std::size_t i : fit_idx) {
    xs_h.push_back(window_features(ds.pairs[i].h_frames, w, FeatureKind::kPositions));
    xs_r.push_back(detail::second_agent_windows(ds.pairs[i], shared, w));
  }

  AdamState opt_h = detail::make_adam(cfg);
  AdamState opt_r = detail::make_adam(cfg);
  std::vector<std::size_t> order(fit_idx.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    std::map<std::pair<std::string, Eigen::Index>, std::pair<PriorTrack, PriorTrack>> priors;
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t k : order) {
      const auto& label = ds.pairs[fit_idx[k]].label;
      const Eigen::Index len = xs_h[k].cols();
      auto key = std::make_pair(label, len);
      if (!priors.count(key)) priors[key] = hmm_prior_tracks(b.hmms.at(label).hmm, len);
      const auto& [ph, pr] = priors.at(key);
      const Vae& v_r = shared ? b.human_vae : *b.partner_vae;
      const HhiLoss loss = elbo_hhi(b.human_vae, v_r, xs_h[k], xs_r[k], ph, pr, cfg.beta, cfg.mc_samples, rng);
      detail::check_finite(loss.parts.total, epoch, "train_hhi");
      rec.recon_h += loss.parts.recon_h;
      rec.recon_r += loss.parts.recon_r;
      rec.kl += loss.parts.kl_h + loss.parts.kl_r;
      rec.total += loss.parts.total;
      adam_step(b.human_vae, loss.grad_h, opt_h, "human_vae");
      if (!shared) adam_step(*b.partner_vae, loss.grad_r, opt_r, "partner_vae");
    }
    const double n = static_cast<double>(order.size());
    rec.recon_h /= n;
    rec.recon_r /= n;
    rec.kl /= n;
    rec.total /= n;

    if (epoch % cfg.hmm_refit_every == 0 || epoch == cfg.epochs) {
      std::map<std::string, std::vector<Matrix>> seqs;
      for (std::size_t k = 0; k < fit_idx.size(); ++k) {
        const PosteriorBatch qh = encode_batch(b.human_vae, xs_h[k]);
        const PosteriorBatch qr = encode_batch(shared ? b.human_vae : *b.partner_vae, xs_r[k]);
        const Eigen::Index len = xs_h[k].cols();
        Matrix z(2 * cfg.d_z, len);
        z.topRows(cfg.d_z) = qh.mean + qh.var.cwiseSqrt().cwiseProduct(rng.normal_matrix(cfg.d_z, len));
        z.bottomRows(cfg.d_z) = qr.mean + qr.var.cwiseSqrt().cwiseProduct(rng.normal_matrix(cfg.d_z, len));
        seqs[ds.pairs[fit_idx[k]].label].push_back(std::move(z));
      }
      for (auto& [label, s] : seqs) b.hmms.at(label).hmm = refit_hmm(s, cfg, label);
    }
    rec.val_mse = validation_mse(b, ds, val_idx);
    log_debug("train_hhi epoch " + std::to_string(epoch) + " loss " + std::to_string(rec.total));
    if (trace) trace->epochs.push_back(rec);
  }
  fit_transition_states(b, ds, fit_idx);
  return b;
}

/// Per-trajectory inputs of conditional training, fixed because the human
/// VAE and the HMMs are frozen.
struct HriTrajectory {
  std::string label;
  Matrix x_r;
  PriorTrack prior_r;
  ConditionalPlan plan;
};

inline HriTrajectory prepare_hri(const ModelBundle& hhi, const TrajectoryPair& p, Variant variant) {
  const int w = hhi.config.window;
  const Hmm& hmm = hhi.interaction(p.label).hmm;
  HriTrajectory t;
  t.label = p.label;
  t.x_r = window_features(p.r_frames, w, FeatureKind::kJoints);
  const Matrix x_h = window_features(p.h_frames, w, FeatureKind::kPositions);
  ConditionInputs in{encode_batch(hhi.human_vae, x_h), Matrix()};
  in.alpha = forward(hmm, in.posterior_h.mean, Block::kHuman).alpha.values.transpose();
  t.plan = plan_conditionals(hmm, in, variant);
  t.prior_r = hmm_prior_tracks(hmm, x_h.cols()).second;
  return t;
}

/// Conditional training of the robot VAE with the human VAE and HMMs of
/// `hhi` frozen. The robot VAE starts from `warm_start` when given.
inline ModelBundle train_hri(const Dataset& ds, const ModelBundle& hhi, const TrainConfig& cfg, std::uint64_t seed,
                             TrainTrace* trace = nullptr, const Vae* warm_start = nullptr) {
  cfg.validate();
  detail::require_labels(ds, ds.train, "train_hri");
  if (hhi.human_vae.d_z != cfg.d_z) throw ConfigError("train_hri: config d_z does not match the first-stage model");
  if (hhi.config.window != cfg.window) throw ConfigError("train_hri: config window does not match the first-stage model");
  for (const auto& label : ds.labels())
    if (!hhi.hmms.count(label)) throw ConfigError("train_hri: first-stage model has no HMM for '" + label + "'");
  const auto [fit_idx, val_idx] = detail::carve_validation(ds, cfg.val_fraction, seed);
  const int w = cfg.window;

  Rng rng(seed);
  ModelBundle b = hhi;
  b.stage = "hri";
  b.variant = cfg.variant;
  b.seed = seed;
  b.config.variant = cfg.variant;
  const Eigen::Index width_r = feature_width(FeatureKind::kJoints, ds.pairs.front().r_frames.cols(), w);
  if (warm_start) {
    if (warm_start->input_dim != width_r || warm_start->d_z != cfg.d_z)
      throw ConfigError("train_hri: warm-start VAE does not match the robot features");
    b.robot_vae = *warm_start;
  } else {
    b.robot_vae = make_vae(width_r, cfg.d_z, rng, cfg.hidden);
  }
  Vae& v_r = *b.robot_vae;

  std::vector<HriTrajectory> trajs;
  for (std::size_t i : fit_idx) trajs.push_back(prepare_hri(hhi, ds.pairs[i], cfg.variant));

  AdamState opt = detail::make_adam(cfg);
  const HriWeights weights{cfg.recon_weight, cfg.cond_weight};
  std::vector<std::size_t> order(trajs.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t k : order) {
      const auto& t = trajs[k];
      const Eigen::Index len = t.x_r.cols();
      const Matrix eps_r = draw_noise(cfg.d_z, len, cfg.mc_samples, rng);
      Matrix zc;
      if (cfg.variant != Variant::kV1)
        zc = conditional_latents(t.plan, cfg.mc_samples, draw_noise(cfg.d_z, len, cfg.mc_samples, rng));
      const HriLoss loss = elbo_hri(v_r, t.x_r, t.prior_r, zc, cfg.beta, cfg.mc_samples, eps_r, weights);
      detail::check_finite(loss.parts.total, epoch, "train_hri");
      rec.recon_r += loss.parts.recon_r;
      rec.kl += loss.parts.kl_r;
      rec.cond += loss.parts.cond;
      rec.total += loss.parts.total;
      adam_step(v_r, loss.grad_r, opt, "robot_vae");
    }
    const double n = static_cast<double>(order.size());
    rec.recon_r /= n;
    rec.kl /= n;
    rec.cond /= n;
    rec.total /= n;
    rec.val_mse = validation_mse(b, ds, val_idx);
    log_debug("train_hri epoch " + std::to_string(epoch) + " loss " + std::to_string(rec.total));
    if (trace) trace->epochs.push_back(rec);
  }
  return b;
}

}  // namespace lid
