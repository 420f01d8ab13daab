#pragma once

// Variational autoencoders for one agent, and the loss assemblies used in
// training: the HMM-prior ELBO for two agents and the conditional-training
// ELBO for the second agent.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "lid/common.hpp"
#include "lid/gauss.hpp"
#include "lid/hmm.hpp"
#include "lid/net.hpp"

namespace lid {

inline constexpr double kMinLatentVar = 1e-8;
inline constexpr double kMaxLatentVar = 1e4;

/// Encoder emits (mean, log-variance) of a diagonal Gaussian posterior.
struct Vae {
  Mlp encoder;  // input_dim -> 2 * d_z
  Mlp decoder;  // d_z -> input_dim
  Eigen::Index d_z = 5;
  Eigen::Index input_dim = 0;
  std::vector<Eigen::Index> hidden{40, 20};

  [[nodiscard]] Eigen::Index param_count() const { return encoder.param_count() + decoder.param_count(); }

  [[nodiscard]] Vector flatten() const {
    Vector p(param_count());
    p << encoder.flatten(), decoder.flatten();
    return p;
  }

  void unflatten(const Eigen::Ref<const Vector>& p) {
    encoder.unflatten(p.head(encoder.param_count()));
    decoder.unflatten(p.tail(decoder.param_count()));
  }
};

/// Xavier-initialized VAE; decoder hidden widths mirror the encoder's.
inline Vae make_vae(Eigen::Index input_dim, Eigen::Index d_z, Rng& rng,
                    const std::vector<Eigen::Index>& hidden = {40, 20}, double slope = 0.01) {
  Vae v;
  v.d_z = d_z;
  v.input_dim = input_dim;
  v.hidden = hidden;
  std::vector<Eigen::Index> enc{input_dim};
  enc.insert(enc.end(), hidden.begin(), hidden.end());
  enc.push_back(2 * d_z);
  std::vector<Eigen::Index> dec{d_z};
  dec.insert(dec.end(), hidden.rbegin(), hidden.rend());
  dec.push_back(input_dim);
  v.encoder = make_mlp(enc, rng, slope);
  v.decoder = make_mlp(dec, rng, slope);
  return v;
}

/// Posterior moments of a batch, one column per sample.
struct PosteriorBatch {
  Matrix mean;  // d_z x T
  Matrix var;   // d_z x T, clamped
  Matrix clamp_active;  // 1 where the variance is inside the clamp range, else 0

  [[nodiscard]] Gaussian at(Eigen::Index t) const { return Gaussian::diagonal(mean.col(t), var.col(t)); }
};

inline PosteriorBatch posterior_from_encoder_output(const Matrix& e, Eigen::Index d_z) {
  PosteriorBatch p;
  p.mean = e.topRows(d_z);
  const Matrix raw = e.bottomRows(d_z).array().exp();
  p.var = raw.cwiseMax(kMinLatentVar).cwiseMin(kMaxLatentVar);
  p.clamp_active = ((raw.array() > kMinLatentVar) && (raw.array() < kMaxLatentVar)).cast<double>();
  return p;
}

inline PosteriorBatch encode_batch(const Vae& v, const Matrix& x, Tape* tape = nullptr) {
  if (x.rows() != v.input_dim) throw ConfigError("encode: input width does not match the VAE");
  return posterior_from_encoder_output(mlp_forward_batch(v.encoder, x, tape), v.d_z);
}

inline Gaussian encode(const Vae& v, const Eigen::Ref<const Vector>& x) { return encode_batch(v, Matrix(x)).at(0); }

inline Matrix decode_batch(const Vae& v, const Matrix& z, Tape* tape = nullptr) {
  if (z.rows() != v.d_z) throw ConfigError("decode: latent width does not match the VAE");
  return mlp_forward_batch(v.decoder, z, tape);
}

inline Vector decode(const Vae& v, const Eigen::Ref<const Vector>& z) { return decode_batch(v, Matrix(z)).col(0); }

// ---- priors ----

/// Per-timestep prior: a small set of distinct Gaussians and the index used
/// at each step (the marginal of the most likely HMM state).
struct PriorTrack {
  std::vector<Gaussian> dists;
  std::vector<int> at;
};

/// Marginals of the most likely state of the observation-free forward
/// variable, for both blocks, over `horizon` steps.
inline std::pair<PriorTrack, PriorTrack> hmm_prior_tracks(const Hmm& hmm, Eigen::Index horizon) {
  const AlphaSequence a = forward_unobserved(hmm, horizon);
  PriorTrack h;
  PriorTrack r;
  for (const auto& c : hmm.components) {
    h.dists.push_back(c.marginal_h());
    r.dists.push_back(c.marginal_r());
  }
  for (Eigen::Index t = 0; t < horizon; ++t) {
    const int best = most_likely(a.row(t));
    h.at.push_back(best);
    r.at.push_back(best);
  }
  return {h, r};
}

inline PriorTrack constant_prior(const Gaussian& g, Eigen::Index horizon) {
  return {{g}, std::vector<int>(static_cast<std::size_t>(horizon), 0)};
}

// ---- loss terms ----

struct VaeGrad {
  MlpGrad encoder;
  MlpGrad decoder;

  static VaeGrad zeros_like(const Vae& v) { return {MlpGrad::zeros_like(v.encoder), MlpGrad::zeros_like(v.decoder)}; }

  VaeGrad& operator+=(const VaeGrad& o) {
    encoder += o.encoder;
    decoder += o.decoder;
    return *this;
  }

  [[nodiscard]] Vector flatten() const {
    const Vector e = encoder.flatten();
    const Vector d = decoder.flatten();
    Vector out(e.size() + d.size());
    out << e, d;
    return out;
  }
};

/// Loss parts averaged over timesteps. Reconstruction is the squared error
/// summed over features and averaged over Monte Carlo samples.
struct LossParts {
  double recon_h = 0.0;
  double recon_r = 0.0;
  double kl_h = 0.0;
  double kl_r = 0.0;
  double cond = 0.0;
  double total = 0.0;
};

struct AgentTerm {
  double recon = 0.0;
  double kl = 0.0;
  VaeGrad grad;
};

namespace detail {

struct PriorCache {
  std::vector<Matrix> inv;
  std::vector<double> log_det;
  std::vector<Vector> mean;

  explicit PriorCache(const PriorTrack& track) {
    for (const auto& g : track.dists) {
      const auto llt = checked_llt(g.cov);
      inv.push_back(llt.solve(Matrix::Identity(g.dim(), g.dim())));
      log_det.push_back(log_det_from_llt(llt));
      mean.push_back(g.mean);
    }
  }
};

inline Matrix repeat_cols(const Matrix& x, int k) {
  Matrix out(x.rows(), x.cols() * k);
  for (int s = 0; s < k; ++s) out.middleCols(s * x.cols(), x.cols()) = x;
  return out;
}

/// Decoder reconstruction of latent columns against targets; accumulates
/// the decoder gradient scaled by `weight` and returns the latent gradient.
inline double recon_term(const Vae& v, const Matrix& z, const Matrix& targets, double weight, MlpGrad& dec_grad,
                         Matrix* latent_grad) {
  Tape tape;
  const Matrix d = decode_batch(v, z, &tape);
  const Matrix resid = d - targets;
  const double value = resid.squaredNorm();
  if (weight != 0.0) {
    auto back = mlp_backward(v.decoder, tape, 2.0 * weight * resid);
    dec_grad += back.grad;
    if (latent_grad) *latent_grad = std::move(back.input_grad);
  } else if (latent_grad) {
    *latent_grad = Matrix::Zero(z.rows(), z.cols());
  }
  return value;
}

}  // namespace detail

/// Reconstruction + beta * KL for one agent over a trajectory (columns of x),
/// with frozen standard-normal noise `eps` of shape d_z x (k * T).
inline AgentTerm vae_term(const Vae& v, const Matrix& x, const PriorTrack& prior, double beta, const Matrix& eps,
                          int k, double recon_weight = 1.0) {
  const Eigen::Index len = x.cols();
  const Eigen::Index dz = v.d_z;
  if (static_cast<Eigen::Index>(prior.at.size()) != len) throw ConfigError("vae_term: prior track length mismatch");
  if (eps.rows() != dz || eps.cols() != k * len) throw ConfigError("vae_term: noise shape mismatch");
  AgentTerm term;
  term.grad = VaeGrad::zeros_like(v);
  const double inv_t = 1.0 / static_cast<double>(len);

  Tape enc_tape;
  const PosteriorBatch post = encode_batch(v, x, &enc_tape);
  const Matrix stdev = post.var.cwiseSqrt();

  // reparameterized samples
  Matrix z(dz, k * len);
  for (int s = 0; s < k; ++s)
    z.middleCols(s * len, len) = post.mean + stdev.cwiseProduct(eps.middleCols(s * len, len));

  Matrix dz_grad;
  const double scale = recon_weight * inv_t / static_cast<double>(k);
  term.recon = detail::recon_term(v, z, detail::repeat_cols(x, k), scale, term.grad.decoder, &dz_grad) * inv_t /
               static_cast<double>(k);

  Matrix d_mean = Matrix::Zero(dz, len);
  Matrix d_var = Matrix::Zero(dz, len);
  for (int s = 0; s < k; ++s) {
    d_mean += dz_grad.middleCols(s * len, len);
    d_var += dz_grad.middleCols(s * len, len).cwiseProduct(eps.middleCols(s * len, len));
  }
  d_var = d_var.cwiseQuotient(2.0 * stdev);

  // KL(q_t || prior_t), diagonal q against full prior
  const detail::PriorCache cache(prior);
  const double d = static_cast<double>(dz);
  for (Eigen::Index t = 0; t < len; ++t) {
    const int idx = prior.at[static_cast<std::size_t>(t)];
    const Matrix& inv = cache.inv[idx];
    const Vector diff = post.mean.col(t) - cache.mean[idx];
    const Vector inv_diff = inv * diff;
    const double kl = 0.5 * (inv.diagonal().dot(post.var.col(t)) + diff.dot(inv_diff) - d + cache.log_det[idx] -
                             post.var.col(t).array().log().sum());
    term.kl += kl * inv_t;
    d_mean.col(t) += beta * inv_t * inv_diff;
    d_var.col(t) += beta * inv_t * 0.5 * (inv.diagonal() - post.var.col(t).cwiseInverse());
  }

  Matrix d_enc(2 * dz, len);
  d_enc.topRows(dz) = d_mean;
  d_enc.bottomRows(dz) = d_var.cwiseProduct(post.var).cwiseProduct(post.clamp_active);
  term.grad.encoder = mlp_backward(v.encoder, enc_tape, d_enc).grad;
  return term;
}

/// Standard-normal noise for k samples per timestep.
inline Matrix draw_noise(Eigen::Index d_z, Eigen::Index len, int k, Rng& rng) { return rng.normal_matrix(d_z, k * len); }

struct HhiLoss {
  LossParts parts;
  VaeGrad grad_h;
  VaeGrad grad_r;  // equals grad_h, already summed in, when weights are shared
  bool shared = false;
};

/// ELBO with HMM-marginal priors for both agents (returned as a loss to
/// minimize). If `v_h` and `v_r` are the same object, the gradients of both
/// halves are summed into `grad_h`.
inline HhiLoss elbo_hhi(const Vae& v_h, const Vae& v_r, const Matrix& x_h, const Matrix& x_r, const PriorTrack& prior_h,
                        const PriorTrack& prior_r, double beta, int k, const Matrix& eps_h, const Matrix& eps_r) {
  if (x_h.cols() != x_r.cols()) throw ConfigError("elbo_hhi: agent sequences differ in length");
  HhiLoss out;
  out.shared = (&v_h == &v_r);
  AgentTerm th = vae_term(v_h, x_h, prior_h, beta, eps_h, k);
  AgentTerm tr = vae_term(v_r, x_r, prior_r, beta, eps_r, k);
  out.parts.recon_h = th.recon;
  out.parts.recon_r = tr.recon;
  out.parts.kl_h = th.kl;
  out.parts.kl_r = tr.kl;
  out.parts.total = th.recon + tr.recon + beta * (th.kl + tr.kl);
  out.grad_h = std::move(th.grad);
  if (out.shared) {
    out.grad_h += tr.grad;
    out.grad_r = out.grad_h;
  } else {
    out.grad_r = std::move(tr.grad);
  }
  return out;
}

inline HhiLoss elbo_hhi(const Vae& v_h, const Vae& v_r, const Matrix& x_h, const Matrix& x_r, const PriorTrack& prior_h,
                        const PriorTrack& prior_r, double beta, int k, Rng& rng) {
  const Matrix eps_h = draw_noise(v_h.d_z, x_h.cols(), k, rng);
  const Matrix eps_r = draw_noise(v_r.d_z, x_r.cols(), k, rng);
  return elbo_hhi(v_h, v_r, x_h, x_r, prior_h, prior_r, beta, k, eps_h, eps_r);
}

// ---- conditional training ----

/// Conditional-training variants. v2.x condition posterior samples and
/// decode the conditional means; v3.x condition the posterior mean and
/// decode samples of the conditional. The .2 variants add the posterior
/// covariance to the h-block covariance in the gain.
enum class Variant { kV1, kV21, kV22, kV31, kV32 };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::kV1:
      return "v1";
    case Variant::kV21:
      return "v2.1";
    case Variant::kV22:
      return "v2.2";
    case Variant::kV31:
      return "v3.1";
    case Variant::kV32:
      return "v3.2";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "v1") return Variant::kV1;
  if (s == "v2.1") return Variant::kV21;
  if (s == "v2.2") return Variant::kV22;
  if (s == "v3.1") return Variant::kV31;
  if (s == "v3.2") return Variant::kV32;
  throw ConfigError("unknown variant '" + s + "'");
}

inline bool uses_posterior_cov(Variant v) { return v == Variant::kV22 || v == Variant::kV32; }
inline bool samples_posterior(Variant v) { return v == Variant::kV21 || v == Variant::kV22; }
inline ConditionMode condition_mode(Variant v) {
  return uses_posterior_cov(v) ? ConditionMode::kWithCov : ConditionMode::kPoint;
}

/// Latent conditioning targets for a trajectory: the h posterior at every
/// step and the state weights used in the mixture.
struct ConditionInputs {
  PosteriorBatch posterior_h;
  Matrix alpha;  // N x T
};

/// Per-timestep conditioning precomputed from frozen inputs. For v2.x each
/// step stores the affine map from an h sample to the conditional mean; for
/// v3.x the conditional mean and the Cholesky factor of its covariance.
struct ConditionalPlan {
  Variant variant = Variant::kV1;
  Matrix post_mean;  // d_z x T
  Matrix post_sd;    // d_z x T
  std::vector<Matrix> a;  // v2.x: gain; v3.x: Cholesky factor
  Matrix b;               // v2.x: offset; v3.x: conditional mean (d_z x T)

  [[nodiscard]] Eigen::Index length() const { return b.cols(); }
};

inline ConditionalPlan plan_conditionals(const Hmm& hmm, const ConditionInputs& in, Variant variant) {
  ConditionalPlan plan;
  plan.variant = variant;
  if (variant == Variant::kV1) return plan;
  const Eigen::Index len = in.posterior_h.mean.cols();
  const Eigen::Index dz = hmm.latent_dim();
  if (in.alpha.cols() != len) throw ConfigError("plan_conditionals: alpha length does not match the posterior");
  plan.post_mean = in.posterior_h.mean;
  plan.post_sd = in.posterior_h.var.cwiseSqrt();
  plan.b.resize(dz, len);
  plan.a.reserve(static_cast<std::size_t>(len));
  for (Eigen::Index t = 0; t < len; ++t) {
    const Gaussian post = in.posterior_h.at(t);
    const Vector alpha = in.alpha.col(t);
    if (samples_posterior(variant)) {
      const Matrix post_cov = uses_posterior_cov(variant) ? post.cov : Matrix::Zero(dz, dz);
      const ConditionalAffine affine(hmm, ConditionGains(hmm, post_cov), alpha);
      plan.a.push_back(affine.a);
      plan.b.col(t) = affine.b;
    } else {
      const Gaussian cond = gmr_condition(hmm, post, alpha, condition_mode(variant));
      plan.a.push_back(detail::checked_llt(cond.cov).matrixL().toDenseMatrix());
      plan.b.col(t) = cond.mean;
    }
  }
  return plan;
}

/// Latents fed to the decoder by the conditional term, d_z x (k * T), or an
/// empty matrix for v1. `eps` is standard-normal noise of the same shape.
inline Matrix conditional_latents(const ConditionalPlan& plan, int k, const Matrix& eps) {
  if (plan.variant == Variant::kV1) return {};
  const Eigen::Index len = plan.length();
  const Eigen::Index dz = plan.b.rows();
  if (eps.rows() != dz || eps.cols() != k * len) throw ConfigError("conditional_latents: noise shape mismatch");
  Matrix out(dz, k * len);
  const bool sample_h = samples_posterior(plan.variant);
  for (Eigen::Index t = 0; t < len; ++t) {
    const Matrix& a = plan.a[static_cast<std::size_t>(t)];
    for (int s = 0; s < k; ++s) {
      const Eigen::Index c = s * len + t;
      if (sample_h) {
        const Vector zh = plan.post_mean.col(t) + plan.post_sd.col(t).cwiseProduct(eps.col(c));
        out.col(c) = a * zh + plan.b.col(t);
      } else {
        out.col(c) = plan.b.col(t) + a * eps.col(c);
      }
    }
  }
  return out;
}

inline Matrix conditional_latents(const Hmm& hmm, const ConditionInputs& in, Variant variant, int k, const Matrix& eps) {
  return conditional_latents(plan_conditionals(hmm, in, variant), k, eps);
}

struct HriWeights {
  double recon = 1.0;
  double cond = 1.0;
};

struct HriLoss {
  LossParts parts;
  VaeGrad grad_r;
};

/// Conditional-training ELBO for the second agent's VAE (as a loss).
/// `cond_latents` comes from conditional_latents(); only the r decoder
/// receives gradient from the conditional term.
inline HriLoss elbo_hri(const Vae& v_r, const Matrix& x_r, const PriorTrack& prior_r, const Matrix& cond_latents,
                        double beta, int k, const Matrix& eps_r, const HriWeights& w = {}) {
  HriLoss out;
  AgentTerm tr = vae_term(v_r, x_r, prior_r, beta, eps_r, k, w.recon);
  out.parts.recon_r = tr.recon;
  out.parts.kl_r = tr.kl;
  out.grad_r = std::move(tr.grad);
  if (cond_latents.size() > 0) {
    const Eigen::Index len = x_r.cols();
    const int kc = static_cast<int>(cond_latents.cols() / len);
    const double scale = w.cond / static_cast<double>(len * kc);
    out.parts.cond =
        detail::recon_term(v_r, cond_latents, detail::repeat_cols(x_r, kc), scale, out.grad_r.decoder, nullptr) /
        static_cast<double>(len * kc);
  }
  out.parts.total = w.recon * tr.recon + beta * tr.kl + w.cond * out.parts.cond;
  return out;
}

/// Full conditional-training ELBO from raw inputs: encodes the h window with
/// the frozen human VAE, builds the conditional latents for `variant` and
/// assembles the loss. `alpha` is N x T.
inline HriLoss elbo_hri(const Vae& v_h, const Vae& v_r, const Matrix& x_h, const Matrix& x_r, const Hmm& hmm,
                        const Matrix& alpha, const PriorTrack& prior_r, double beta, int k, Variant variant,
                        const Matrix& eps_r, const Matrix& eps_cond, const HriWeights& w = {}) {
  ConditionInputs in{encode_batch(v_h, x_h), alpha};
  const Matrix zc = conditional_latents(hmm, in, variant, k, eps_cond);
  return elbo_hri(v_r, x_r, prior_r, zc, beta, k, eps_r, w);
}

}  // namespace lid
