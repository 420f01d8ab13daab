#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "lid/vae.hpp"

using namespace lid;
using lid::testing::max_abs_diff;
using lid::testing::random_gaussian;

namespace {

Mlp linear_layer(const Matrix& w, const Vector& b) {
  Mlp m;
  m.layers.push_back({w, b});
  return m;
}

/// VAE whose encoder mean is x itself and whose decoder is the identity.
Vae identity_vae(Eigen::Index d, double log_var) {
  Vae v;
  v.d_z = d;
  v.input_dim = d;
  Matrix we = Matrix::Zero(2 * d, d);
  we.topRows(d) = Matrix::Identity(d, d);
  Vector be = Vector::Zero(2 * d);
  be.tail(d).setConstant(log_var);
  v.encoder = linear_layer(we, be);
  v.decoder = linear_layer(Matrix::Identity(d, d), Vector::Zero(d));
  return v;
}

Hmm random_hmm(int n, Eigen::Index dz, Rng& rng) {
  Hmm h = Hmm::standard(n, dz);
  for (auto& c : h.components) c.base = random_gaussian(2 * dz, rng);
  return h;
}

PriorTrack random_track(Eigen::Index dz, Eigen::Index len, Rng& rng) {
  PriorTrack t;
  t.dists = {random_gaussian(dz, rng), random_gaussian(dz, rng)};
  for (Eigen::Index i = 0; i < len; ++i) t.at.push_back(static_cast<int>(i % 2));
  return t;
}

Matrix random_alpha(int n, Eigen::Index len, Rng& rng) {
  Matrix a = (rng.normal_matrix(n, len).array().abs() + 0.05).matrix();
  for (Eigen::Index t = 0; t < len; ++t) a.col(t) /= a.col(t).sum();
  return a;
}

struct Small {
  Rng rng{61};
  Vae v_h;
  Vae v_r;
  Matrix x_h;
  Matrix x_r;
  Small() {
    v_h = make_vae(6, 2, rng, {5, 4});
    v_r = make_vae(4, 2, rng, {5, 4});
    for (auto* v : {&v_h, &v_r}) {
      Vector p = v->flatten();
      p += 0.05 * rng.normal_vector(p.size());  // non-zero biases
      v->unflatten(p);
    }
    x_h = rng.normal_matrix(6, 3);
    x_r = rng.normal_matrix(4, 3);
  }
};

}  // namespace

TEST(Encode, ZeroEncoderGivesStandardPosterior) {
  Rng rng(62);
  Vae v = make_vae(6, 3, rng);
  v.encoder.unflatten(Vector::Zero(v.encoder.param_count()));
  const Gaussian g = encode(v, rng.normal_vector(6));
  EXPECT_EQ(g.mean.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(max_abs_diff(g.cov, Matrix::Identity(3, 3)), 0.0);
}

TEST(Encode, DiagonalPositiveCovariance) {
  Rng rng(63);
  const Vae v = make_vae(8, 3, rng);
  for (int rep = 0; rep < 20; ++rep) {
    const Gaussian g = encode(v, 10.0 * rng.normal_vector(8));
    EXPECT_GT(g.cov.diagonal().minCoeff(), 0.0);
    EXPECT_EQ((g.cov - Matrix(g.cov.diagonal().asDiagonal())).cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Encode, VarianceClamped) {
  const Vae lo = identity_vae(2, -100.0);
  const Vae hi = identity_vae(2, 100.0);
  EXPECT_DOUBLE_EQ(encode(lo, Vector::Zero(2)).cov(0, 0), kMinLatentVar);
  EXPECT_DOUBLE_EQ(encode(hi, Vector::Zero(2)).cov(0, 0), kMaxLatentVar);
}

TEST(Encode, IdentityEncoderReproducesInput) {
  Rng rng(64);
  const Vae v = identity_vae(4, 0.0);
  const Vector x = rng.normal_vector(4);
  EXPECT_LT(max_abs_diff(encode(v, x).mean, x), 1e-9);
}

TEST(Encode, WidthChecked) {
  Rng rng(65);
  const Vae v = make_vae(8, 3, rng);
  EXPECT_THROW(encode(v, Vector::Zero(7)), ConfigError);
  EXPECT_THROW(decode(v, Vector::Zero(4)), ConfigError);
}

TEST(Decode, ZeroDecoderAndDeterminism) {
  Rng rng(66);
  Vae v = make_vae(8, 3, rng);
  const Vector z = rng.normal_vector(3);
  EXPECT_EQ(max_abs_diff(decode(v, z), decode(v, z)), 0.0);
  v.decoder.unflatten(Vector::Zero(v.decoder.param_count()));
  EXPECT_EQ(decode(v, z).cwiseAbs().maxCoeff(), 0.0);
}

TEST(PriorTracks, FollowMostLikelyUnobservedState) {
  Rng rng(67);
  Hmm h = random_hmm(3, 2, rng);
  const auto [ph, pr] = hmm_prior_tracks(h, 40);
  const auto a = forward_unobserved(h, 40);
  for (Eigen::Index t = 0; t < 40; ++t) {
    const int best = most_likely(a.row(t));
    EXPECT_EQ(ph.at[static_cast<std::size_t>(t)], best);
    EXPECT_EQ(pr.at[static_cast<std::size_t>(t)], best);
    EXPECT_EQ(max_abs_diff(pr.dists[static_cast<std::size_t>(best)].mean, h.components[best].mu_r()), 0.0);
  }
  EXPECT_EQ(ph.at[0], 0);
}

TEST(ElboHhi, PerfectAutoencoderReconstructionLimit) {
  Rng rng(68);
  const Vae v = identity_vae(3, -100.0);  // variance clamps at 1e-8
  const Matrix x = rng.normal_matrix(3, 5);
  const PriorTrack p = constant_prior(Gaussian::standard(3), 5);
  const HhiLoss loss = elbo_hhi(v, v, x, x, p, p, 0.0, 10, rng);
  EXPECT_LT(loss.parts.total, 1e-6);
}

TEST(ElboHhi, KlMatchesClosedForm) {
  Small s;
  const PriorTrack ph = random_track(2, 3, s.rng);
  const PriorTrack pr = random_track(2, 3, s.rng);
  const HhiLoss loss = elbo_hhi(s.v_h, s.v_r, s.x_h, s.x_r, ph, pr, 0.3, 2, s.rng);
  const PosteriorBatch q = encode_batch(s.v_h, s.x_h);
  double kl = 0.0;
  for (Eigen::Index t = 0; t < 3; ++t) kl += kl_divergence(q.at(t), ph.dists[ph.at[t]]) / 3.0;
  EXPECT_NEAR(loss.parts.kl_h, kl, 1e-12);
}

TEST(ElboHhi, GradientsMatchFiniteDifferences) {
  Small s;
  const PriorTrack ph = random_track(2, 3, s.rng);
  const PriorTrack pr = random_track(2, 3, s.rng);
  const int k = 2;
  const Matrix eh = draw_noise(2, 3, k, s.rng);
  const Matrix er = draw_noise(2, 3, k, s.rng);
  const HhiLoss loss = elbo_hhi(s.v_h, s.v_r, s.x_h, s.x_r, ph, pr, 5e-3, k, eh, er);
  const auto f_h = [&](const Vector& p) {
    Vae v = s.v_h;
    v.unflatten(p);
    return elbo_hhi(v, s.v_r, s.x_h, s.x_r, ph, pr, 5e-3, k, eh, er).parts.total;
  };
  const auto f_r = [&](const Vector& p) {
    Vae v = s.v_r;
    v.unflatten(p);
    return elbo_hhi(s.v_h, v, s.x_h, s.x_r, ph, pr, 5e-3, k, eh, er).parts.total;
  };
  EXPECT_LT(grad_check(f_h, s.v_h.flatten(), loss.grad_h.flatten()), 1e-4);
  EXPECT_LT(grad_check(f_r, s.v_r.flatten(), loss.grad_r.flatten()), 1e-4);
}

TEST(ElboHhi, SharedWeightsSumBothHalves) {
  Small s;
  const Matrix x_r = s.rng.normal_matrix(6, 3);
  const PriorTrack p = random_track(2, 3, s.rng);
  const Matrix e1 = draw_noise(2, 3, 2, s.rng);
  const Matrix e2 = draw_noise(2, 3, 2, s.rng);
  const HhiLoss shared = elbo_hhi(s.v_h, s.v_h, s.x_h, x_r, p, p, 5e-3, 2, e1, e2);
  const Vae copy = s.v_h;
  const HhiLoss split = elbo_hhi(s.v_h, copy, s.x_h, x_r, p, p, 5e-3, 2, e1, e2);
  EXPECT_TRUE(shared.shared);
  EXPECT_FALSE(split.shared);
  const Vector sum = split.grad_h.flatten() + split.grad_r.flatten();
  EXPECT_LT(max_abs_diff(shared.grad_h.flatten(), sum), 1e-12);
  EXPECT_EQ(max_abs_diff(shared.grad_r.flatten(), shared.grad_h.flatten()), 0.0);
  // the shared gradient is the derivative of the total w.r.t. the one set of weights
  const auto f = [&](const Vector& p_) {
    Vae v = s.v_h;
    v.unflatten(p_);
    return elbo_hhi(v, v, s.x_h, x_r, p, p, 5e-3, 2, e1, e2).parts.total;
  };
  EXPECT_LT(grad_check(f, s.v_h.flatten(), shared.grad_h.flatten()), 1e-4);
}

class ElboHriVariant : public ::testing::TestWithParam<Variant> {};

TEST_P(ElboHriVariant, GradientsMatchFiniteDifferences) {
  Small s;
  const Variant variant = GetParam();
  const Hmm hmm = random_hmm(3, 2, s.rng);
  const Matrix alpha = random_alpha(3, 3, s.rng);
  const PriorTrack pr = random_track(2, 3, s.rng);
  const int k = 2;
  const Matrix er = draw_noise(2, 3, k, s.rng);
  const Matrix ec = draw_noise(2, 3, k, s.rng);
  const HriLoss loss = elbo_hri(s.v_h, s.v_r, s.x_h, s.x_r, hmm, alpha, pr, 5e-3, k, variant, er, ec);
  const auto f = [&](const Vector& p) {
    Vae v = s.v_r;
    v.unflatten(p);
    return elbo_hri(s.v_h, v, s.x_h, s.x_r, hmm, alpha, pr, 5e-3, k, variant, er, ec).parts.total;
  };
  EXPECT_LT(grad_check(f, s.v_r.flatten(), loss.grad_r.flatten()), 1e-4);
  EXPECT_GE(loss.parts.cond, 0.0);
  if (variant == Variant::kV1) EXPECT_EQ(loss.parts.cond, 0.0);
}

INSTANTIATE_TEST_SUITE_P(AllVariants, ElboHriVariant,
                         ::testing::Values(Variant::kV1, Variant::kV21, Variant::kV22, Variant::kV31, Variant::kV32),
                         [](const auto& info) {
                           std::string n = to_string(info.param);
                           for (auto& c : n)
                             if (c == '.') c = '_';
                           return n;
                         });

TEST(ElboHri, V1EqualsRobotHalfOfJointLoss) {
  Small s;
  const Hmm hmm = random_hmm(3, 2, s.rng);
  const PriorTrack pr = random_track(2, 3, s.rng);
  const Matrix er = draw_noise(2, 3, 2, s.rng);
  const HriLoss hri = elbo_hri(s.v_h, s.v_r, s.x_h, s.x_r, hmm, random_alpha(3, 3, s.rng), pr, 5e-3, 2, Variant::kV1,
                               er, draw_noise(2, 3, 2, s.rng));
  const AgentTerm half = vae_term(s.v_r, s.x_r, pr, 5e-3, er, 2);
  EXPECT_NEAR(hri.parts.total, half.recon + 5e-3 * half.kl, 1e-12);
  EXPECT_LT(max_abs_diff(hri.grad_r.flatten(), half.grad.flatten()), 1e-12);
}

TEST(ElboHri, V32ApproachesV31AsPosteriorNarrows) {
  Small s;
  const Hmm hmm = random_hmm(3, 2, s.rng);
  const Matrix alpha = random_alpha(3, 3, s.rng);
  ConditionInputs in;
  in.posterior_h.mean = s.rng.normal_matrix(2, 3);
  in.posterior_h.var = Matrix::Constant(2, 3, 1e-8);
  in.posterior_h.clamp_active = Matrix::Ones(2, 3);
  in.alpha = alpha;
  const Matrix ec = draw_noise(2, 3, 2, s.rng);
  const Matrix er = draw_noise(2, 3, 2, s.rng);
  const PriorTrack pr = random_track(2, 3, s.rng);
  const auto z31 = conditional_latents(hmm, in, Variant::kV31, 2, ec);
  const auto z32 = conditional_latents(hmm, in, Variant::kV32, 2, ec);
  const double c31 = elbo_hri(s.v_r, s.x_r, pr, z31, 5e-3, 2, er).parts.cond;
  const double c32 = elbo_hri(s.v_r, s.x_r, pr, z32, 5e-3, 2, er).parts.cond;
  EXPECT_NEAR(c31, c32, 1e-5);
}

TEST(ConditionalLatents, V3MeanIsGmrOutput) {
  Small s;
  const Hmm hmm = random_hmm(3, 2, s.rng);
  ConditionInputs in{encode_batch(s.v_h, s.x_h), random_alpha(3, 3, s.rng)};
  const ConditionalPlan plan = plan_conditionals(hmm, in, Variant::kV32);
  for (Eigen::Index t = 0; t < 3; ++t) {
    const Gaussian g = gmr_condition(hmm, in.posterior_h.at(t), in.alpha.col(t), ConditionMode::kWithCov);
    EXPECT_LT(max_abs_diff(plan.b.col(t), g.mean), 1e-12);
    const Matrix& l = plan.a[static_cast<std::size_t>(t)];
    EXPECT_LT(max_abs_diff(l * l.transpose(), g.cov), 1e-12);
  }
  // zero noise decodes the conditional mean itself
  const Matrix z = conditional_latents(plan, 1, Matrix::Zero(2, 3));
  EXPECT_LT(max_abs_diff(z, plan.b), 1e-15);
}

TEST(ConditionalLatents, V2ConditionsPosteriorSamples) {
  Small s;
  const Hmm hmm = random_hmm(3, 2, s.rng);
  ConditionInputs in{encode_batch(s.v_h, s.x_h), random_alpha(3, 3, s.rng)};
  const Matrix eps = draw_noise(2, 3, 2, s.rng);
  for (Variant v : {Variant::kV21, Variant::kV22}) {
    const Matrix z = conditional_latents(hmm, in, v, 2, eps);
    for (int smp = 0; smp < 2; ++smp)
      for (Eigen::Index t = 0; t < 3; ++t) {
        const Eigen::Index c = smp * 3 + t;
        const Vector zh = in.posterior_h.mean.col(t) + in.posterior_h.var.col(t).cwiseSqrt().cwiseProduct(eps.col(c));
        const Gaussian post = in.posterior_h.at(t);
        const Gaussian g = gmr_condition(hmm, Gaussian(zh, post.cov), in.alpha.col(t), condition_mode(v));
        EXPECT_LT(max_abs_diff(z.col(c), g.mean), 1e-12);
      }
  }
}

TEST(Variants, NamesRoundTrip) {
  for (Variant v : {Variant::kV1, Variant::kV21, Variant::kV22, Variant::kV31, Variant::kV32})
    EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_THROW(parse_variant("v4"), ConfigError);
}
