// lid: command line front end for dataset generation, training, evaluation,
// rollouts and HMM inspection.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "lid/eval.hpp"

using namespace lid;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<int> threads;
  std::string log_level = "warn";
};

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing config file: " + path.string());
  try {
    Json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

Json config_json(const Globals& g) { return g.config.empty() ? Json::object() : read_json(g.config); }

ExperimentConfig experiment(const Globals& g) {
  ExperimentConfig c = experiment_config_from_json(config_json(g));
  if (g.threads) c.threads = *g.threads;
  return c;
}

/// Chain named by the config's "chain" key: "planar", "arm4" or a JSON file.
KinematicChain chain_of(const Json& j, const ExperimentConfig& c) {
  const std::string name = j.value("chain", "arm4");
  if (name == "arm4") return arm4(c.synth.upper_arm, c.synth.forearm);
  if (name == "planar") return planar_two_link();
  return chain_from_json(read_json(name));
}

void print_vector(const char* label, const Vector& v) {
  std::printf("%s", label);
  for (Eigen::Index i = 0; i < v.size(); ++i) std::printf(" %.4f", v(i));
  std::printf("\n");
}

int cmd_synth(const Globals& g) {
  ExperimentConfig c = experiment(g);
  c.dataset.clear();
  if (g.seed) c.synth_seed = *g.seed;
  const Dataset ds = experiment_dataset(c);
  save_dataset(ds, g.out);
  std::printf("wrote %zu trajectories (%zu train, %zu test) to %s\n", ds.pairs.size(), ds.train.size(), ds.test.size(),
              g.out.c_str());
  return 0;
}

int cmd_train_hhi(const Globals& g) {
  const ExperimentConfig c = experiment(g);
  const Dataset ds = experiment_dataset(c);
  std::vector<std::uint64_t> seeds = c.train.seeds;
  if (g.seed) seeds = {*g.seed};
  std::optional<ModelBundle> best;
  double best_mse = 0.0;
  for (std::uint64_t seed : seeds) {
    TrainTrace trace;
    ModelBundle b = train_hhi(ds, c.train, seed, &trace);
    const auto [fit, val] = detail::carve_validation(ds, c.train.val_fraction, seed);
    const double v = validation_mse(b, ds, val.empty() ? fit : val);
    std::printf("seed %llu: validation MSE %.6g\n", static_cast<unsigned long long>(seed), v);
    write_trace_csv(trace, std::filesystem::path(g.out) / ("hhi_seed" + std::to_string(seed) + "_loss.csv"));
    if (!best || v < best_mse) {
      best = std::move(b);
      best_mse = v;
    }
  }
  const auto path = std::filesystem::path(g.out) / "hhi.json";
  save_bundle(*best, path);
  std::printf("kept seed %llu -> %s\n", static_cast<unsigned long long>(best->seed), path.c_str());
  return 0;
}

int cmd_train_hri(const Globals& g, const std::string& model, const std::string& variant) {
  const ExperimentConfig c = experiment(g);
  const Dataset ds = experiment_dataset(c);
  const ModelBundle hhi = load_bundle(model);
  TrainConfig tc = c.train;
  if (!variant.empty()) tc.variant = parse_variant(variant);
  const std::uint64_t seed = g.seed.value_or(hhi.seed);
  TrainTrace trace;
  const ModelBundle b = train_hri(ds, hhi, tc, seed, &trace);
  const std::string tag = "hri_" + to_string(tc.variant);
  const auto path = std::filesystem::path(g.out) / (tag + ".json");
  save_bundle(b, path);
  write_trace_csv(trace, std::filesystem::path(g.out) / (tag + "_loss.csv"));
  const auto [fit, val] = detail::carve_validation(ds, tc.val_fraction, seed);
  std::printf("%s: validation MSE %.6g -> %s\n", to_string(tc.variant).c_str(),
              validation_mse(b, ds, val.empty() ? fit : val), path.c_str());
  return 0;
}

int cmd_eval(const Globals& g) {
  ExperimentConfig c = experiment(g);
  if (!g.out.empty() && g.out != "out") c.output = g.out;
  if (g.seed) c.seeds = {*g.seed};
  const EvalReport r = run_experiment(c);
  std::printf("%-6s %6s %12s %12s %12s\n", "variant", "n", "mean MSE", "sd", "p vs v1");
  for (const auto& s : r.summary)
    std::printf("%-6s %6zu %12.6g %12.6g %12s\n", s.variant.c_str(), s.count, s.mean, s.sd,
                s.p_vs_v1 ? std::to_string(*s.p_vs_v1).c_str() : "-");
  std::printf("report: %s\n", (c.output / "report.csv").c_str());
  return 0;
}

int cmd_rollout(const Globals& g, const std::string& model, std::optional<std::size_t> index, bool smoothing) {
  const Json j = config_json(g);
  const ExperimentConfig c = experiment(g);
  const Dataset ds = experiment_dataset(c);
  const ModelBundle b = load_bundle(model);
  const std::size_t i = index.value_or(ds.test.empty() ? 0 : ds.test.front());
  if (i >= ds.pairs.size()) throw DataError("rollout: trajectory " + std::to_string(i) + " out of range");
  const auto& p = ds.pairs[i];
  RolloutOptions opt;
  if (smoothing) opt.smoothing = std::vector<double>{0.1, 0.2, 0.3, 0.4};
  const RolloutResult r = rollout(b, p.label, p.h_frames, chain_of(j, c), opt);
  const auto path = std::filesystem::path(g.out) / ("rollout_" + std::to_string(i) + ".csv");
  std::filesystem::create_directories(path.parent_path());
  write_rollout_csv(r, path);
  const Matrix gt = p.r_frames.bottomRows(r.length());
  const auto fired = std::find(r.gate.begin(), r.gate.end(), true);
  const std::string gate =
      fired == r.gate.end() ? "gate never fired" : "gate fired at step " + std::to_string(fired - r.gate.begin());
  std::printf("trajectory %zu (%s): %lld steps, joint MSE %.6g, %s -> %s\n", i, p.label.c_str(),
              static_cast<long long>(r.length()), mse(r.q, gt), gate.c_str(), path.c_str());
  return 0;
}

int cmd_ik_demo(const Globals& g, int count) {
  const Json j = config_json(g);
  const ExperimentConfig c = experiment_config_from_json(j);
  const KinematicChain chain = chain_of(j, c);
  Rng rng(g.seed.value_or(0));
  for (int k = 0; k < count; ++k) {
    Vector q(chain.dof());
    Vector mu(chain.dof());
    for (Eigen::Index i = 0; i < chain.dof(); ++i) {
      q(i) = rng.uniform(chain.joints[i].lo, chain.joints[i].hi);
      mu(i) = rng.uniform(chain.joints[i].lo, chain.joints[i].hi);
    }
    const Vec3 target = fk(chain, q);
    const IkSolution base = ik_baseline(chain, target, mu);
    const IkSolution prior = ik_with_prior(chain, target, mu);
    std::printf("target %d: (%.3f, %.3f, %.3f)\n", k, target.x(), target.y(), target.z());
    print_vector("  prior mean       ", mu);
    print_vector("  baseline q       ", base.q);
    std::printf("    residual %.3g, distance to prior %.4f\n", base.residual, (base.q - mu).norm());
    print_vector("  with prior q     ", prior.q);
    std::printf("    residual %.3g, distance to prior %.4f\n", prior.residual, (prior.q - mu).norm());
  }
  return 0;
}

int cmd_inspect(const Globals& g, const std::string& model) {
  const ModelBundle b = load_bundle(model);
  std::optional<Dataset> ds;
  if (!g.config.empty()) ds = experiment_dataset(experiment(g));
  for (const auto& [label, im] : b.hmms) {
    const Hmm& h = im.hmm;
    std::optional<Vector> occupancy;
    if (ds) {
      std::vector<Matrix> seqs;
      for (std::size_t i : ds->train)
        if (ds->pairs[i].label == label) seqs.push_back(joint_latents(b, ds->pairs[i]));
      if (!seqs.empty()) occupancy = state_occupancy(h, seqs);
    }
    std::printf("%s: %d states, contact {", label.c_str(), h.n_states());
    for (int s : im.tsm.contact_states) std::printf(" %d", s);
    std::printf(" }, reach {");
    for (int s : im.tsm.reach_states) std::printf(" %d", s);
    std::printf(" }, gate %s\n", im.tsm.gate_enabled() ? "fitted" : "off");
    for (int s = 0; s < h.n_states(); ++s) {
      const double stay = h.trans(s, s);
      const BlockedGaussian& comp = h.components[static_cast<std::size_t>(s)];
      std::printf("  state %d: start %.3f, stay %.3f (mean duration %.1f)", s, h.pi(s), stay,
                  stay < 1.0 ? 1.0 / (1.0 - stay) : std::numeric_limits<double>::infinity());
      if (occupancy) std::printf(", occupancy %.3f", (*occupancy)(s));
      std::printf("\n");
      print_vector("    human mean", comp.marginal_h().mean);
      print_vector("    robot mean", comp.base.mean.tail(h.latent_dim()));
      std::printf("    trace of covariance: human %.4f, robot %.4f\n", comp.marginal_h().cov.trace(),
                  comp.base.cov.bottomRightCorner(h.latent_dim(), h.latent_dim()).trace());
    }
  }
  return 0;
}

LogLevel parse_level(const std::string& s) {
  if (s == "debug") return LogLevel::kDebug;
  if (s == "info") return LogLevel::kInfo;
  if (s == "warn") return LogLevel::kWarn;
  if (s == "error") return LogLevel::kError;
  if (s == "off") return LogLevel::kOff;
  throw ConfigError("unknown log level '" + s + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent interaction dynamics: training, evaluation and reactive rollouts"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON config (train settings, dataset or synth spec, chain)");
  app.add_option("--seed", g.seed, "seed override");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--log-level", g.log_level, "debug, info, warn, error or off")->capture_default_str();

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  auto* hhi = app.add_subcommand("train-hhi", "train the two-human model (best seed by validation MSE)");
  auto* hri = app.add_subcommand("train-hri", "train the robot VAE against a two-human model");
  std::string model;
  std::string variant;
  hri->add_option("--model", model, "two-human model file")->required();
  hri->add_option("--variant", variant, "v1, v2.1, v2.2, v3.1 or v3.2");
  auto* eval = app.add_subcommand("eval", "run a full experiment and write report.csv / report.md");
  auto* roll = app.add_subcommand("rollout", "reactive rollout of one trajectory");
  std::optional<std::size_t> index;
  bool smoothing = false;
  roll->add_option("--model", model, "trained model file")->required();
  roll->add_option("--trajectory", index, "dataset index (default: first test trajectory)");
  roll->add_flag("--smooth", smoothing, "apply the 4-tap smoothing filter");
  auto* ik = app.add_subcommand("ik-demo", "compare plain and prior-regularized IK on random targets");
  int count = 3;
  ik->add_option("--count", count, "number of targets")->capture_default_str();
  auto* inspect = app.add_subcommand("inspect-hmm", "per-state summaries for labelling contact and reach states");
  inspect->add_option("--model", model, "trained model file")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    set_log_level(parse_level(g.log_level));
    if (!synth->parsed() && !eval->parsed() && !inspect->parsed() && !ik->parsed()) std::filesystem::create_directories(g.out);
    if (synth->parsed()) return cmd_synth(g);
    if (hhi->parsed()) return cmd_train_hhi(g);
    if (hri->parsed()) return cmd_train_hri(g, model, variant);
    if (eval->parsed()) return cmd_eval(g);
    if (roll->parsed()) return cmd_rollout(g, model, index, smoothing);
    if (ik->parsed()) return cmd_ik_demo(g, count);
    if (inspect->parsed()) return cmd_inspect(g, model);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
