#pragma once

// Evaluation metrics, the rank-sum significance test and the experiment
// driver that trains, evaluates and writes reports.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "lid/bundle.hpp"
#include "lid/infer.hpp"
#include "lid/train.hpp"

namespace lid {

/// Mean over timesteps, window frames and joints of the squared error.
inline double mse(const Matrix& pred, const Matrix& gt) { return window_mse(pred, gt); }

/// Squared error of the last frame of every window only.
inline double last_frame_mse(const Matrix& pred, const Matrix& gt, Eigen::Index frame_width) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) throw ConfigError("mse: shape mismatch");
  if (frame_width <= 0 || frame_width > pred.rows()) throw ConfigError("last_frame_mse: bad frame width");
  return window_mse(pred.bottomRows(frame_width), gt.bottomRows(frame_width));
}

struct MannWhitney {
  double u = 0.0;  // statistic of the first sample
  double p = 1.0;  // two-sided
  bool exact = false;
};

namespace detail {

/// Midranks (1-based) of the pooled sample, and the tie-group sizes.
inline std::vector<double> midranks(const std::vector<double>& pooled, std::vector<int>* ties = nullptr) {
  std::vector<std::size_t> idx(pooled.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return pooled[a] < pooled[b]; });
  std::vector<double> ranks(pooled.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && pooled[idx[j + 1]] == pooled[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    if (ties) ties->push_back(static_cast<int>(j - i + 1));
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

/// Two-sided Mann-Whitney U test. Exact enumeration over all assignments of
/// the pooled ranks when both samples have fewer than 8 values, otherwise
/// the normal approximation with tie and continuity corrections.
inline MannWhitney mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 3 || b.size() < 3) throw ConfigError("mann_whitney_u: each sample needs at least 3 values");
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  std::vector<int> ties;
  const std::vector<double> ranks = detail::midranks(pooled, &ties);
  const auto n1 = static_cast<double>(a.size());
  const auto n2 = static_cast<double>(b.size());
  const auto n = n1 + n2;
  double r1 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) r1 += ranks[i];
  MannWhitney res;
  res.u = r1 - n1 * (n1 + 1.0) / 2.0;
  const double center = n1 * n2 / 2.0;
  if (std::all_of(pooled.begin(), pooled.end(), [&](double v) { return v == pooled.front(); })) return res;

  if (a.size() < 8 && b.size() < 8) {
    res.exact = true;
    const double observed = std::abs(res.u - center);
    const int total = static_cast<int>(pooled.size());
    const int k = static_cast<int>(a.size());
    // enumerate k-subsets of rank positions by bitmask
    long extreme = 0;
    long count = 0;
    for (unsigned mask = 0; mask < (1u << total); ++mask) {
      if (std::popcount(mask) != k) continue;
      double r = 0.0;
      for (int i = 0; i < total; ++i)
        if (mask & (1u << i)) r += ranks[static_cast<std::size_t>(i)];
      const double u = r - n1 * (n1 + 1.0) / 2.0;
      ++count;
      if (std::abs(u - center) >= observed - 1e-9) ++extreme;
    }
    res.p = static_cast<double>(extreme) / static_cast<double>(count);
    return res;
  }

  double tie_term = 0.0;
  for (int t : ties) tie_term += static_cast<double>(t) * t * t - t;
  const double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  if (!(var > 0.0)) return res;
  const double z = (std::abs(res.u - center) - 0.5) / std::sqrt(var);
  res.p = z <= 0.0 ? 1.0 : std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return res;
}

// ---- experiments ----

struct ExperimentConfig {
  std::filesystem::path dataset;  // directory with manifest.json; empty -> generate
  SynthSpec synth;
  std::uint64_t synth_seed = 0;
  double split_fraction = 0.8;
  std::uint64_t split_seed = 0;
  TrainConfig train;
  std::vector<Variant> variants{Variant::kV1, Variant::kV31, Variant::kV32};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3};
  std::filesystem::path output = "experiment";
  int threads = 1;
  bool dumps = true;
  bool reuse_models = false;
  std::map<std::string, double> reference_mse;  // optional published values per variant
  Json source;  // the parsed config, for fingerprinting
};

inline SynthSpec synth_spec_from_json(const Json& j) {
  SynthSpec s;
  s.rate = j.value("rate", s.rate);
  s.upper_arm = j.value("upper_arm", s.upper_arm);
  s.forearm = j.value("forearm", s.forearm);
  if (j.contains("interactions")) {
    s.interactions.clear();
    for (const auto& e : j.at("interactions")) {
      SynthInteraction in;
      in.label = e.value("label", in.label);
      in.count = e.value("count", in.count);
      in.length = e.value("length", in.length);
      in.noise = e.value("noise", in.noise);
      in.human_noise = e.value("human_noise", in.human_noise);
      in.phase_jitter = e.value("phase_jitter", in.phase_jitter);
      in.amplitude_noise = e.value("amplitude_noise", in.amplitude_noise);
      in.variant_seed = e.value("variant_seed", in.variant_seed);
      s.interactions.push_back(in);
    }
  }
  return s;
}

inline ExperimentConfig experiment_config_from_json(const Json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("dataset") && !j.at("dataset").is_null()) c.dataset = j.at("dataset").get<std::string>();
    if (j.contains("synth")) {
      c.synth = synth_spec_from_json(j.at("synth"));
      c.synth_seed = j.at("synth").value("seed", c.synth_seed);
    }
    if (j.contains("split")) {
      c.split_fraction = j.at("split").value("fraction", c.split_fraction);
      c.split_seed = j.at("split").value("seed", c.split_seed);
    }
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("variants")) {
      c.variants.clear();
      for (const auto& v : j.at("variants")) c.variants.push_back(parse_variant(v.get<std::string>()));
    }
    c.seeds = j.value("seeds", c.seeds);
    c.output = j.value("output", c.output.string());
    c.threads = j.value("threads", c.threads);
    c.dumps = j.value("dumps", c.dumps);
    c.reuse_models = j.value("reuse_models", c.reuse_models);
    c.reference_mse = j.value("reference_mse", c.reference_mse);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  if (c.variants.empty() || c.seeds.empty()) throw ConfigError("experiment config: needs at least one variant and seed");
  if (c.threads < 1) throw ConfigError("experiment config: threads must be >= 1");
  c.source = j;
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing config file: " + path.string());
  Json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

/// FNV-1a over the canonical (sorted-key) JSON of the config plus the seed.
inline std::string config_fingerprint(const Json& config, std::uint64_t seed) {
  Json canon = config;
  // scheduling and output placement do not affect results
  for (const char* key : {"threads", "output", "dumps", "reuse_models"}) canon.erase(key);
  const std::string text = canon.dump() + "#" + std::to_string(seed);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct ReportRow {
  std::string fingerprint;
  std::string variant;
  std::uint64_t seed = 0;
  std::string label;
  std::size_t trajectory = 0;
  double mse = 0.0;
  double last_frame_mse = 0.0;
};

struct VariantSummary {
  std::string variant;
  std::size_t count = 0;
  double mean = 0.0;
  double sd = 0.0;
  double last_frame_mean = 0.0;
  std::optional<double> p_vs_v1;
};

struct EvalReport {
  std::vector<ReportRow> rows;
  std::vector<VariantSummary> summary;

  [[nodiscard]] std::vector<double> mses(const std::string& variant) const {
    std::vector<double> out;
    for (const auto& r : rows)
      if (r.variant == variant) out.push_back(r.mse);
    return out;
  }

  [[nodiscard]] const VariantSummary* find(const std::string& variant) const {
    for (const auto& s : summary)
      if (s.variant == variant) return &s;
    return nullptr;
  }
};

/// Per-trajectory test MSE of the robot prediction for one trained bundle.
inline std::vector<ReportRow> evaluate_bundle(const ModelBundle& b, const Dataset& ds, const std::string& fingerprint) {
  const int w = b.config.window;
  std::vector<ReportRow> rows;
  for (std::size_t i : ds.test) {
    const auto& p = ds.pairs[i];
    const Matrix pred = predict_windows(b, p.label, window_features(p.h_frames, w, FeatureKind::kPositions));
    const Matrix gt = window_features(p.r_frames, w, FeatureKind::kJoints);
    rows.push_back({fingerprint, to_string(b.variant), b.seed, p.label, i, mse(pred, gt),
                    last_frame_mse(pred, gt, p.r_frames.cols())});
  }
  return rows;
}

inline std::vector<VariantSummary> summarize(const std::vector<ReportRow>& rows, const std::vector<Variant>& variants) {
  std::vector<VariantSummary> out;
  std::vector<double> v1;
  for (const auto& r : rows)
    if (r.variant == "v1") v1.push_back(r.mse);
  for (Variant v : variants) {
    VariantSummary s;
    s.variant = to_string(v);
    std::vector<double> vals;
    double last = 0.0;
    for (const auto& r : rows)
      if (r.variant == s.variant) {
        vals.push_back(r.mse);
        last += r.last_frame_mse;
      }
    s.count = vals.size();
    if (!vals.empty()) {
      for (double x : vals) s.mean += x;
      s.mean /= static_cast<double>(vals.size());
      for (double x : vals) s.sd += (x - s.mean) * (x - s.mean);
      s.sd = vals.size() > 1 ? std::sqrt(s.sd / static_cast<double>(vals.size() - 1)) : 0.0;
      s.last_frame_mean = last / static_cast<double>(vals.size());
    }
    if (v != Variant::kV1 && v1.size() >= 3 && vals.size() >= 3) s.p_vs_v1 = mann_whitney_u(vals, v1).p;
    out.push_back(s);
  }
  return out;
}

inline void write_report_csv(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "fingerprint,variant,seed,label,trajectory,mse,last_frame_mse\n";
  for (const auto& row : r.rows)
    out << row.fingerprint << ',' << row.variant << ',' << row.seed << ',' << row.label << ',' << row.trajectory << ','
        << format_double(row.mse) << ',' << format_double(row.last_frame_mse) << '\n';
}

inline void write_report_md(const EvalReport& r, const ExperimentConfig& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "# Conditional prediction on the test split\n\n";
  out << "Seeds: " << c.seeds.size() << ". MSE is averaged over window frames and joints (rad^2 for joint targets); "
      << "p is a two-sided Mann-Whitney U test of per-trajectory MSEs against v1.\n\n";
  out << "| variant | n | mean MSE | sd | last-frame MSE | p vs v1 |";
  if (!c.reference_mse.empty()) out << " reference | within 50% |";
  out << "\n|---|---|---|---|---|---|";
  if (!c.reference_mse.empty()) out << "---|---|";
  out << "\n";
  for (const auto& s : r.summary) {
    out << "| " << s.variant << " | " << s.count << " | " << format_double(s.mean) << " | " << format_double(s.sd)
        << " | " << format_double(s.last_frame_mean) << " | " << (s.p_vs_v1 ? format_double(*s.p_vs_v1) : "-") << " |";
    if (!c.reference_mse.empty()) {
      auto it = c.reference_mse.find(s.variant);
      if (it == c.reference_mse.end()) {
        out << " - | - |";
      } else {
        const bool ok = std::abs(s.mean - it->second) <= 0.5 * std::abs(it->second);
        out << " " << format_double(it->second) << " | " << (ok ? "yes" : "no") << " |";
      }
    }
    out << "\n";
  }
}

/// Latent and state traces of one test trajectory for plotting.
inline void write_latent_dump(const RolloutResult& r, const Matrix& gt_q, const std::filesystem::path& path) {
  std::vector<std::string> header{"t"};
  for (Eigen::Index i = 0; i < r.latent_h.rows(); ++i) header.push_back("zh_" + std::to_string(i + 1));
  for (Eigen::Index i = 0; i < r.latent_r.rows(); ++i) header.push_back("zr_" + std::to_string(i + 1));
  for (Eigen::Index i = 0; i < r.alpha.cols(); ++i) header.push_back("alpha_" + std::to_string(i + 1));
  for (Eigen::Index i = 0; i < r.q.cols(); ++i) header.push_back("q_pred_" + std::to_string(i + 1));
  for (Eigen::Index i = 0; i < gt_q.cols(); ++i) header.push_back("q_true_" + std::to_string(i + 1));
  header.emplace_back("gate");
  Matrix m(r.length(), static_cast<Eigen::Index>(header.size()));
  for (Eigen::Index t = 0; t < r.length(); ++t) {
    Eigen::Index c = 0;
    m(t, c++) = static_cast<double>(t);
    for (Eigen::Index i = 0; i < r.latent_h.rows(); ++i) m(t, c++) = r.latent_h(i, t);
    for (Eigen::Index i = 0; i < r.latent_r.rows(); ++i) m(t, c++) = r.latent_r(i, t);
    for (Eigen::Index i = 0; i < r.alpha.cols(); ++i) m(t, c++) = r.alpha(t, i);
    for (Eigen::Index i = 0; i < r.q.cols(); ++i) m(t, c++) = r.q(t, i);
    for (Eigen::Index i = 0; i < gt_q.cols(); ++i) m(t, c++) = gt_q(t, i);
    m(t, c++) = r.gate[static_cast<std::size_t>(t)] ? 1.0 : 0.0;
  }
  write_csv(path, m, header);
}

inline Dataset experiment_dataset(const ExperimentConfig& c) {
  Dataset ds;
  if (!c.dataset.empty()) {
    ds = load_dataset(c.dataset);
  } else {
    Rng rng(c.synth_seed);
    ds = synth_generate(c.synth, rng);
  }
  ds.window = c.train.window;
  return split(ds, c.split_fraction, c.split_seed);
}

namespace detail {

template <class F>
auto staged(const std::string& stage, const std::string& fingerprint, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(e.kind(), stage + " [config " + fingerprint + "]: " + e.what());
  }
}

struct SeedResult {
  std::vector<ReportRow> rows;
  std::exception_ptr error;
};

inline SeedResult run_seed(const ExperimentConfig& c, const Dataset& ds, std::uint64_t seed) {
  SeedResult out;
  const std::string fp = config_fingerprint(c.source, seed);
  const auto models = c.output / "models";
  const auto hhi_path = models / ("seed" + std::to_string(seed) + "_hhi.json");
  ModelBundle hhi;
  if (c.reuse_models && std::filesystem::exists(hhi_path)) {
    hhi = staged("load-hhi", fp, [&] { return load_bundle(hhi_path); });
  } else {
    TrainTrace trace;
    hhi = staged("train-hhi", fp, [&] { return train_hhi(ds, c.train, seed, &trace); });
    save_bundle(hhi, hhi_path);
    write_trace_csv(trace, models / ("seed" + std::to_string(seed) + "_hhi_loss.csv"));
  }
  for (Variant v : c.variants) {
    const std::string tag = "seed" + std::to_string(seed) + "_" + to_string(v);
    const auto path = models / (tag + ".json");
    ModelBundle b;
    if (c.reuse_models && std::filesystem::exists(path)) {
      b = staged("load-hri", fp, [&] { return load_bundle(path); });
    } else {
      TrainConfig tc = c.train;
      tc.variant = v;
      TrainTrace trace;
      b = staged("train-hri " + to_string(v), fp, [&] { return train_hri(ds, hhi, tc, seed, &trace); });
      save_bundle(b, path);
      write_trace_csv(trace, models / (tag + "_loss.csv"));
    }
    auto rows = staged("eval " + to_string(v), fp, [&] { return evaluate_bundle(b, ds, fp); });
    out.rows.insert(out.rows.end(), rows.begin(), rows.end());
    if (c.dumps) {
      const auto dir = c.output / "dumps" / tag;
      std::filesystem::create_directories(dir);
      const KinematicChain chain = arm4(c.synth.upper_arm, c.synth.forearm);
      for (std::size_t i : ds.test) {
        const auto& p = ds.pairs[i];
        const RolloutResult r = rollout(b, p.label, p.h_frames, chain);
        write_latent_dump(r, p.r_frames.bottomRows(r.length()), dir / ("trajectory" + std::to_string(i) + ".csv"));
      }
    }
  }
  return out;
}

}  // namespace detail

/// Trains every (seed, variant) pair, evaluates on the test split and writes
/// report.csv, report.md, models and per-trajectory dumps under the output
/// directory. Seeds run on up to `threads` workers; results are assembled in
/// seed order so the report does not depend on scheduling.
inline EvalReport run_experiment(const ExperimentConfig& c) {
  const std::string fp0 = config_fingerprint(c.source, c.seeds.front());
  const Dataset ds = detail::staged("dataset", fp0, [&] { return experiment_dataset(c); });
  std::filesystem::create_directories(c.output);
  std::vector<detail::SeedResult> results(c.seeds.size());
  std::size_t next = 0;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      std::size_t k;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= c.seeds.size()) return;
        k = next++;
      }
      try {
        results[k] = detail::run_seed(c, ds, c.seeds[k]);
      } catch (...) {
        results[k].error = std::current_exception();
      }
    }
  };
  const int n_workers = std::min<int>(c.threads, static_cast<int>(c.seeds.size()));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  EvalReport report;
  for (auto& r : results) {
    if (r.error) std::rethrow_exception(r.error);
    report.rows.insert(report.rows.end(), r.rows.begin(), r.rows.end());
  }
  report.summary = summarize(report.rows, c.variants);
  write_report_csv(report, c.output / "report.csv");
  write_report_md(report, c, c.output / "report.md");
  return report;
}

}  // namespace lid
