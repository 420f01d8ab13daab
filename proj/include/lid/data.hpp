#pragma once

// Trajectory datasets: windowed featurization, resampling, skeleton to joint
// retargeting, a synthetic coupled-motion generator and the on-disk format
// (manifest.json + one CSV per agent per trajectory).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lid/common.hpp"
#include "lid/kin.hpp"

namespace lid {

inline constexpr int kSkeletonJoints = 3;  // shoulder, elbow, wrist
inline constexpr int kSkeletonWidth = 3 * kSkeletonJoints;

/// Time-aligned frames of both agents. Rows are frames.
struct TrajectoryPair {
  std::string label;
  Matrix h_frames;        // T x 9 positions, meters, shoulder origin
  Matrix r_frames;        // T x n robot joints (radians) or task-space
  Matrix partner_frames;  // T x 9 second human skeleton, empty when unavailable
  Vector phase;           // ground-truth phase for generated data, else empty
  double rate = 20.0;

  [[nodiscard]] Eigen::Index length() const { return h_frames.rows(); }
  [[nodiscard]] bool has_partner() const { return partner_frames.rows() > 0; }

  void validate() const {
    if (r_frames.rows() != h_frames.rows())
      throw DataError("trajectory '" + label + "': agents have different lengths");
    if (has_partner() && partner_frames.rows() != h_frames.rows())
      throw DataError("trajectory '" + label + "': partner skeleton has a different length");
    if (!h_frames.allFinite() || !r_frames.allFinite() || !partner_frames.allFinite())
      throw DataError("trajectory '" + label + "': non-finite values");
  }
};

struct Dataset {
  std::vector<TrajectoryPair> pairs;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  int window = 5;

  [[nodiscard]] std::vector<std::string> labels() const {
    std::vector<std::string> out;
    for (const auto& p : pairs)
      if (std::find(out.begin(), out.end(), p.label) == out.end()) out.push_back(p.label);
    std::sort(out.begin(), out.end());
    return out;
  }
};

// ---- featurization ----

enum class FeatureKind { kPositions, kJoints };

/// Per-frame position deltas, first frame zero.
inline Matrix position_deltas(const Matrix& frames) {
  Matrix d = Matrix::Zero(frames.rows(), frames.cols());
  if (frames.rows() > 1) d.bottomRows(frames.rows() - 1) = frames.bottomRows(frames.rows() - 1) - frames.topRows(frames.rows() - 1);
  return d;
}

inline Eigen::Index feature_width(FeatureKind kind, Eigen::Index frame_width, int w) {
  return kind == FeatureKind::kPositions ? w * 2 * frame_width : w * frame_width;
}

/// Sliding windows (stride 1) as columns. Positions: per frame and per joint
/// (3 position, 3 delta) values, so 18 per frame and 90 for w = 5. Joints:
/// the w frames concatenated.
inline Matrix window_features(const Matrix& frames, int w, FeatureKind kind) {
  if (w < 1) throw ConfigError("window_features: window must be >= 1");
  const Eigen::Index len = frames.rows();
  const Eigen::Index need = kind == FeatureKind::kPositions ? w + 1 : w;
  if (len < need)
    throw DataError("window_features: trajectory of length " + std::to_string(len) + " is shorter than " +
                    std::to_string(need));
  const Eigen::Index fw = frames.cols();
  const Eigen::Index n = len - w + 1;
  Matrix out(feature_width(kind, fw, w), n);
  if (kind == FeatureKind::kJoints) {
    for (Eigen::Index j = 0; j < n; ++j)
      for (int f = 0; f < w; ++f) out.col(j).segment(f * fw, fw) = frames.row(j + f).transpose();
    return out;
  }
  if (fw % 3 != 0) throw DataError("window_features: position frames must hold xyz triples");
  const Matrix deltas = position_deltas(frames);
  const Eigen::Index joints = fw / 3;
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::Index k = 0;
    for (int f = 0; f < w; ++f) {
      for (Eigen::Index jt = 0; jt < joints; ++jt) {
        out.col(j).segment(k, 3) = frames.row(j + f).segment(jt * 3, 3).transpose();
        out.col(j).segment(k + 3, 3) = deltas.row(j + f).segment(jt * 3, 3).transpose();
        k += 6;
      }
    }
  }
  return out;
}

/// Last frame of each joint-kind window (columns), n_joints x count.
inline Matrix last_frame(const Matrix& windows, Eigen::Index n_joints) { return windows.bottomRows(n_joints); }

// ---- resampling ----

/// Source frame indices kept when resampling from `source_hz` to `target_hz`:
/// output frame k takes source frame floor(k * source / target).
inline std::vector<Eigen::Index> downsample_indices(Eigen::Index len, double source_hz, double target_hz) {
  if (!(target_hz > 0.0)) throw ConfigError("downsample: target rate must be positive");
  if (target_hz > source_hz) throw ConfigError("downsample: target rate above source rate");
  std::vector<Eigen::Index> idx;
  const double ratio = source_hz / target_hz;
  for (Eigen::Index k = 0;; ++k) {
    const auto i = static_cast<Eigen::Index>(std::floor(static_cast<double>(k) * ratio + 1e-9));
    if (i >= len) break;
    idx.push_back(i);
  }
  return idx;
}

inline Matrix take_rows(const Matrix& m, const std::vector<Eigen::Index>& idx) {
  if (m.rows() == 0) return m;
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = m.row(idx[k]);
  return out;
}

inline TrajectoryPair downsample(const TrajectoryPair& p, double target_hz) {
  const auto idx = downsample_indices(p.length(), p.rate, target_hz);
  TrajectoryPair out = p;
  out.h_frames = take_rows(p.h_frames, idx);
  out.r_frames = take_rows(p.r_frames, idx);
  out.partner_frames = take_rows(p.partner_frames, idx);
  if (p.phase.size() > 0) {
    out.phase.resize(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) out.phase(static_cast<Eigen::Index>(k)) = p.phase(idx[k]);
  }
  out.rate = target_hz;
  return out;
}

// ---- retargeting ----

/// Joint angles (shoulder yaw, pitch, roll, elbow) of `arm4()` reproducing a
/// shoulder/elbow/wrist skeleton frame. Roll is zero when the forearm bends
/// within the sagittal plane of the rotated shoulder frame; with a straight
/// arm roll is reported as 0, and with the arm hanging straight down yaw is 0.
inline Vector retarget_frame(const Eigen::Ref<const Vector>& frame, const KinematicChain& limits_from) {
  const Vec3 s = frame.segment<3>(0);
  const Vec3 e = frame.segment<3>(3);
  const Vec3 w = frame.segment<3>(6);
  const Vec3 upper = e - s;
  const Vec3 fore = w - e;
  if (upper.norm() < 1e-9 || fore.norm() < 1e-9) throw DataError("retarget_skeleton: zero-length limb segment");
  const Vec3 u = upper.normalized();
  const Vec3 f = fore.normalized();
  const double pitch = std::acos(std::clamp(-u.z(), -1.0, 1.0));
  const double yaw = std::sin(pitch) < 1e-9 ? 0.0 : std::atan2(-u.y(), -u.x());
  const double elbow = std::acos(std::clamp(u.dot(f), -1.0, 1.0));
  const Eigen::Matrix3d shoulder =
      (Eigen::AngleAxisd(yaw, Vec3::UnitZ()) * Eigen::AngleAxisd(pitch, Vec3::UnitY())).toRotationMatrix();
  const Vec3 local = shoulder.transpose() * f;
  const double roll = std::sin(elbow) < 1e-9 ? 0.0 : std::atan2(local.y(), local.x());
  Vector q(4);
  q << yaw, pitch, roll, elbow;
  return limits_from.clamp(q);
}

/// Retargets every frame (rows of T x 9) to T x 4 joint angles.
inline Matrix retarget_skeleton(const Matrix& h_frames, const KinematicChain& chain = arm4()) {
  if (h_frames.cols() != kSkeletonWidth) throw DataError("retarget_skeleton: frames must have 9 columns");
  if (chain.dof() != 4) throw ConfigError("retarget_skeleton: chain must have 4 joints");
  Matrix out(h_frames.rows(), 4);
  for (Eigen::Index t = 0; t < h_frames.rows(); ++t) out.row(t) = retarget_frame(h_frames.row(t).transpose(), chain).transpose();
  return out;
}

/// Shoulder/elbow/wrist positions of `arm4`-style joint angles.
inline Vector skeleton_from_joints(const KinematicChain& chain, const Eigen::Ref<const Vector>& q) {
  Vector frame(kSkeletonWidth);
  frame.segment<3>(0) = chain.base.translation();
  // elbow position: pose after the three shoulder joints plus the elbow offset
  Transform t = chain.base;
  for (int i = 0; i < 3; ++i) t = t * chain.joints[i].offset * Eigen::AngleAxisd(q(i), chain.joints[i].axis);
  frame.segment<3>(3) = (t * chain.joints[3].offset).translation();
  frame.segment<3>(6) = fk(chain, q);
  return frame;
}

// ---- synthetic coupled interactions ----

struct SynthInteraction {
  std::string label = "handshake";
  int count = 40;
  int length = 100;
  double noise = 0.05;          // std of the second agent's joint noise, radians
  double human_noise = 0.0;     // std of the first agent's position noise, meters
  double phase_jitter = 0.15;   // std of the log time-warp exponent
  double amplitude_noise = 0.1; // relative std of the first agent's amplitude
  int variant_seed = 0;         // selects the motion shape
};

struct SynthSpec {
  std::vector<SynthInteraction> interactions{SynthInteraction{}};
  double rate = 20.0;
  double upper_arm = 0.30;
  double forearm = 0.25;
};

namespace detail {

inline double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3.0 - 2.0 * x);
}

/// Reach (0-0.3), hold with oscillation (0.3-0.7), retract (0.7-1).
inline double envelope(double phase) {
  if (phase < 0.3) return smoothstep(phase / 0.3);
  if (phase < 0.7) return 1.0;
  return 1.0 - smoothstep((phase - 0.7) / 0.3);
}

inline double hold_oscillation(double phase) {
  if (phase < 0.3 || phase > 0.7) return 0.0;
  return std::sin(2.0 * std::numbers::pi * 2.0 * (phase - 0.3) / 0.4);
}

struct MotionShape {
  Vector rest;
  Vector reach;
  Vector osc;
};

inline MotionShape motion_shape(int variant, bool second_agent) {
  MotionShape m{Vector(4), Vector(4), Vector(4)};
  // distinct but fixed profiles per interaction variant and per agent
  const double v = static_cast<double>(variant);
  if (!second_agent) {
    m.rest << 0.0, 0.15, 0.0, 0.2;
    m.reach << 0.25 + 0.1 * v, 1.0 - 0.1 * v, 0.3, 0.6 + 0.2 * v;
    m.osc << 0.0, 0.12, 0.0, 0.15;
  } else {
    m.rest << 0.05, 0.2, -0.1, 0.3;
    m.reach << -0.3 - 0.1 * v, 0.9 + 0.05 * v, -0.4, 0.5 + 0.15 * v;
    m.osc << 0.0, -0.12, 0.05, 0.18;
  }
  return m;
}

inline Vector joint_profile(const MotionShape& m, double phase, double amplitude) {
  return m.rest + amplitude * (envelope(phase) * m.reach + hold_oscillation(phase) * m.osc);
}

}  // namespace detail

/// Ideal second-agent joints for a phase (the noiseless coupling).
inline Vector synth_second_agent(const SynthInteraction& spec, double phase) {
  return detail::joint_profile(detail::motion_shape(spec.variant_seed, true), phase, 1.0);
}

/// Generates coupled trajectories. The first agent's skeleton follows a
/// time-warped, amplitude-jittered reach-hold-retract motion; the second
/// agent's joints are a fixed function of the first agent's phase plus
/// Gaussian noise. The second agent's skeleton is also produced so that
/// two-human training is possible.
inline Dataset synth_generate(const SynthSpec& spec, Rng& rng) {
  if (spec.interactions.empty()) throw ConfigError("synth_generate: no interactions in spec");
  const KinematicChain chain = arm4(spec.upper_arm, spec.forearm);
  Dataset ds;
  for (const auto& inter : spec.interactions) {
    if (inter.count < 1 || inter.length < 2) throw ConfigError("synth_generate: bad count or length for '" + inter.label + "'");
    const auto shape_h = detail::motion_shape(inter.variant_seed, false);
    for (int n = 0; n < inter.count; ++n) {
      const double warp = std::exp(inter.phase_jitter * rng.normal());
      const double amp = 1.0 + inter.amplitude_noise * rng.normal();
      TrajectoryPair p;
      p.label = inter.label;
      p.rate = spec.rate;
      p.h_frames.resize(inter.length, kSkeletonWidth);
      p.r_frames.resize(inter.length, 4);
      p.partner_frames.resize(inter.length, kSkeletonWidth);
      p.phase.resize(inter.length);
      for (int t = 0; t < inter.length; ++t) {
        const double phase = std::pow(static_cast<double>(t) / static_cast<double>(inter.length - 1), warp);
        p.phase(t) = phase;
        const Vector qh = chain.clamp(detail::joint_profile(shape_h, phase, amp));
        Vector frame = skeleton_from_joints(chain, qh);
        if (inter.human_noise > 0.0) frame += inter.human_noise * rng.normal_vector(kSkeletonWidth);
        p.h_frames.row(t) = frame.transpose();
        const Vector qr_ideal = chain.clamp(synth_second_agent(inter, phase));
        p.partner_frames.row(t) = skeleton_from_joints(chain, qr_ideal).transpose();
        Vector qr = qr_ideal;
        if (inter.noise > 0.0) qr += inter.noise * rng.normal_vector(4);
        p.r_frames.row(t) = qr.transpose();
      }
      ds.pairs.push_back(std::move(p));
    }
  }
  return ds;
}

// ---- splits ----

/// Deterministic stratified split: per label, round(fraction * count)
/// trajectories go to training after a seeded shuffle.
inline Dataset split(const Dataset& in, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split: fraction must lie in (0, 1)");
  Dataset out = in;
  out.train.clear();
  out.test.clear();
  std::mt19937_64 engine(seed);
  for (const auto& label : in.labels()) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < in.pairs.size(); ++i)
      if (in.pairs[i].label == label) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), engine);
    const auto n_train = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size())));
    for (std::size_t k = 0; k < idx.size(); ++k) (k < n_train ? out.train : out.test).push_back(idx[k]);
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

// ---- on-disk format ----

namespace detail {

inline std::vector<double> parse_row(const std::string& line, const std::string& path, std::size_t lineno) {
  std::vector<double> vals;
  const char* p = line.data();
  const char* end = p + line.size();
  while (p < end) {
    while (p < end && (*p == ' ' || *p == '\t')) ++p;
    double v = 0.0;
    auto [next, ec] = std::from_chars(p, end, v);
    if (ec != std::errc()) throw DataError(path + ":" + std::to_string(lineno) + ": malformed number");
    vals.push_back(v);
    p = next;
    while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
    if (p < end) {
      if (*p != ',') throw DataError(path + ":" + std::to_string(lineno) + ": expected ','");
      ++p;
    }
  }
  return vals;
}

}  // namespace detail

/// Reads a CSV with a header row into a frames x columns matrix.
inline Matrix read_csv(const std::filesystem::path& path, std::vector<std::string>* header = nullptr) {
  std::ifstream in(path);
  if (!in) throw DataError("missing file: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) {
      if (!c.empty() && c.back() == '\r') c.pop_back();
      cols.push_back(c);
    }
  }
  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto vals = detail::parse_row(line, path.string(), lineno);
    if (vals.size() != cols.size())
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(cols.size()) +
                      " columns, got " + std::to_string(vals.size()));
    rows.push_back(std::move(vals));
  }
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < cols.size(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  if (header) *header = std::move(cols);
  return m;
}

inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline void write_csv(const std::filesystem::path& path, const Matrix& m, const std::vector<std::string>& header) {
  if (static_cast<Eigen::Index>(header.size()) != m.cols()) throw ConfigError("write_csv: header width mismatch");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t c = 0; c < header.size(); ++c) out << (c ? "," : "") << header[c];
  out << "\n";
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << format_double(m(r, c));
    out << "\n";
  }
}

inline std::vector<std::string> skeleton_header() {
  std::vector<std::string> h;
  for (const char* j : {"shoulder", "elbow", "wrist"})
    for (const char* a : {"x", "y", "z"}) h.push_back(std::string(j) + "_" + a);
  return h;
}

inline std::vector<std::string> joint_header(Eigen::Index n) {
  std::vector<std::string> h;
  for (Eigen::Index i = 0; i < n; ++i) h.push_back("q" + std::to_string(i + 1));
  return h;
}

/// Writes `ds` as manifest.json plus per-agent CSVs under `dir`.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["window"] = ds.window;
  manifest["trajectories"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    const auto& p = ds.pairs[i];
    char id[16];
    std::snprintf(id, sizeof(id), "%04zu", i);
    nlohmann::json e;
    e["label"] = p.label;
    e["rate"] = p.rate;
    e["human"] = std::string("h_") + id + ".csv";
    e["robot"] = std::string("r_") + id + ".csv";
    write_csv(dir / e["human"].get<std::string>(), p.h_frames, skeleton_header());
    write_csv(dir / e["robot"].get<std::string>(), p.r_frames, joint_header(p.r_frames.cols()));
    if (p.has_partner()) {
      e["partner"] = std::string("p_") + id + ".csv";
      write_csv(dir / e["partner"].get<std::string>(), p.partner_frames, skeleton_header());
    }
    if (p.phase.size() > 0) {
      e["phase"] = std::string("phase_") + id + ".csv";
      write_csv(dir / e["phase"].get<std::string>(), p.phase, {"phase"});
    }
    manifest["trajectories"].push_back(e);
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw DataError("missing dataset manifest: " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.window = manifest.value("window", 5);
    for (const auto& e : manifest.at("trajectories")) {
      TrajectoryPair p;
      p.label = e.at("label").get<std::string>();
      p.rate = e.value("rate", manifest.value("rate", 20.0));
      p.h_frames = read_csv(dir / e.at("human").get<std::string>());
      p.r_frames = read_csv(dir / e.at("robot").get<std::string>());
      if (e.contains("partner")) p.partner_frames = read_csv(dir / e.at("partner").get<std::string>());
      if (e.contains("phase")) p.phase = read_csv(dir / e.at("phase").get<std::string>()).col(0);
      if (p.h_frames.cols() != kSkeletonWidth)
        throw DataError(e.at("human").get<std::string>() + ": expected 9 skeleton columns");
      p.validate();
      ds.pairs.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace lid
