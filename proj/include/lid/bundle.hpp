#pragma once

// Training configuration, the trained model bundle and its model file.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lid/data.hpp"
#include "lid/serialize.hpp"

namespace lid {

struct TrainConfig {
  int epochs = 400;
  double beta = 5e-3;
  double lr = 5e-4;
  double weight_decay = 1e-2;
  int mc_samples = 10;
  int n_states = 6;
  int d_z = 5;
  Variant variant = Variant::kV32;
  std::vector<std::uint64_t> seeds{0};
  int hmm_refit_every = 1;
  int em_iters = 20;
  double em_tol = 1e-4;
  int window = 5;
  double val_fraction = 0.1;
  double recon_weight = 1.0;
  double cond_weight = 1.0;
  std::vector<Eigen::Index> hidden{40, 20};
  // contact / reach HMM states per interaction label, set after inspection
  std::map<std::string, std::vector<int>> contact_states;
  std::map<std::string, std::vector<int>> reach_states;

  void validate() const {
    if (epochs < 1 || beta < 0.0 || !(lr > 0.0) || weight_decay < 0.0 || mc_samples < 1 || n_states < 1 || d_z < 1 ||
        hmm_refit_every < 1 || em_iters < 1 || window < 1 || !(val_fraction >= 0.0 && val_fraction < 1.0))
      throw ConfigError("train config: every setting must be positive (val_fraction in [0, 1))");
    if (seeds.empty()) throw ConfigError("train config: no seeds");
  }
};

inline Json to_json(const TrainConfig& c) {
  std::vector<std::string> variant{to_string(c.variant)};
  return {{"epochs", c.epochs},
          {"beta", c.beta},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"mc_samples", c.mc_samples},
          {"n_states", c.n_states},
          {"d_z", c.d_z},
          {"variant", to_string(c.variant)},
          {"seeds", c.seeds},
          {"hmm_refit_every", c.hmm_refit_every},
          {"em_iters", c.em_iters},
          {"em_tol", c.em_tol},
          {"window", c.window},
          {"val_fraction", c.val_fraction},
          {"recon_weight", c.recon_weight},
          {"cond_weight", c.cond_weight},
          {"hidden", c.hidden},
          {"contact_states", c.contact_states},
          {"reach_states", c.reach_states}};
}

/// Reads a TrainConfig; missing keys keep their defaults.
inline TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.beta = j.value("beta", c.beta);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.mc_samples = j.value("mc_samples", c.mc_samples);
    c.n_states = j.value("n_states", c.n_states);
    c.d_z = j.value("d_z", c.d_z);
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    c.seeds = j.value("seeds", c.seeds);
    c.hmm_refit_every = j.value("hmm_refit_every", c.hmm_refit_every);
    c.em_iters = j.value("em_iters", c.em_iters);
    c.em_tol = j.value("em_tol", c.em_tol);
    c.window = j.value("window", c.window);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.recon_weight = j.value("recon_weight", c.recon_weight);
    c.cond_weight = j.value("cond_weight", c.cond_weight);
    c.hidden = j.value("hidden", c.hidden);
    c.contact_states = j.value("contact_states", c.contact_states);
    c.reach_states = j.value("reach_states", c.reach_states);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

struct InteractionModel {
  Hmm hmm;
  TransitionStateModel tsm;
};

/// Output of training. After the first stage `robot_vae` is empty when the
/// two humans share weights; after the second stage it holds the robot VAE.
struct ModelBundle {
  Vae human_vae;
  std::optional<Vae> partner_vae;  // only when the two-human stage did not share weights
  std::optional<Vae> robot_vae;
  std::map<std::string, InteractionModel> hmms;
  TrainConfig config;
  std::uint64_t seed = 0;
  std::string stage = "hhi";
  Variant variant = Variant::kV1;

  /// VAE that decodes the second agent: robot after the second stage, else the
  /// partner (or the shared human VAE).
  [[nodiscard]] const Vae& output_vae() const {
    if (robot_vae) return *robot_vae;
    if (partner_vae) return *partner_vae;
    return human_vae;
  }

  /// Feature kind of the second agent's windows.
  [[nodiscard]] FeatureKind output_kind() const {
    return (robot_vae || partner_vae) ? FeatureKind::kJoints : FeatureKind::kPositions;
  }

  [[nodiscard]] const InteractionModel& interaction(const std::string& label) const {
    auto it = hmms.find(label);
    if (it == hmms.end()) throw ConfigError("unknown interaction '" + label + "'");
    return it->second;
  }

  void validate() const {
    for (const auto& [label, m] : hmms)
      if (m.hmm.dim() != 2 * human_vae.d_z)
        throw ConfigError("bundle: HMM for '" + label + "' does not span both agents' latents");
  }
};

inline Json to_json(const ModelBundle& b) {
  Json hmms = Json::object();
  for (const auto& [label, m] : b.hmms) hmms[label] = {{"hmm", to_json(m.hmm)}, {"transition_states", to_json(m.tsm)}};
  Json j = {{"format", "lid-model-1"},
            {"stage", b.stage},
            {"variant", to_string(b.variant)},
            {"seed", b.seed},
            {"config", to_json(b.config)},
            {"human_vae", to_json(b.human_vae)},
            {"hmms", hmms}};
  j["partner_vae"] = b.partner_vae ? to_json(*b.partner_vae) : Json(nullptr);
  j["robot_vae"] = b.robot_vae ? to_json(*b.robot_vae) : Json(nullptr);
  return j;
}

inline ModelBundle bundle_from_json(const Json& j) {
  ModelBundle b;
  if (!j.is_object() || j.value("format", "") != "lid-model-1")
    throw ConfigError("model file: unrecognized format (expected lid-model-1)");
  try {
    b.stage = j.value("stage", "hhi");
    b.variant = parse_variant(j.value("variant", "v1"));
    b.seed = j.value("seed", std::uint64_t{0});
    b.config = train_config_from_json(j.at("config"));
    b.human_vae = vae_from_json(j.at("human_vae"));
    if (j.contains("partner_vae") && !j.at("partner_vae").is_null()) b.partner_vae = vae_from_json(j.at("partner_vae"));
    if (j.contains("robot_vae") && !j.at("robot_vae").is_null()) b.robot_vae = vae_from_json(j.at("robot_vae"));
    for (const auto& [label, m] : j.at("hmms").items())
      b.hmms[label] = InteractionModel{hmm_from_json(m.at("hmm")), tsm_from_json(m.at("transition_states"))};
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model file: ") + e.what());
  }
  b.validate();
  return b;
}

inline void save_bundle(const ModelBundle& b, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json(b).dump(1) << "\n";
}

inline ModelBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing model file: " + path.string());
  Json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return bundle_from_json(j);
}

// ---- features ----

/// Windowed features of one trajectory, columns aligned by window start.
struct TrajectoryFeatures {
  std::string label;
  Matrix x_h;        // human positions + deltas
  Matrix x_partner;  // second human positions + deltas (may be empty)
  Matrix x_r;        // robot joints
  Matrix hand;       // 3 x n partner-facing target positions (may be empty)
};

inline TrajectoryFeatures featurize(const TrajectoryPair& p, int w) {
  TrajectoryFeatures f;
  f.label = p.label;
  f.x_h = window_features(p.h_frames, w, FeatureKind::kPositions);
  if (p.has_partner()) f.x_partner = window_features(p.partner_frames, w, FeatureKind::kPositions);
  f.x_r = window_features(p.r_frames, w, FeatureKind::kJoints);
  return f;
}

}  // namespace lid
