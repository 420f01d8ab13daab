#pragma once

// JSON encoding of Gaussians, HMMs, networks and kinematic chains.

#include <string>
#include <vector>

#include "json.hpp"
#include "lid/gauss.hpp"
#include "lid/hmm.hpp"
#include "lid/kin.hpp"
#include "lid/net.hpp"
#include "lid/vae.hpp"

namespace lid {

using Json = nlohmann::json;

inline Json vector_to_json(const Eigen::Ref<const Vector>& v) {
  Json j = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) j.push_back(v(i));
  return j;
}

inline Vector vector_from_json(const Json& j) {
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j.at(i).get<double>();
  return v;
}

/// Row-major nested arrays.
inline Json matrix_to_json(const Matrix& m) {
  Json j = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) j.push_back(vector_to_json(m.row(r).transpose()));
  return j;
}

inline Matrix matrix_from_json(const Json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows > 0 ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Json& row = j.at(static_cast<std::size_t>(r));
    if (static_cast<Eigen::Index>(row.size()) != cols) throw ConfigError("json: ragged matrix");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

inline Json to_json(const Gaussian& g) { return {{"mean", vector_to_json(g.mean)}, {"cov", matrix_to_json(g.cov)}}; }

inline Gaussian gaussian_from_json(const Json& j) {
  Gaussian g{vector_from_json(j.at("mean")), matrix_from_json(j.at("cov"))};
  if (g.cov.rows() != g.dim() || g.cov.cols() != g.dim()) throw ConfigError("json: gaussian shape mismatch");
  return g;
}

inline Json to_json(const Hmm& h) {
  Json comps = Json::array();
  for (const auto& c : h.components) comps.push_back(to_json(c.base));
  return {{"pi", vector_to_json(h.pi)},
          {"trans", matrix_to_json(h.trans)},
          {"components", comps},
          {"latent_dim", h.latent_dim()},
          {"contact_states", h.contact_states},
          {"reach_states", h.reach_states}};
}

inline Hmm hmm_from_json(const Json& j) {
  Hmm h;
  h.pi = vector_from_json(j.at("pi"));
  h.trans = matrix_from_json(j.at("trans"));
  for (const auto& c : j.at("components")) {
    Gaussian g = gaussian_from_json(c);
    const Eigen::Index split = j.value("latent_dim", g.dim() / 2);
    h.components.emplace_back(std::move(g), split);
  }
  h.contact_states = j.value("contact_states", std::vector<int>{});
  h.reach_states = j.value("reach_states", std::vector<int>{});
  h.validate();
  return h;
}

inline Json to_json(const TransitionStateModel& t) {
  Json j = {{"contact_states", t.contact_states}, {"reach_states", t.reach_states}};
  j["gate"] = t.gate ? to_json(*t.gate) : Json(nullptr);
  return j;
}

inline TransitionStateModel tsm_from_json(const Json& j) {
  TransitionStateModel t;
  t.contact_states = j.value("contact_states", std::vector<int>{});
  t.reach_states = j.value("reach_states", std::vector<int>{});
  if (j.contains("gate") && !j.at("gate").is_null()) t.gate = gaussian_from_json(j.at("gate"));
  return t;
}

inline Json to_json(const Mlp& m) {
  Json layers = Json::array();
  for (const auto& l : m.layers)
    layers.push_back({{"in", l.weight.cols()},
                      {"out", l.weight.rows()},
                      {"weight", matrix_to_json(l.weight)},
                      {"bias", vector_to_json(l.bias)}});
  return {{"activation", "leaky_relu"}, {"negative_slope", m.slope}, {"sizes", m.sizes()}, {"layers", layers}};
}

inline Mlp mlp_from_json(const Json& j) {
  Mlp m;
  m.slope = j.value("negative_slope", 0.01);
  for (const auto& l : j.at("layers")) m.layers.push_back({matrix_from_json(l.at("weight")), vector_from_json(l.at("bias"))});
  m.validate();
  return m;
}

inline Json to_json(const Vae& v) {
  return {{"d_z", v.d_z},
          {"input_dim", v.input_dim},
          {"hidden", v.hidden},
          {"encoder", to_json(v.encoder)},
          {"decoder", to_json(v.decoder)}};
}

inline Vae vae_from_json(const Json& j) {
  Vae v;
  v.d_z = j.at("d_z").get<Eigen::Index>();
  v.input_dim = j.at("input_dim").get<Eigen::Index>();
  v.hidden = j.value("hidden", std::vector<Eigen::Index>{40, 20});
  v.encoder = mlp_from_json(j.at("encoder"));
  v.decoder = mlp_from_json(j.at("decoder"));
  if (v.encoder.input_dim() != v.input_dim || v.encoder.output_dim() != 2 * v.d_z || v.decoder.input_dim() != v.d_z ||
      v.decoder.output_dim() != v.input_dim)
    throw ConfigError("json: VAE architecture metadata does not match its layers");
  return v;
}

// ---- kinematic chains ----

inline Json transform_to_json(const Transform& t) {
  const Eigen::AngleAxisd aa(t.rotation());
  const Vec3 rot = aa.axis() * aa.angle();
  return {{"translation", vector_to_json(t.translation())}, {"rotation", vector_to_json(rot)}};
}

/// {"translation": [x, y, z], "rotation": axis-angle 3-vector}; both optional.
inline Transform transform_from_json(const Json& j) {
  Transform t = Transform::Identity();
  if (j.contains("translation")) t.translate(Vec3(vector_from_json(j.at("translation"))));
  if (j.contains("rotation")) {
    const Vec3 r = vector_from_json(j.at("rotation"));
    if (r.norm() > 0.0) t.rotate(Eigen::AngleAxisd(r.norm(), r.normalized()));
  }
  return t;
}

inline Json to_json(const KinematicChain& c) {
  Json joints = Json::array();
  for (const auto& jt : c.joints)
    joints.push_back({{"name", jt.name},
                      {"offset", transform_to_json(jt.offset)},
                      {"axis", vector_to_json(jt.axis)},
                      {"limits", {jt.lo, jt.hi}}});
  return {{"base", transform_to_json(c.base)}, {"joints", joints}, {"tip", transform_to_json(c.tip)}};
}

inline KinematicChain chain_from_json(const Json& j) {
  KinematicChain c;
  if (j.contains("base")) c.base = transform_from_json(j.at("base"));
  if (j.contains("tip")) c.tip = transform_from_json(j.at("tip"));
  for (const auto& e : j.at("joints")) {
    Joint jt;
    jt.name = e.value("name", "");
    if (e.contains("offset")) jt.offset = transform_from_json(e.at("offset"));
    jt.axis = vector_from_json(e.at("axis"));
    const auto lim = e.at("limits");
    jt.lo = lim.at(0).get<double>();
    jt.hi = lim.at(1).get<double>();
    c.joints.push_back(jt);
  }
  c.validate();
  return c;
}

}  // namespace lid
