#pragma once

// Small feed-forward networks with hand-written reverse mode, Xavier
// initialization, Adam with decoupled weight decay and a finite-difference
// gradient checker.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lid/common.hpp"

namespace lid {

struct Layer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

/// Multilayer perceptron. Hidden layers use a leaky rectifier; the output
/// layer is linear. Inputs are processed column-wise (one sample per column).
struct Mlp {
  std::vector<Layer> layers;
  double slope = 0.01;
  // bumped on every parameter write through the library; tapes record it
  std::uint64_t version = 0;

  [[nodiscard]] Eigen::Index input_dim() const { return layers.front().weight.cols(); }
  [[nodiscard]] Eigen::Index output_dim() const { return layers.back().weight.rows(); }

  [[nodiscard]] Eigen::Index param_count() const {
    Eigen::Index n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  [[nodiscard]] std::vector<Eigen::Index> sizes() const {
    std::vector<Eigen::Index> s{input_dim()};
    for (const auto& l : layers) s.push_back(l.weight.rows());
    return s;
  }

  /// Weights then bias per layer, weights in column-major order.
  [[nodiscard]] Vector flatten() const {
    Vector out(param_count());
    Eigen::Index k = 0;
    for (const auto& l : layers) {
      out.segment(k, l.weight.size()) = l.weight.reshaped();
      k += l.weight.size();
      out.segment(k, l.bias.size()) = l.bias;
      k += l.bias.size();
    }
    return out;
  }

  void unflatten(const Eigen::Ref<const Vector>& p) {
    if (p.size() != param_count()) throw ConfigError("mlp: parameter vector has wrong length");
    Eigen::Index k = 0;
    for (auto& l : layers) {
      l.weight.reshaped() = p.segment(k, l.weight.size());
      k += l.weight.size();
      l.bias = p.segment(k, l.bias.size());
      k += l.bias.size();
    }
    ++version;
  }

  void validate() const {
    if (layers.empty()) throw ConfigError("mlp: no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].bias.size() != layers[i].weight.rows()) throw ConfigError("mlp: bias/weight mismatch");
      if (i > 0 && layers[i].weight.cols() != layers[i - 1].weight.rows())
        throw ConfigError("mlp: layer " + std::to_string(i) + " does not compose with its predecessor");
      if (!layers[i].weight.allFinite() || !layers[i].bias.allFinite())
        throw NumericalError("mlp: non-finite parameters in layer " + std::to_string(i));
    }
  }
};

/// Entries uniform in +-sqrt(6 / (rows + cols)).
inline Matrix xavier_init(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  if (rows <= 0 || cols <= 0) throw ConfigError("xavier_init: dimensions must be positive");
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.uniform(-bound, bound);
  return m;
}

/// Builds an MLP with the given layer widths (input first), Xavier weights
/// and zero biases.
inline Mlp make_mlp(const std::vector<Eigen::Index>& widths, Rng& rng, double slope = 0.01) {
  if (widths.size() < 2) throw ConfigError("make_mlp: need at least input and output widths");
  Mlp m;
  m.slope = slope;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i)
    m.layers.push_back({xavier_init(widths[i + 1], widths[i], rng), Vector::Zero(widths[i + 1])});
  return m;
}

/// Activation record of one forward pass.
struct Tape {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // pre-activation of each layer
  const Mlp* owner = nullptr;
  std::uint64_t version = 0;
};

struct MlpGrad {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;

  static MlpGrad zeros_like(const Mlp& m) {
    MlpGrad g;
    for (const auto& l : m.layers) {
      g.weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
      g.bias.push_back(Vector::Zero(l.bias.size()));
    }
    return g;
  }

  MlpGrad& operator+=(const MlpGrad& o) {
    for (std::size_t i = 0; i < weight.size(); ++i) {
      weight[i] += o.weight[i];
      bias[i] += o.bias[i];
    }
    return *this;
  }

  MlpGrad& operator*=(double s) {
    for (std::size_t i = 0; i < weight.size(); ++i) {
      weight[i] *= s;
      bias[i] *= s;
    }
    return *this;
  }

  [[nodiscard]] Vector flatten() const {
    Eigen::Index n = 0;
    for (std::size_t i = 0; i < weight.size(); ++i) n += weight[i].size() + bias[i].size();
    Vector out(n);
    Eigen::Index k = 0;
    for (std::size_t i = 0; i < weight.size(); ++i) {
      out.segment(k, weight[i].size()) = weight[i].reshaped();
      k += weight[i].size();
      out.segment(k, bias[i].size()) = bias[i];
      k += bias[i].size();
    }
    return out;
  }
};

struct BackwardResult {
  MlpGrad grad;
  Matrix input_grad;
};

namespace detail {
inline Matrix leaky(const Matrix& x, double slope) {
  return x.unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
}
}  // namespace detail

/// Batch forward pass; `x` holds one sample per column.
inline Matrix mlp_forward_batch(const Mlp& m, const Matrix& x, Tape* tape = nullptr) {
  if (x.rows() != m.input_dim())
    throw ConfigError("mlp_forward: input width " + std::to_string(x.rows()) + " does not match " +
                      std::to_string(m.input_dim()));
  if (tape) {
    tape->inputs.clear();
    tape->pre.clear();
    tape->owner = &m;
    tape->version = m.version;
  }
  Matrix h = x;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    Matrix z = l.weight * h;
    z.colwise() += l.bias;
    if (tape) {
      tape->inputs.push_back(std::move(h));
      tape->pre.push_back(z);
    }
    h = (i + 1 < m.layers.size()) ? detail::leaky(z, m.slope) : std::move(z);
  }
  return h;
}

struct ForwardOutput {
  Vector output;
  Tape tape;
};

inline ForwardOutput mlp_forward(const Mlp& m, const Eigen::Ref<const Vector>& x) {
  ForwardOutput out;
  out.output = mlp_forward_batch(m, Matrix(x), &out.tape);
  return out;
}

/// Reverse pass for the scalar loss whose gradient w.r.t. the network output
/// is `out_grad` (same shape as the batch output).
inline BackwardResult mlp_backward(const Mlp& m, const Tape& tape, const Matrix& out_grad) {
  if (tape.owner != &m || tape.version != m.version || tape.pre.size() != m.layers.size())
    throw ConfigError("mlp_backward: stale tape");
  if (out_grad.rows() != m.output_dim() || out_grad.cols() != tape.pre.back().cols())
    throw ConfigError("mlp_backward: output gradient shape mismatch");
  BackwardResult res;
  res.grad = MlpGrad::zeros_like(m);
  Matrix delta = out_grad;
  for (std::size_t k = m.layers.size(); k-- > 0;) {
    if (k + 1 < m.layers.size()) {
      const double s = m.slope;
      delta = delta.cwiseProduct(tape.pre[k].unaryExpr([s](double v) { return v > 0.0 ? 1.0 : s; }));
    }
    res.grad.weight[k].noalias() = delta * tape.inputs[k].transpose();
    res.grad.bias[k] = delta.rowwise().sum();
    delta = m.layers[k].weight.transpose() * delta;
  }
  res.input_grad = std::move(delta);
  return res;
}

// ---- optimizer ----

struct AdamState {
  Vector m;
  Vector v;
  long step = 0;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Named span of a flat parameter vector, for error reporting.
struct ParamBlock {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index size = 0;
};

inline std::vector<ParamBlock> param_blocks(const Mlp& m, const std::string& prefix) {
  std::vector<ParamBlock> blocks;
  Eigen::Index k = 0;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    blocks.push_back({prefix + ".layer" + std::to_string(i) + ".weight", k, l.weight.size()});
    k += l.weight.size();
    blocks.push_back({prefix + ".layer" + std::to_string(i) + ".bias", k, l.bias.size()});
    k += l.bias.size();
  }
  return blocks;
}

/// One bias-corrected Adam update with decoupled weight decay
/// (params <- params - lr * wd * params, then the adaptive step).
inline void adam_step(Eigen::Ref<Vector> params, const Eigen::Ref<const Vector>& grads, AdamState& s,
                      const std::vector<ParamBlock>& blocks = {}) {
  if (params.size() != grads.size()) throw ConfigError("adam_step: parameter/gradient length mismatch");
  if (!grads.allFinite()) {
    std::string where = "unknown block";
    for (const auto& b : blocks)
      if (!grads.segment(b.offset, b.size).allFinite()) {
        where = b.name;
        break;
      }
    throw NumericalError("adam_step: non-finite gradient in " + where);
  }
  if (s.m.size() == 0) {
    s.m = Vector::Zero(params.size());
    s.v = Vector::Zero(params.size());
  }
  if (s.m.size() != params.size()) throw ConfigError("adam_step: optimizer state does not match parameters");
  ++s.step;
  if (s.weight_decay != 0.0) params *= (1.0 - s.lr * s.weight_decay);
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grads;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  params.array() -= s.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.eps);
}

/// Adam on an MLP in place.
inline void adam_step(Mlp& m, const MlpGrad& g, AdamState& s, const std::string& name = "mlp") {
  Vector p = m.flatten();
  adam_step(p, g.flatten(), s, param_blocks(m, name));
  m.unflatten(p);
}

// ---- gradient checking ----

/// Worst relative error between `analytic` and central differences of
/// `loss` around `params`. Relative error is |a - n| / max(|a|, |n|, floor).
inline double grad_check(const std::function<double(const Vector&)>& loss, const Vector& params,
                         const Vector& analytic, double h = 1e-5, double floor = 1e-6) {
  if (analytic.size() != params.size()) throw ConfigError("grad_check: gradient length mismatch");
  double worst = 0.0;
  Vector p = params;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double orig = p(i);
    p(i) = orig + h;
    const double up = loss(p);
    p(i) = orig - h;
    const double down = loss(p);
    p(i) = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic(i)), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(analytic(i) - numeric) / denom);
  }
  return worst;
}

}  // namespace lid
