#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lid/common.hpp"
#include "lid/gauss.hpp"

namespace lid::testing {

/// Random SPD matrix A Aᵀ + jitter I.
inline Matrix random_spd(Eigen::Index d, Rng& rng, double jitter = 0.5) {
  const Matrix a = rng.normal_matrix(d, d);
  return a * a.transpose() + jitter * Matrix::Identity(d, d);
}

inline Gaussian random_gaussian(Eigen::Index d, Rng& rng) { return {rng.normal_vector(d), random_spd(d, rng)}; }

inline double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

/// Captures warnings emitted while alive.
class WarningCapture {
 public:
  WarningCapture() {
    set_log_hook([this](LogLevel level, const std::string& msg) {
      if (level == LogLevel::kWarn) messages.push_back(msg);
    });
  }
  ~WarningCapture() { set_log_hook({}); }
  WarningCapture(const WarningCapture&) = delete;
  WarningCapture& operator=(const WarningCapture&) = delete;

  [[nodiscard]] bool contains(const std::string& needle) const {
    for (const auto& m : messages)
      if (m.find(needle) != std::string::npos) return true;
    return false;
  }

  std::vector<std::string> messages;
};

}  // namespace lid::testing
