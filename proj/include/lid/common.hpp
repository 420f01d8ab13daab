#pragma once

// Shared error types, logging and random state for the lid library.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <iostream>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace lid {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Base class of every error thrown by the library. The category maps onto
/// the CLI exit codes (2 config, 3 data, 4 numerical).
class Error : public std::runtime_error {
 public:
  enum class Kind { kConfig, kData, kNumerical };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  [[nodiscard]] Kind kind() const { return kind_; }

  [[nodiscard]] int exit_code() const {
    switch (kind_) {
      case Kind::kConfig:
        return 2;
      case Kind::kData:
        return 3;
      case Kind::kNumerical:
        return 4;
    }
    return 1;
  }

 private:
  Kind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(Kind::kConfig, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(Kind::kData, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(Kind::kNumerical, what) {}
};

// ---- logging ----

enum class LogLevel { kDebug = 0, kInfo = 1, kWarn = 2, kError = 3, kOff = 4 };

namespace detail {
struct LogSink {
  LogLevel level = LogLevel::kWarn;
  std::function<void(LogLevel, const std::string&)> hook;
  std::mutex mu;
};

inline LogSink& log_sink() {
  static LogSink sink;
  return sink;
}
}  // namespace detail

inline void set_log_level(LogLevel level) { detail::log_sink().level = level; }

inline LogLevel log_level() { return detail::log_sink().level; }

/// Installs a callback that receives every message regardless of level.
/// Tests use it to observe warnings. Pass an empty function to remove it.
inline void set_log_hook(std::function<void(LogLevel, const std::string&)> hook) {
  auto& sink = detail::log_sink();
  std::lock_guard<std::mutex> lock(sink.mu);
  sink.hook = std::move(hook);
}

inline void log(LogLevel level, const std::string& msg) {
  auto& sink = detail::log_sink();
  std::lock_guard<std::mutex> lock(sink.mu);
  if (sink.hook) sink.hook(level, msg);
  if (level < sink.level) return;
  static constexpr const char* kNames[] = {"debug", "info", "warn", "error"};
  std::clog << "[" << kNames[static_cast<int>(level)] << "] " << msg << "\n";
}

inline void log_warn(const std::string& msg) { log(LogLevel::kWarn, msg); }
inline void log_info(const std::string& msg) { log(LogLevel::kInfo, msg); }
inline void log_debug(const std::string& msg) { log(LogLevel::kDebug, msg); }

// ---- random state ----

/// Seeded pseudo-random source. All stochastic operations take one of these
/// so that results are reproducible bit-for-bit given the seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double normal() { return normal_(engine_); }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
  }

  std::uint64_t next_u64() { return engine_(); }

  Vector normal_vector(Eigen::Index n) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal();
    return v;
  }

  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    // column-major fill so results do not depend on Eigen's storage order flags
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = normal();
    return m;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace lid
