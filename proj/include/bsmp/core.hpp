#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bsmp {

/// Upper bound on state, noise and control dimensions.
inline constexpr int kMaxDim = 4;

/// Runtime-sized vector with inline storage (no heap traffic in path loops).
using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1>;
/// Runtime-sized matrix with inline storage, at most kMaxDim x kMaxDim.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;

inline Vec make_vec(std::initializer_list<double> values) {
  Vec v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double x : values) v(i++) = x;
  return v;
}

inline Vec constant_vec(int n, double value) { return Vec::Constant(n, value); }

inline Vec unit_vec(int n, int i) {
  Vec e = Vec::Zero(n);
  e(i) = 1.0;
  return e;
}

// ---------------------------------------------------------------------------
// Errors

/// Base for every structured error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition on an argument does not hold.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Time grids of two inputs do not line up.
class GridMismatchError : public Error {
 public:
  using Error::Error;
};

/// A simulated state became NaN or infinite.
class SimulationError : public Error {
 public:
  SimulationError(std::size_t path, std::size_t step, const std::string& what)
      : Error("non-finite state on path " + std::to_string(path) + " at step " +
              std::to_string(step) + ": " + what),
        path_(path),
        step_(step) {}

  std::size_t path() const noexcept { return path_; }
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t path_;
  std::size_t step_;
};

/// An iterative solver failed to reach its tolerance.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, std::vector<double> history)
      : Error(what), history_(std::move(history)) {}

  const std::vector<double>& history() const noexcept { return history_; }

 private:
  std::vector<double> history_;
};

/// The explicit time step exceeds the stability bound.
class CflError : public Error {
 public:
  CflError(double requested_dt, double admissible_dt)
      : Error("time step " + std::to_string(requested_dt) +
              " exceeds the explicit stability bound; admissible dt <= " +
              std::to_string(admissible_dt)),
        requested_dt_(requested_dt),
        admissible_dt_(admissible_dt) {}

  double requested_dt() const noexcept { return requested_dt_; }
  double admissible_dt() const noexcept { return admissible_dt_; }

 private:
  double requested_dt_;
  double admissible_dt_;
};

// ---------------------------------------------------------------------------
// Sample statistics

struct MeanAndError {
  double mean = 0.0;
  double std_error = 0.0;
};

/// Sample mean and standard error (sample sd / sqrt(n)), summed in index order.
inline MeanAndError mean_and_error(std::span<const double> samples) {
  const std::size_t n = samples.size();
  if (n == 0) return {};
  double sum = 0.0;
  for (double s : samples) sum += s;
  const double mean = sum / static_cast<double>(n);
  if (n == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double s : samples) ss += (s - mean) * (s - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  return {mean, sd / std::sqrt(static_cast<double>(n))};
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }

}  // namespace bsmp
