#pragma once

#include "bsmp/core.hpp"
#include "bsmp/parallel.hpp"
#include "bsmp/problem.hpp"
#include "bsmp/rng.hpp"

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <vector>

namespace bsmp {

struct McConfig {
  std::size_t n_paths = 10000;
  std::size_t n_steps = 100;
  std::uint64_t seed = 0;
  /// Execution only: results do not depend on it.
  int workers = 1;
};

/// Drift and diffusion with any control already frozen in.
struct Dynamics {
  int state_dim = 1;
  int noise_dim = 1;
  std::function<Vec(double, const Vec&)> drift;
  std::function<Mat(double, const Vec&)> diffusion;
};

inline Dynamics controlled_dynamics(const ControlProblem& problem, const ControlPolicy& policy) {
  Dynamics dyn;
  dyn.state_dim = problem.state_dim;
  dyn.noise_dim = problem.noise_dim;
  dyn.drift = [drift = problem.drift, policy](double t, const Vec& x) {
    return drift(t, x, policy(t, x));
  };
  dyn.diffusion = problem.diffusion;
  return dyn;
}

/// Uniform grid t_start + (t_end - t_start) k / n_steps, k = 0..n_steps.
inline std::vector<double> uniform_time_grid(double t_start, double t_end, std::size_t n_steps) {
  std::vector<double> times(n_steps + 1);
  for (std::size_t k = 0; k <= n_steps; ++k)
    times[k] = t_start + (t_end - t_start) * static_cast<double>(k) / static_cast<double>(n_steps);
  times[n_steps] = t_end;
  return times;
}

inline void check_config(const McConfig& cfg) {
  if (cfg.n_paths == 0) throw ArgumentError("n_paths must be positive");
  if (cfg.n_steps == 0) throw ArgumentError("n_steps must be >= 1");
}

/// Brownian increments of one path: entry (k, j) at offset k * d + j, drawn
/// from stream `path` so each value depends only on (seed, path, k, j).
inline void path_increments(std::uint64_t seed, std::size_t path, std::size_t n_steps, int d,
                            double dt, std::span<double> out) {
  rng::fill_normals(seed, path, dt, out.first(n_steps * static_cast<std::size_t>(d)));
}

/// i.i.d. N(0, dt) array laid out [path][step][component].
inline std::vector<double> brownian_increments(const McConfig& cfg, int d, double dt) {
  check_config(cfg);
  if (!(dt > 0.0)) throw ArgumentError("dt must be positive");
  const std::size_t per_path = cfg.n_steps * static_cast<std::size_t>(d);
  std::vector<double> out(cfg.n_paths * per_path);
  parallel_for(cfg.n_paths, cfg.workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t p = begin; p < end; ++p)
      path_increments(cfg.seed, p, cfg.n_steps, d, dt,
                      std::span<double>(out).subspan(p * per_path, per_path));
  });
  return out;
}

/// One Euler-Maruyama path X_{k+1} = X_k + b(t_k, X_k) dt_k + sigma(t_k, X_k) dW_k.
/// `states` receives (times.size()) * n values.
inline void euler_maruyama_path(const Dynamics& dyn, std::span<const double> times, const Vec& x0,
                                std::span<const double> increments, std::span<double> states,
                                std::size_t path_index) {
  const int n = dyn.state_dim;
  const int d = dyn.noise_dim;
  const std::size_t n_steps = times.size() - 1;
  Vec x = x0;
  Vec dw(d);
  for (int i = 0; i < n; ++i) states[static_cast<std::size_t>(i)] = x(i);
  for (std::size_t k = 0; k < n_steps; ++k) {
    const double t = times[k];
    const double dt = times[k + 1] - t;
    for (int j = 0; j < d; ++j) dw(j) = increments[k * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
    const Vec b = dyn.drift(t, x);
    const Mat s = dyn.diffusion(t, x);
    x += b * dt + s * dw;
    if (!x.allFinite()) throw SimulationError(path_index, k + 1, "Euler-Maruyama update");
    const std::size_t off = (k + 1) * static_cast<std::size_t>(n);
    for (int i = 0; i < n; ++i) states[off + static_cast<std::size_t>(i)] = x(i);
  }
}

/// Streams every path to visit(path, states, increments) without storing the
/// batch. Paths are split across cfg.workers threads; `visit` must only write
/// to per-path slots.
template <class Visitor>
void for_each_path(const Dynamics& dyn, std::span<const double> times, const Vec& x0,
                   const McConfig& cfg, Visitor&& visit) {
  check_config(cfg);
  const std::size_t n_steps = times.size() - 1;
  const std::size_t n = static_cast<std::size_t>(dyn.state_dim);
  const std::size_t d = static_cast<std::size_t>(dyn.noise_dim);
  const double dt = (times.back() - times.front()) / static_cast<double>(n_steps);
  parallel_for(cfg.n_paths, cfg.workers, [&](std::size_t begin, std::size_t end) {
    std::vector<double> incs(n_steps * d);
    std::vector<double> states((n_steps + 1) * n);
    for (std::size_t p = begin; p < end; ++p) {
      path_increments(cfg.seed, p, n_steps, dyn.noise_dim, dt, incs);
      euler_maruyama_path(dyn, times, x0, incs, states, p);
      visit(p, std::span<const double>(states), std::span<const double>(incs));
    }
  });
}

/// A stored ensemble of simulated paths with their Brownian increments.
class PathBatch {
 public:
  PathBatch(std::vector<double> times, std::size_t n_paths, int state_dim, int noise_dim,
            std::uint64_t seed)
      : times_(std::move(times)),
        n_paths_(n_paths),
        n_(state_dim),
        d_(noise_dim),
        seed_(seed),
        states_(n_paths * times_.size() * static_cast<std::size_t>(state_dim)),
        increments_(n_paths * (times_.size() - 1) * static_cast<std::size_t>(noise_dim)) {}

  std::size_t n_paths() const { return n_paths_; }
  std::size_t n_steps() const { return times_.size() - 1; }
  int state_dim() const { return n_; }
  int noise_dim() const { return d_; }
  std::uint64_t seed() const { return seed_; }
  double t_start() const { return times_.front(); }
  double t_end() const { return times_.back(); }
  double dt() const { return (t_end() - t_start()) / static_cast<double>(n_steps()); }
  std::span<const double> times() const { return times_; }

  Vec state(std::size_t path, std::size_t step) const {
    Vec x(n_);
    const auto row = path_states(path).subspan(step * static_cast<std::size_t>(n_), static_cast<std::size_t>(n_));
    for (int i = 0; i < n_; ++i) x(i) = row[static_cast<std::size_t>(i)];
    return x;
  }
  double increment(std::size_t path, std::size_t step, int component) const {
    return path_increments(path)[step * static_cast<std::size_t>(d_) + static_cast<std::size_t>(component)];
  }

  std::span<const double> path_states(std::size_t path) const {
    const std::size_t len = times_.size() * static_cast<std::size_t>(n_);
    return std::span<const double>(states_).subspan(path * len, len);
  }
  std::span<const double> path_increments(std::size_t path) const {
    const std::size_t len = n_steps() * static_cast<std::size_t>(d_);
    return std::span<const double>(increments_).subspan(path * len, len);
  }
  std::span<const double> states() const { return states_; }
  std::span<const double> increments() const { return increments_; }

  std::span<double> mutable_path_states(std::size_t path) {
    const std::size_t len = times_.size() * static_cast<std::size_t>(n_);
    return std::span<double>(states_).subspan(path * len, len);
  }
  std::span<double> mutable_path_increments(std::size_t path) {
    const std::size_t len = n_steps() * static_cast<std::size_t>(d_);
    return std::span<double>(increments_).subspan(path * len, len);
  }

  /// Debug dump, one row per (path, step): path,step,t,x0..,dW0.. (the last
  /// step of each path has empty dW columns).
  void write_csv(std::ostream& os) const {
    os << "path,step,t";
    for (int i = 0; i < n_; ++i) os << ",x" << i;
    for (int j = 0; j < d_; ++j) os << ",dW" << j;
    os << '\n';
    os.precision(17);
    for (std::size_t p = 0; p < n_paths_; ++p)
      for (std::size_t k = 0; k <= n_steps(); ++k) {
        os << p << ',' << k << ',' << times_[k];
        const Vec x = state(p, k);
        for (int i = 0; i < n_; ++i) os << ',' << x(i);
        for (int j = 0; j < d_; ++j) {
          os << ',';
          if (k < n_steps()) os << increment(p, k, j);
        }
        os << '\n';
      }
  }

 private:
  std::vector<double> times_;
  std::size_t n_paths_;
  int n_;
  int d_;
  std::uint64_t seed_;
  std::vector<double> states_;
  std::vector<double> increments_;
};

/// Batched Euler-Maruyama for frozen dynamics on a uniform grid.
inline PathBatch simulate(const Dynamics& dyn, double t_start, const Vec& init, double t_end,
                          const McConfig& cfg) {
  check_config(cfg);
  if (!(t_end > t_start)) throw ArgumentError("simulate requires t_start < t_end");
  if (init.size() != dyn.state_dim) throw ArgumentError("initial state has wrong length");
  PathBatch batch(uniform_time_grid(t_start, t_end, cfg.n_steps), cfg.n_paths, dyn.state_dim,
                  dyn.noise_dim, cfg.seed);
  const auto times = batch.times();
  parallel_for(cfg.n_paths, cfg.workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t p = begin; p < end; ++p) {
      auto incs = batch.mutable_path_increments(p);
      path_increments(cfg.seed, p, cfg.n_steps, dyn.noise_dim, batch.dt(), incs);
      euler_maruyama_path(dyn, times, init, incs, batch.mutable_path_states(p), p);
    }
  });
  return batch;
}

/// Simulates the controlled state equation under `policy` on [t_start, t_end].
inline PathBatch simulate(const ControlProblem& problem, const ControlPolicy& policy,
                          double t_start, const Vec& init, double t_end, const McConfig& cfg) {
  if (!(t_start >= 0.0) || !(t_end <= problem.horizon + 1e-12))
    throw ArgumentError("simulation interval must lie inside [0, T]");
  return simulate(controlled_dynamics(problem, policy), t_start, init, t_end, cfg);
}

}  // namespace bsmp
