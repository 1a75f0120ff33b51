#pragma once

#include "bsmp/core.hpp"
#include "bsmp/problem.hpp"
#include "bsmp/sde.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace bsmp {

/// Monte Carlo estimate of J(u) = E[int f dt + h(X(T))] + G(E[X(T)]).
struct CostEstimate {
  /// running/terminal mean plus the plug-in G(sample mean of X(T)).
  double mean = 0.0;
  /// Standard error of the running + terminal part only.
  double std_error = 0.0;
  double running_terminal_mean = 0.0;
  double meanfield_plugin = 0.0;
  /// Delta-method standard error of `mean`, G's first-order noise included.
  double total_std_error = 0.0;
  Vec terminal_mean;
  std::size_t n_paths = 0;
};

/// Throws GridMismatchError unless every breakpoint inside (t_start, t_end)
/// is a grid time.
inline void check_policy_grid(const ControlPolicy& policy, std::span<const double> times) {
  const double t0 = times.front();
  const double t1 = times.back();
  const double dt = (t1 - t0) / static_cast<double>(times.size() - 1);
  for (double b : policy.breakpoints()) {
    if (b <= t0 || b >= t1) continue;
    const double k = std::round((b - t0) / dt);
    if (std::abs(t0 + k * dt - b) > 1e-9 * dt)
      throw GridMismatchError("policy breakpoint " + std::to_string(b) +
                              " is not on the simulation grid (dt = " + std::to_string(dt) + ")");
  }
}

/// Left-endpoint running cost plus terminal cost along one stored path.
inline double path_cost(const ControlProblem& problem, const ControlPolicy& policy,
                        std::span<const double> times, std::span<const double> states) {
  const int n = problem.state_dim;
  const std::size_t n_steps = times.size() - 1;
  Vec x(n);
  double acc = 0.0;
  for (std::size_t k = 0; k < n_steps; ++k) {
    for (int i = 0; i < n; ++i) x(i) = states[k * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)];
    const double t = times[k];
    acc += problem.running_cost(t, x, policy(t, x)) * (times[k + 1] - t);
  }
  for (int i = 0; i < n; ++i) x(i) = states[n_steps * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)];
  return acc + problem.terminal_cost(x);
}

/// Combines per-path costs and terminal states into a CostEstimate.
/// `terminals` is laid out [path][component].
inline CostEstimate summarize_cost(const ControlProblem& problem, std::span<const double> costs,
                                   std::span<const double> terminals) {
  const std::size_t n_paths = costs.size();
  const int n = problem.state_dim;
  CostEstimate est;
  est.n_paths = n_paths;
  const auto fh = mean_and_error(costs);
  est.running_terminal_mean = fh.mean;
  est.std_error = fh.std_error;
  Vec m = Vec::Zero(n);
  for (std::size_t p = 0; p < n_paths; ++p)
    for (int i = 0; i < n; ++i) m(i) += terminals[p * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)];
  m /= static_cast<double>(n_paths);
  est.terminal_mean = m;
  est.meanfield_plugin = problem.meanfield_cost(m);
  est.mean = est.running_terminal_mean + est.meanfield_plugin;
  const Vec grad = problem.meanfield_gradient(m);
  std::vector<double> influence(n_paths);
  for (std::size_t p = 0; p < n_paths; ++p) {
    double v = costs[p];
    for (int i = 0; i < n; ++i) v += grad(i) * terminals[p * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)];
    influence[p] = v;
  }
  est.total_std_error = mean_and_error(influence).std_error;
  return est;
}

/// J(u) over a stored batch simulated under (problem, policy).
inline CostEstimate evaluate_cost(const ControlProblem& problem, const ControlPolicy& policy,
                                  const PathBatch& paths) {
  if (paths.state_dim() != problem.state_dim)
    throw ArgumentError("path batch state dimension differs from the problem");
  check_policy_grid(policy, paths.times());
  const std::size_t n_paths = paths.n_paths();
  const auto n = static_cast<std::size_t>(problem.state_dim);
  std::vector<double> costs(n_paths);
  std::vector<double> terminals(n_paths * n);
  for (std::size_t p = 0; p < n_paths; ++p) {
    const auto states = paths.path_states(p);
    costs[p] = path_cost(problem, policy, paths.times(), states);
    for (std::size_t i = 0; i < n; ++i) terminals[p * n + i] = states[paths.n_steps() * n + i];
  }
  return summarize_cost(problem, costs, terminals);
}

/// Streaming J(u) from x0 over [0, T]; nothing but per-path totals is stored.
inline CostEstimate estimate_cost(const ControlProblem& problem, const ControlPolicy& policy,
                                  const McConfig& cfg) {
  const auto times = uniform_time_grid(0.0, problem.horizon, cfg.n_steps);
  check_policy_grid(policy, times);
  const auto n = static_cast<std::size_t>(problem.state_dim);
  std::vector<double> costs(cfg.n_paths);
  std::vector<double> terminals(cfg.n_paths * n);
  for_each_path(controlled_dynamics(problem, policy), times, problem.initial_state, cfg,
                [&](std::size_t p, std::span<const double> states, std::span<const double>) {
                  costs[p] = path_cost(problem, policy, times, states);
                  for (std::size_t i = 0; i < n; ++i) terminals[p * n + i] = states[cfg.n_steps * n + i];
                });
  return summarize_cost(problem, costs, terminals);
}

}  // namespace bsmp
