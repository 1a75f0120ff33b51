#pragma once

#include "bsmp/core.hpp"
#include "bsmp/problem.hpp"
#include "bsmp/rng.hpp"
#include "bsmp/sde.hpp"

#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

namespace bsmp {

/// Coefficients of a linear backward field p(t,x) with terminal value h and
/// source l, evaluated through p(t,x) = E[int_t^T l(s, X(s)) ds + h(X(T))]
/// where X starts at x at time t.
struct LinearBspdeSpec {
  int state_dim = 1;
  int noise_dim = 1;
  double horizon = 1.0;
  std::function<Vec(double, const Vec&)> drift;
  std::function<Mat(double, const Vec&)> diffusion;
  std::function<double(double, const Vec&)> source;
  std::function<double(const Vec&)> terminal;

  Dynamics dynamics() const { return Dynamics{state_dim, noise_dim, drift, diffusion}; }
};

/// Value field of the cost-to-go under `policy`: source f(t,x,u(t,x)), terminal h.
inline LinearBspdeSpec theta_spec(const ControlProblem& problem, const ControlPolicy& policy) {
  LinearBspdeSpec s;
  s.state_dim = problem.state_dim;
  s.noise_dim = problem.noise_dim;
  s.horizon = problem.horizon;
  s.drift = [drift = problem.drift, policy](double t, const Vec& x) { return drift(t, x, policy(t, x)); };
  s.diffusion = problem.diffusion;
  s.source = [f = problem.running_cost, policy](double t, const Vec& x) { return f(t, x, policy(t, x)); };
  s.terminal = problem.terminal_cost;
  return s;
}

/// Conditional terminal-mean field, component i: source 0, terminal x_i.
inline LinearBspdeSpec g_spec(const ControlProblem& problem, const ControlPolicy& policy, int i) {
  LinearBspdeSpec s = theta_spec(problem, policy);
  s.source = [](double, const Vec&) { return 0.0; };
  s.terminal = [i](const Vec& x) { return x(i); };
  return s;
}

/// g^i(t,x) - x_i: source b^i(t,x,u(t,x)), terminal 0. Same field as g_spec
/// shifted by x_i, usually with far smaller Monte Carlo variance.
inline LinearBspdeSpec g_translated_spec(const ControlProblem& problem, const ControlPolicy& policy,
                                         int i) {
  LinearBspdeSpec s = theta_spec(problem, policy);
  s.source = [drift = problem.drift, policy, i](double t, const Vec& x) {
    return drift(t, x, policy(t, x))(i);
  };
  s.terminal = [](const Vec&) { return 0.0; };
  return s;
}

struct FieldEstimate {
  double value = 0.0;
  double std_error = 0.0;
  std::optional<Vec> gradient;
  std::optional<Vec> gradient_std_error;
  std::size_t n_paths_used = 0;
};

/// int_t^T l ds (left endpoint) + h(X(T)) along one stored path.
inline double path_functional(const LinearBspdeSpec& spec, std::span<const double> times,
                              std::span<const double> states) {
  const int n = spec.state_dim;
  const std::size_t n_steps = times.size() - 1;
  Vec x(n);
  double acc = 0.0;
  for (std::size_t k = 0; k < n_steps; ++k) {
    for (int i = 0; i < n; ++i) x(i) = states[k * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)];
    acc += spec.source(times[k], x) * (times[k + 1] - times[k]);
  }
  for (int i = 0; i < n; ++i) x(i) = states[n_steps * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)];
  return acc + spec.terminal(x);
}

namespace detail {

inline void check_fk_args(const LinearBspdeSpec& spec, double t, const Vec& x) {
  if (!(t >= 0.0) || !(t <= spec.horizon)) throw ArgumentError("fk evaluation time must lie in [0, T]");
  if (x.size() != spec.state_dim) throw ArgumentError("fk evaluation point has wrong length");
}

inline double default_fd_step(const Vec& x) { return 1e-3 * std::max(1.0, x.norm()); }

}  // namespace detail

/// p(t, x) by Monte Carlo; exact h(x) with zero error at t = T.
inline FieldEstimate fk_value(const LinearBspdeSpec& spec, double t, const Vec& x, const McConfig& cfg) {
  detail::check_fk_args(spec, t, x);
  check_config(cfg);
  FieldEstimate est;
  if (t >= spec.horizon) {
    est.value = spec.terminal(x);
    return est;
  }
  const auto times = uniform_time_grid(t, spec.horizon, cfg.n_steps);
  std::vector<double> samples(cfg.n_paths);
  for_each_path(spec.dynamics(), times, x, cfg,
                [&](std::size_t p, std::span<const double> states, std::span<const double>) {
                  samples[p] = path_functional(spec, times, states);
                });
  const auto me = mean_and_error(samples);
  est.value = me.mean;
  est.std_error = me.std_error;
  est.n_paths_used = cfg.n_paths;
  return est;
}

/// p(t,x) and p_x(t,x) by central differences with common random numbers:
/// the 2n+1 start points of a path share one increment array.
inline FieldEstimate fk_gradient(const LinearBspdeSpec& spec, double t, const Vec& x,
                                 const McConfig& cfg, double fd_step) {
  detail::check_fk_args(spec, t, x);
  check_config(cfg);
  if (!(fd_step > 0.0)) throw ArgumentError("fd_step must be positive");
  const int n = spec.state_dim;
  FieldEstimate est;
  if (t >= spec.horizon) {
    est.value = spec.terminal(x);
    Vec g(n);
    for (int i = 0; i < n; ++i) {
      Vec xp = x, xm = x;
      xp(i) += fd_step;
      xm(i) -= fd_step;
      g(i) = (spec.terminal(xp) - spec.terminal(xm)) / (2.0 * fd_step);
    }
    est.gradient = g;
    est.gradient_std_error = Vec(Vec::Zero(n));
    return est;
  }
  const auto times = uniform_time_grid(t, spec.horizon, cfg.n_steps);
  const std::size_t n_steps = cfg.n_steps;
  const auto d = static_cast<std::size_t>(spec.noise_dim);
  const double dt = (spec.horizon - t) / static_cast<double>(n_steps);
  const Dynamics dyn = spec.dynamics();
  std::vector<double> centre(cfg.n_paths);
  std::vector<std::vector<double>> diffs(static_cast<std::size_t>(n), std::vector<double>(cfg.n_paths));
  parallel_for(cfg.n_paths, cfg.workers, [&](std::size_t begin, std::size_t end) {
    std::vector<double> incs(n_steps * d);
    std::vector<double> states((n_steps + 1) * static_cast<std::size_t>(n));
    for (std::size_t p = begin; p < end; ++p) {
      path_increments(cfg.seed, p, n_steps, spec.noise_dim, dt, incs);
      euler_maruyama_path(dyn, times, x, incs, states, p);
      centre[p] = path_functional(spec, times, states);
      for (int i = 0; i < n; ++i) {
        Vec xs = x;
        xs(i) += fd_step;
        euler_maruyama_path(dyn, times, xs, incs, states, p);
        const double up = path_functional(spec, times, states);
        xs(i) = x(i) - fd_step;
        euler_maruyama_path(dyn, times, xs, incs, states, p);
        const double down = path_functional(spec, times, states);
        diffs[static_cast<std::size_t>(i)][p] = (up - down) / (2.0 * fd_step);
      }
    }
  });
  const auto me = mean_and_error(centre);
  est.value = me.mean;
  est.std_error = me.std_error;
  Vec g(n), gse(n);
  for (int i = 0; i < n; ++i) {
    const auto gi = mean_and_error(diffs[static_cast<std::size_t>(i)]);
    g(i) = gi.mean;
    gse(i) = gi.std_error;
  }
  est.gradient = g;
  est.gradient_std_error = gse;
  est.n_paths_used = cfg.n_paths;
  return est;
}

inline FieldEstimate fk_gradient(const LinearBspdeSpec& spec, double t, const Vec& x, const McConfig& cfg) {
  return fk_gradient(spec, t, x, cfg, detail::default_fd_step(x));
}

/// fk_value at every point; point i runs under seed derive_seed(cfg.seed, i).
inline std::vector<FieldEstimate> fk_field_on_grid(const LinearBspdeSpec& spec, double t,
                                                   std::span<const Vec> points, const McConfig& cfg,
                                                   bool with_gradient = false) {
  std::vector<FieldEstimate> out;
  out.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    McConfig point_cfg = cfg;
    point_cfg.seed = rng::derive_seed(cfg.seed, i);
    out.push_back(with_gradient ? fk_gradient(spec, t, points[i], point_cfg)
                                : fk_value(spec, t, points[i], point_cfg));
  }
  return out;
}

/// CSV columns: t,x0..,value,std_error[,grad0..,grad_se0..].
inline void write_field_csv(std::ostream& os, double t, std::span<const Vec> points,
                            std::span<const FieldEstimate> estimates) {
  if (points.empty()) return;
  const auto n = points.front().size();
  const bool grad = estimates.front().gradient.has_value();
  os << "t";
  for (Eigen::Index i = 0; i < n; ++i) os << ",x" << i;
  os << ",value,std_error";
  if (grad) {
    for (Eigen::Index i = 0; i < n; ++i) os << ",grad" << i;
    for (Eigen::Index i = 0; i < n; ++i) os << ",grad_se" << i;
  }
  os << '\n';
  os.precision(17);
  for (std::size_t k = 0; k < points.size(); ++k) {
    os << t;
    for (Eigen::Index i = 0; i < n; ++i) os << ',' << points[k](i);
    os << ',' << estimates[k].value << ',' << estimates[k].std_error;
    if (grad) {
      for (Eigen::Index i = 0; i < n; ++i) os << ',' << (*estimates[k].gradient)(i);
      for (Eigen::Index i = 0; i < n; ++i) os << ',' << (*estimates[k].gradient_std_error)(i);
    }
    os << '\n';
  }
}

}  // namespace bsmp
