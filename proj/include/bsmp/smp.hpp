#pragma once

#include "bsmp/core.hpp"
#include "bsmp/cost.hpp"
#include "bsmp/costate_field.hpp"
#include "bsmp/feynman_kac.hpp"
#include "bsmp/problem.hpp"
#include "bsmp/sde.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace bsmp {

/// theta_x + sum_i G_i(E[X(T)]) g_x^i, kept together with its parts.
struct ExtendedCostate {
  Vec theta_x;
  Mat g_x;
  Vec G_grad_at_terminal_mean;
  Vec p_eff;

  Vec recompute_p_eff() const { return theta_x + g_x * G_grad_at_terminal_mean; }
};

inline ExtendedCostate make_costate(Vec theta_x, Mat g_x, Vec G_grad) {
  if (g_x.rows() != theta_x.size() || g_x.cols() != G_grad.size())
    throw ArgumentError("costate parts have inconsistent dimensions");
  ExtendedCostate c{std::move(theta_x), std::move(g_x), std::move(G_grad), {}};
  c.p_eff = c.recompute_p_eff();
  if (!c.p_eff.allFinite()) throw ArgumentError("costate is not finite");
  return c;
}

inline ExtendedCostate make_costate(const CostateSample& s, const Vec& G_grad) {
  return make_costate(s.theta_x, s.g_x, G_grad);
}

/// H = <b, p> + tr(sigma^T q) + f.
inline double hamiltonian(const ControlProblem& problem, double t, const Vec& x, const Vec& u, const Vec& p,
                          const Mat& q) {
  const Mat sigma = problem.diffusion(t, x);
  if (q.rows() != sigma.rows() || q.cols() != sigma.cols()) throw ArgumentError("q must be n x d");
  return problem.drift(t, x, u).dot(p) + sigma.cwiseProduct(q).sum() + problem.running_cost(t, x, u);
}

/// <b(t,x,u), p_eff> + f(t,x,u), the objective of the minimum condition.
inline double reduced_hamiltonian(const ControlProblem& problem, double t, const Vec& x, const Vec& u,
                                  const Vec& p_eff) {
  return problem.drift(t, x, u).dot(p_eff) + problem.running_cost(t, x, u);
}

struct HamiltonianMinimum {
  Vec u;
  double value = 0.0;
  /// "scan", "quadratic" or "multistart".
  std::string method;
};

namespace detail {

inline HamiltonianMinimum descend_from(const std::function<double(const Vec&)>& phi,
                                       const ControlDomain& dom, Vec u) {
  const auto& box = dom.as_box();
  const double scale = std::max(1.0, (box.upper - box.lower).maxCoeff());
  double alpha = scale;
  double value = phi(u);
  const auto m = u.size();
  for (int iter = 0; iter < 500 && alpha > 1e-13 * scale; ++iter) {
    Vec g(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      const double h = 1e-6 * scale;
      Vec up = u, dn = u;
      up(i) += h;
      dn(i) -= h;
      g(i) = (phi(up) - phi(dn)) / (2.0 * h);
    }
    const Vec trial = dom.project(Vec(u - alpha * g));
    const double step = (trial - u).norm();
    if (step < 1e-14 * scale) break;
    const double tv = phi(trial);
    if (tv < value - 1e-4 * g.dot(u - trial)) {
      u = trial;
      value = tv;
      alpha *= 1.5;
    } else {
      alpha *= 0.5;
    }
  }
  return {u, value, "multistart"};
}

/// Separable quadratic model of phi on the box, if phi is one.
inline std::optional<HamiltonianMinimum> quadratic_fast_path(const std::function<double(const Vec&)>& phi,
                                                             const ControlDomain::Box& box) {
  const auto m = box.lower.size();
  const Vec c = (box.lower + box.upper) / 2.0;
  Vec r = (box.upper - box.lower) / 2.0;
  for (Eigen::Index i = 0; i < m; ++i)
    if (r(i) <= 0.0) r(i) = 0.5;
  const double f0 = phi(c);
  Vec g(m);
  Mat hess(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double h = r(i) / 2.0;
    Vec up = c, dn = c;
    up(i) += h;
    dn(i) -= h;
    const double fu = phi(up), fd = phi(dn);
    g(i) = (fu - fd) / (2.0 * h);
    hess(i, i) = (fu - 2.0 * f0 + fd) / (h * h);
  }
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = i + 1; j < m; ++j) {
      const double hi = r(i) / 2.0, hj = r(j) / 2.0;
      auto at = [&](double si, double sj) {
        Vec u = c;
        u(i) += si * hi;
        u(j) += sj * hj;
        return phi(u);
      };
      hess(i, j) = hess(j, i) = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4.0 * hi * hj);
    }
  auto model = [&](const Vec& u) {
    const Vec d = u - c;
    return f0 + g.dot(d) + 0.5 * d.dot(hess * d);
  };
  // Validate on the corners and a few off-axis interior points.
  const double mag = std::max({1.0, std::abs(f0), g.cwiseAbs().maxCoeff() * r.maxCoeff(),
                               hess.cwiseAbs().maxCoeff() * r.maxCoeff() * r.maxCoeff()});
  for (int k = 0; k < (1 << m) + 3; ++k) {
    Vec u(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      const double s = k < (1 << m) ? (((k >> i) & 1) ? 1.0 : -1.0)
                                    : std::sin(1.7 * static_cast<double>(k + 1) * static_cast<double>(i + 1));
      u(i) = c(i) + s * r(i) * (k < (1 << m) ? 1.0 : 0.83);
    }
    u = u.cwiseMax(box.lower).cwiseMin(box.upper);
    if (std::abs(phi(u) - model(u)) > 1e-9 * mag) return std::nullopt;
  }
  const double diag = hess.diagonal().cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j)
      if (i != j && std::abs(hess(i, j)) > 1e-10 * std::max(diag, 1.0)) return std::nullopt;
  // Separable: minimize each coordinate of g_i d + 1/2 H_ii d^2 on its interval.
  Vec u(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double lo = box.lower(i), hi = box.upper(i);
    const double hii = std::abs(hess(i, i)) <= 1e-12 * std::max(mag, 1.0) ? 0.0 : hess(i, i);
    auto coord = [&](double v) {
      const double d = v - c(i);
      return g(i) * d + 0.5 * hii * d * d;
    };
    if (hii > 0.0) {
      u(i) = std::clamp(c(i) - g(i) / hii, lo, hi);
    } else {
      u(i) = coord(hi) < coord(lo) ? hi : lo;
    }
  }
  return HamiltonianMinimum{u, phi(u), "quadratic"};
}

}  // namespace detail

/// argmin over U of <b(t,x,u), p_eff> + f(t,x,u).
inline HamiltonianMinimum minimize_extended_hamiltonian(const ControlProblem& problem, double t, const Vec& x,
                                                        const ExtendedCostate& costate) {
  if (!costate.p_eff.allFinite()) throw ArgumentError("costate is not finite");
  const Vec& p = costate.p_eff;
  const std::function<double(const Vec&)> phi = [&](const Vec& u) {
    return reduced_hamiltonian(problem, t, x, u, p);
  };
  const auto& dom = problem.control_domain;
  if (!dom.is_box()) {
    const auto& pts = dom.as_finite_set().points;
    HamiltonianMinimum best{pts.front(), phi(pts.front()), "scan"};
    for (std::size_t k = 1; k < pts.size(); ++k) {
      const double v = phi(pts[k]);
      if (v < best.value) best = {pts[k], v, "scan"};
    }
    return best;
  }
  const auto& box = dom.as_box();
  if (auto fast = detail::quadratic_fast_path(phi, box)) return *fast;
  const auto m = box.lower.size();
  std::vector<Vec> starts;
  starts.push_back((box.lower + box.upper) / 2.0);
  for (int k = 0; k < (1 << m); ++k) {
    Vec s(m);
    for (Eigen::Index i = 0; i < m; ++i) s(i) = ((k >> i) & 1) ? box.upper(i) : box.lower(i);
    starts.push_back(s);
  }
  HamiltonianMinimum best;
  best.value = std::numeric_limits<double>::infinity();
  for (const auto& s : starts) {
    auto cand = detail::descend_from(phi, dom, s);
    if (cand.value < best.value) best = std::move(cand);
  }
  return best;
}

/// <b(u) - b(u_bar), p_eff> + f(u) - f(u_bar).
inline double variational_residual(const ControlProblem& problem, double t, const Vec& x, const Vec& u,
                                   const Vec& u_bar, const ExtendedCostate& costate) {
  return (problem.drift(t, x, u) - problem.drift(t, x, u_bar)).dot(costate.p_eff) +
         problem.running_cost(t, x, u) - problem.running_cost(t, x, u_bar);
}

/// Needle variation of `base`: v on [tau, tau + epsilon), base elsewhere.
/// Window ends are compared with a 1e-12 relative slack so grid times that
/// round onto them (0.2 + 0.1 vs 0.3) fall on the intended side.
struct SpikePerturbation {
  double tau = 0.0;
  double epsilon = 0.0;
  Vec spike_value;
  ControlPolicy base;

  ControlPolicy policy() const {
    auto bps = std::vector<double>(base.breakpoints().begin(), base.breakpoints().end());
    bps.push_back(tau);
    bps.push_back(tau + epsilon);
    std::sort(bps.begin(), bps.end());
    bps.erase(std::unique(bps.begin(), bps.end()), bps.end());
    return ControlPolicy::feedback(
        [b = base, lo = tau - slack(), hi = tau + epsilon - slack(), v = spike_value](double t, const Vec& x) {
          return (t >= lo && t < hi) ? v : b(t, x);
        },
        std::move(bps));
  }

  double slack() const { return 1e-12 * std::max(1.0, tau + epsilon); }
};

/// Validated spike. epsilon may reach T - tau so the window can end at T.
inline SpikePerturbation make_spike(const ControlProblem& problem, const ControlPolicy& base, double tau,
                                    double epsilon, const Vec& v) {
  const double T = problem.horizon;
  if (!(tau >= 0.0) || !(tau < T)) throw ArgumentError("spike tau must lie in [0, T)");
  if (!(epsilon > 0.0) || tau + epsilon > T * (1.0 + 1e-12))
    throw ArgumentError("spike epsilon must lie in (0, T - tau]");
  if (!problem.control_domain.contains(v, 1e-12)) throw ArgumentError("spike value is outside the control domain");
  return SpikePerturbation{tau, epsilon, v, base};
}

inline ControlPolicy spike_perturb(const ControlProblem& problem, const ControlPolicy& base, double tau,
                                   double epsilon, const Vec& v) {
  return make_spike(problem, base, tau, epsilon, v).policy();
}

struct SpikeCheckResult {
  double lhs = 0.0;
  double rhs = 0.0;
  double lhs_std_error = 0.0;
  double rhs_std_error = 0.0;
  /// Standard error of lhs - rhs: paired over common paths, plus field error.
  double combined_std_error = 0.0;
  double field_std_error = 0.0;
  bool pass = false;
};

/// J(u^eps) - J(u_bar) against the window integral of the drift and cost
/// differences weighted by theta_x and G_i(E[g]) g_x^i along X^eps. Both
/// costs run on the same increments; the integral uses the trapezoid rule on
/// the simulation nodes of [tau, tau + eps].
inline SpikeCheckResult spike_difference_check(const ControlProblem& problem, const SpikePerturbation& spike,
                                               CostateField& field, const McConfig& cfg) {
  check_config(cfg);
  const int n = problem.state_dim;
  const auto nn = static_cast<std::size_t>(n);
  const ControlPolicy spiked = spike.policy();
  const auto times = uniform_time_grid(0.0, problem.horizon, cfg.n_steps);
  check_policy_grid(spiked, times);
  check_policy_grid(spike.base, times);
  const double dt = problem.horizon / static_cast<double>(cfg.n_steps);
  const auto k0 = static_cast<std::size_t>(std::llround(spike.tau / dt));
  const auto k1 = static_cast<std::size_t>(std::llround((spike.tau + spike.epsilon) / dt));
  const std::size_t window = k1 - k0 + 1;

  const std::size_t np = cfg.n_paths;
  std::vector<double> cost_bar(np), cost_eps(np), term_bar(np * nn), term_eps(np * nn);
  std::vector<Vec> window_states(np * window);
  for_each_path(controlled_dynamics(problem, spike.base), times, problem.initial_state, cfg,
                [&](std::size_t p, std::span<const double> states, std::span<const double>) {
                  cost_bar[p] = path_cost(problem, spike.base, times, states);
                  for (std::size_t i = 0; i < nn; ++i) term_bar[p * nn + i] = states[cfg.n_steps * nn + i];
                });
  for_each_path(controlled_dynamics(problem, spiked), times, problem.initial_state, cfg,
                [&](std::size_t p, std::span<const double> states, std::span<const double>) {
                  cost_eps[p] = path_cost(problem, spiked, times, states);
                  for (std::size_t i = 0; i < nn; ++i) term_eps[p * nn + i] = states[cfg.n_steps * nn + i];
                  for (std::size_t k = 0; k < window; ++k) {
                    Vec x(n);
                    for (std::size_t i = 0; i < nn; ++i) x(static_cast<Eigen::Index>(i)) = states[(k0 + k) * nn + i];
                    window_states[p * window + k] = x;
                  }
                });

  auto terminal_mean = [&](const std::vector<double>& term) {
    Vec m = Vec::Zero(n);
    for (std::size_t p = 0; p < np; ++p)
      for (std::size_t i = 0; i < nn; ++i) m(static_cast<Eigen::Index>(i)) += term[p * nn + i];
    return Vec(m / static_cast<double>(np));
  };
  const Vec m_bar = terminal_mean(term_bar);
  const Vec m_eps = terminal_mean(term_eps);
  const Vec grad_bar = problem.meanfield_gradient(m_bar);
  const Vec grad_eps = problem.meanfield_gradient(m_eps);

  SpikeCheckResult res;
  std::vector<double> psi_l(np), psi_r(np, 0.0);
  double cost_diff = 0.0;
  for (std::size_t p = 0; p < np; ++p) {
    double v = cost_eps[p] - cost_bar[p];
    cost_diff += v;
    for (std::size_t i = 0; i < nn; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      v += grad_eps(ii) * term_eps[p * nn + i] - grad_bar(ii) * term_bar[p * nn + i];
    }
    psi_l[p] = v;
  }
  res.lhs = cost_diff / static_cast<double>(np) + problem.meanfield_cost(m_eps) - problem.meanfield_cost(m_bar);
  res.lhs_std_error = mean_and_error(psi_l).std_error;

  double field_se = 0.0;
  std::vector<Vec> node_states(np);
  std::vector<CostateSample> samples(np);
  std::vector<Vec> db(np);
  for (std::size_t k = 0; k < window; ++k) {
    const double t = times[k0 + k];
    const double w = (window == 1) ? 0.0 : ((k == 0 || k + 1 == window) ? 0.5 * dt : dt);
    for (std::size_t p = 0; p < np; ++p) node_states[p] = window_states[p * window + k];
    field.prepare(t, node_states);
    Vec g_mean = Vec::Zero(n);
    for (std::size_t p = 0; p < np; ++p) {
      samples[p] = field.at(t, node_states[p]);
      g_mean += samples[p].g_value;
    }
    g_mean /= static_cast<double>(np);
    const Vec G_grad = problem.meanfield_gradient(g_mean);
    const Mat G_hess = problem.meanfield_hessian(g_mean);
    // Mean of <db, g_x^i>, the sensitivity of the integrand to E[g].
    Vec sens = Vec::Zero(n);
    double node_field_se = 0.0;
    std::vector<double> integrand(np);
    for (std::size_t p = 0; p < np; ++p) {
      const Vec& x = node_states[p];
      const Vec ub = spike.base(t, x);
      db[p] = problem.drift(t, x, spike.spike_value) - problem.drift(t, x, ub);
      const auto& s = samples[p];
      const Vec p_eff = s.theta_x + s.g_x * G_grad;
      integrand[p] = db[p].dot(p_eff) + problem.running_cost(t, x, spike.spike_value) - problem.running_cost(t, x, ub);
      sens += s.g_x.transpose() * db[p];
      node_field_se += db[p].cwiseAbs().dot(s.theta_x_se + s.g_x_se * G_grad.cwiseAbs());
    }
    sens /= static_cast<double>(np);
    const Vec c = G_hess * sens;
    for (std::size_t p = 0; p < np; ++p) {
      res.rhs += w * integrand[p] / static_cast<double>(np);
      psi_r[p] += w * (integrand[p] + c.dot(samples[p].g_value));
    }
    field_se += w * node_field_se / static_cast<double>(np);
  }
  res.rhs_std_error = mean_and_error(psi_r).std_error;
  std::vector<double> diff(np);
  for (std::size_t p = 0; p < np; ++p) diff[p] = psi_l[p] - psi_r[p];
  res.field_std_error = field_se;
  res.combined_std_error = std::hypot(mean_and_error(diff).std_error, field_se);
  res.pass = std::abs(res.lhs - res.rhs) <= 3.0 * res.combined_std_error;
  return res;
}

/// J(u_bar) = theta(0, x0) + G(g(0, x0)).
inline double objective_via_bspde(double theta_at_origin, const Vec& g_at_origin,
                                  const ControlProblem::ScalarFieldFn& G) {
  return theta_at_origin + G(g_at_origin);
}

/// p(t_k) = theta_x(t_k) + g_x(t_k) G_grad along one trajectory.
inline std::vector<Vec> assemble_adjoint(std::span<const Vec> theta_x, std::span<const Mat> g_x, const Vec& G_grad,
                                         std::span<const double> times) {
  if (theta_x.size() != times.size() || g_x.size() != times.size())
    throw GridMismatchError("adjoint inputs must be sampled on the same time grid");
  std::vector<Vec> out;
  out.reserve(times.size());
  for (std::size_t k = 0; k < times.size(); ++k) out.push_back(theta_x[k] + g_x[k] * G_grad);
  return out;
}

/// Adjoint along a stored trajectory. Interior times read `field`; at T the
/// exact terminal gradients theta_x = h_x and g_x = I are used.
inline std::vector<Vec> adjoint_along_trajectory(const ControlProblem& problem, CostateField& field,
                                                 std::span<const double> times, std::span<const Vec> states,
                                                 const Vec& terminal_mean) {
  if (states.size() != times.size()) throw GridMismatchError("trajectory and time grid differ in length");
  const int n = problem.state_dim;
  std::vector<Vec> th;
  std::vector<Mat> gx;
  for (std::size_t k = 0; k < times.size(); ++k) {
    if (times[k] >= problem.horizon) {
      th.push_back(problem.terminal_grad(states[k]));
      gx.push_back(Mat::Identity(n, n));
    } else {
      field.prepare(times[k], states.subspan(k, 1));
      const auto s = field.at(times[k], states[k]);
      th.push_back(s.theta_x);
      gx.push_back(s.g_x);
    }
  }
  return assemble_adjoint(th, gx, problem.meanfield_gradient(terminal_mean), times);
}

// ---------------------------------------------------------------------------
// Reports over (t, x, u) sample grids.

struct TrajectorySample {
  std::vector<double> times;
  /// states[j][s] for sample path s at times[j]; ranges over all paths.
  std::vector<std::vector<Vec>> states;
  std::vector<Vec> lower;
  std::vector<Vec> upper;
  Vec terminal_mean;
  CostEstimate cost;
};

/// One streamed batch under `policy`: cost estimate, terminal mean and the
/// states of the first `n_sample_states` paths at `n_times` equispaced nodes.
inline TrajectorySample sample_trajectories(const ControlProblem& problem, const ControlPolicy& policy,
                                            const McConfig& cfg, std::size_t n_times, std::size_t n_sample_states) {
  check_config(cfg);
  if (n_times < 2) throw ArgumentError("need at least two report times");
  const auto grid = uniform_time_grid(0.0, problem.horizon, cfg.n_steps);
  check_policy_grid(policy, grid);
  const auto nn = static_cast<std::size_t>(problem.state_dim);
  std::vector<std::size_t> nodes(n_times);
  for (std::size_t j = 0; j < n_times; ++j)
    nodes[j] = static_cast<std::size_t>(std::llround(static_cast<double>(j) * static_cast<double>(cfg.n_steps) /
                                                     static_cast<double>(n_times - 1)));
  const std::size_t keep = std::min(n_sample_states, cfg.n_paths);
  std::vector<double> costs(cfg.n_paths), terminals(cfg.n_paths * nn);
  std::vector<double> node_states(cfg.n_paths * n_times * nn);
  for_each_path(controlled_dynamics(problem, policy), grid, problem.initial_state, cfg,
                [&](std::size_t p, std::span<const double> states, std::span<const double>) {
                  costs[p] = path_cost(problem, policy, grid, states);
                  for (std::size_t i = 0; i < nn; ++i) terminals[p * nn + i] = states[cfg.n_steps * nn + i];
                  for (std::size_t j = 0; j < n_times; ++j)
                    for (std::size_t i = 0; i < nn; ++i)
                      node_states[(p * n_times + j) * nn + i] = states[nodes[j] * nn + i];
                });
  TrajectorySample out;
  out.cost = summarize_cost(problem, costs, terminals);
  out.terminal_mean = out.cost.terminal_mean;
  for (std::size_t j = 0; j < n_times; ++j) {
    out.times.push_back(grid[nodes[j]]);
    Vec lo = Vec::Constant(problem.state_dim, std::numeric_limits<double>::infinity());
    Vec hi = -lo;
    std::vector<Vec> kept;
    for (std::size_t p = 0; p < cfg.n_paths; ++p) {
      Vec x(problem.state_dim);
      for (std::size_t i = 0; i < nn; ++i) x(static_cast<Eigen::Index>(i)) = node_states[(p * n_times + j) * nn + i];
      lo = lo.cwiseMin(x);
      hi = hi.cwiseMax(x);
      if (p < keep) kept.push_back(x);
    }
    out.states.push_back(std::move(kept));
    out.lower.push_back(lo);
    out.upper.push_back(hi);
  }
  return out;
}

/// Tensor grid of the box with n_per_dim points per axis (capped near 1e5
/// points), or every point of a finite set.
inline std::vector<Vec> control_grid(const ControlDomain& dom, std::size_t n_per_dim) {
  if (!dom.is_box()) return dom.as_finite_set().points;
  const auto& box = dom.as_box();
  const int m = static_cast<int>(box.lower.size());
  std::size_t per = std::max<std::size_t>(n_per_dim, 2);
  while (m > 1 && std::pow(static_cast<double>(per), m) > 1e5) per /= 2;
  std::size_t total = 1;
  for (int i = 0; i < m; ++i) total *= per;
  std::vector<Vec> out;
  out.reserve(total);
  for (std::size_t flat = 0; flat < total; ++flat) {
    Vec u(m);
    std::size_t rem = flat;
    for (int i = 0; i < m; ++i) {
      const auto k = rem % per;
      rem /= per;
      u(i) = box.lower(i) + (box.upper(i) - box.lower(i)) * static_cast<double>(k) / static_cast<double>(per - 1);
    }
    out.push_back(u);
  }
  return out;
}

struct SmpOptions {
  std::size_t n_times = 21;
  std::size_t n_controls = 41;
  std::size_t n_sample_states = 5;
  double tolerance = 1e-5;
  McConfig cfg{100000, 100, 0, 1};
  /// Replaces the batch estimate of E[X(T)] inside G_x when set.
  std::optional<Vec> terminal_mean;
  FieldOptions field;
};

struct SmpReport {
  std::vector<double> times;
  std::vector<Vec> controls;
  /// residuals[j][l]: min over sample states at times[j] of the residual at controls[l].
  std::vector<std::vector<double>> residuals;
  /// H(u_bar) - min_U H per time, max over sample states.
  std::vector<double> min_gaps;
  std::vector<Vec> minimizers;
  std::vector<Vec> candidate_controls;
  double min_residual = 0.0;
  double max_gap = 0.0;
  Vec terminal_mean;
  Vec G_grad;
  double objective_via_formula = 0.0;
  double objective_formula_std_error = 0.0;
  CostEstimate objective_via_mc;
  double tolerance = 0.0;
  bool pass = false;
  std::uint64_t seed = 0;
  std::size_t n_paths = 0;
  std::size_t n_steps = 0;
};

inline SmpReport build_smp_report(const ControlProblem& problem, const ControlPolicy& policy,
                                  const SmpOptions& opt, CostateField& field) {
  validate(problem);
  SmpReport rep;
  rep.tolerance = opt.tolerance;
  rep.seed = opt.cfg.seed;
  rep.n_paths = opt.cfg.n_paths;
  rep.n_steps = opt.cfg.n_steps;
  const auto traj = sample_trajectories(problem, policy, opt.cfg, opt.n_times, opt.n_sample_states);
  rep.objective_via_mc = traj.cost;
  rep.terminal_mean = opt.terminal_mean ? *opt.terminal_mean : traj.terminal_mean;
  if (rep.terminal_mean.size() != problem.state_dim) throw ArgumentError("terminal mean override has wrong length");
  rep.G_grad = problem.meanfield_gradient(rep.terminal_mean);
  rep.times = traj.times;
  rep.controls = control_grid(problem.control_domain, opt.n_controls);
  rep.min_residual = std::numeric_limits<double>::infinity();
  rep.max_gap = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < rep.times.size(); ++j) {
    const double t = rep.times[j];
    const auto& xs = traj.states[j];
    if (t < problem.horizon) field.prepare(t, xs);
    std::vector<double> row(rep.controls.size(), std::numeric_limits<double>::infinity());
    double gap = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < xs.size(); ++s) {
      const Vec& x = xs[s];
      CostateSample cs = CostateSample::zero(problem.state_dim);
      if (t >= problem.horizon) {
        cs.theta_x = problem.terminal_grad(x);
        cs.g_x = Mat::Identity(problem.state_dim, problem.state_dim);
      } else {
        cs = field.at(t, x);
      }
      const auto costate = make_costate(cs, rep.G_grad);
      const Vec ub = policy(t, x);
      for (std::size_t l = 0; l < rep.controls.size(); ++l)
        row[l] = std::min(row[l], variational_residual(problem, t, x, rep.controls[l], ub, costate));
      const auto best = minimize_extended_hamiltonian(problem, t, x, costate);
      gap = std::max(gap, reduced_hamiltonian(problem, t, x, ub, costate.p_eff) - best.value);
      if (s == 0) {
        rep.minimizers.push_back(best.u);
        rep.candidate_controls.push_back(ub);
      }
    }
    for (double r : row) rep.min_residual = std::min(rep.min_residual, r);
    rep.max_gap = std::max(rep.max_gap, gap);
    rep.residuals.push_back(std::move(row));
    rep.min_gaps.push_back(gap);
  }
  // Objective through the backward fields at the origin.
  const auto theta0 = fk_value(theta_spec(problem, policy), 0.0, problem.initial_state, opt.cfg);
  Vec g0 = problem.initial_state;
  double var = theta0.std_error * theta0.std_error;
  const Vec G_at = problem.meanfield_gradient(problem.initial_state);
  for (int i = 0; i < problem.state_dim; ++i) {
    McConfig c = opt.cfg;
    c.seed = rng::derive_seed(opt.cfg.seed, static_cast<std::uint64_t>(i) + 1);
    const auto gi = fk_value(g_translated_spec(problem, policy, i), 0.0, problem.initial_state, c);
    g0(i) += gi.value;
    var += std::pow(G_at(i) * gi.std_error, 2);
  }
  rep.objective_via_formula = objective_via_bspde(theta0.value, g0, problem.meanfield_cost);
  rep.objective_formula_std_error = std::sqrt(var);
  rep.pass = rep.min_residual >= -opt.tolerance && rep.max_gap <= opt.tolerance;
  return rep;
}

inline SmpReport build_smp_report(const ControlProblem& problem, const ControlPolicy& policy,
                                  const SmpOptions& opt = {}) {
  MonteCarloCostateField field(problem, policy, opt.field);
  return build_smp_report(problem, policy, opt, field);
}

struct ConvexityViolation {
  /// "first_order", "hamiltonian", "terminal_cost" or "meanfield_cost".
  std::string kind;
  double t = 0.0;
  double excess = 0.0;
};

struct SufficiencyOptions {
  std::size_t n_times = 11;
  std::size_t n_controls = 41;
  std::size_t n_sample_states = 5;
  std::size_t n_midpoint = 200;
  double first_order_tolerance = -1e-8;
  McConfig cfg{20000, 100, 0, 1};
  std::optional<Vec> terminal_mean;
  std::uint64_t seed = 0;
};

struct SufficiencyReport {
  bool first_order_ok = true;
  bool hamiltonian_convex = true;
  bool terminal_cost_convex = true;
  bool meanfield_cost_convex = true;
  bool sufficient = false;
  /// Number of report times with at least one first-order violation.
  std::size_t first_order_violation_times = 0;
  std::vector<ConvexityViolation> violations;
};

/// Samples the first-order inequality <u - u_bar, grad_u H> >= 0 and midpoint
/// convexity of H(t,.,.,p_eff,0), h and G.
inline SufficiencyReport sufficient_check(const ControlProblem& problem, const ControlPolicy& policy,
                                          CostateField& field, const SufficiencyOptions& opt = {}) {
  if (!problem.control_domain.is_box()) throw ArgumentError("sufficiency check requires convex domain");
  validate(problem);
  const auto& box = problem.control_domain.as_box();
  const int n = problem.state_dim;
  const int m = static_cast<int>(box.lower.size());
  const auto traj = sample_trajectories(problem, policy, opt.cfg, opt.n_times, opt.n_sample_states);
  const Vec tm = opt.terminal_mean ? *opt.terminal_mean : traj.terminal_mean;
  const Vec G_grad = problem.meanfield_gradient(tm);
  const auto controls = control_grid(problem.control_domain, opt.n_controls);
  std::mt19937_64 gen(opt.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SufficiencyReport rep;
  auto midpoint_excess = [](double fa, double fb, double fmid) { return fmid - 0.5 * (fa + fb); };
  const double convex_tol = 1e-9;

  for (std::size_t j = 0; j < traj.times.size(); ++j) {
    const double t = traj.times[j];
    if (t < problem.horizon) field.prepare(t, traj.states[j]);
    bool violated_here = false;
    double worst = 0.0;
    Vec p_first = Vec::Zero(n);
    for (std::size_t s = 0; s < traj.states[j].size(); ++s) {
      const Vec& x = traj.states[j][s];
      CostateSample cs = CostateSample::zero(n);
      if (t >= problem.horizon) {
        cs.theta_x = problem.terminal_grad(x);
        cs.g_x = Mat::Identity(n, n);
      } else {
        cs = field.at(t, x);
      }
      const Vec p = make_costate(cs, G_grad).p_eff;
      if (s == 0) p_first = p;
      const Vec ub = policy(t, x);
      Vec grad(m);
      for (int i = 0; i < m; ++i) {
        const double h = 1e-6 * std::max(1.0, box.upper(i) - box.lower(i));
        Vec up = ub, dn = ub;
        up(i) += h;
        dn(i) -= h;
        grad(i) = (reduced_hamiltonian(problem, t, x, up, p) - reduced_hamiltonian(problem, t, x, dn, p)) / (2.0 * h);
      }
      for (const auto& u : controls) {
        const double ip = (u - ub).dot(grad);
        if (ip < opt.first_order_tolerance) {
          violated_here = true;
          worst = std::min(worst, ip);
        }
      }
    }
    if (violated_here) {
      ++rep.first_order_violation_times;
      rep.violations.push_back({"first_order", t, worst});
    }
    // Midpoint convexity of (x, u) -> H(t, x, u, p, 0) with p frozen.
    const Vec& lo = traj.lower[j];
    const Vec& hi = traj.upper[j];
    double h_worst = 0.0;
    for (std::size_t k = 0; k < opt.n_midpoint; ++k) {
      Vec xa(n), xb(n), ua(m), ub(m);
      for (int i = 0; i < n; ++i) {
        const double span = std::max(hi(i) - lo(i), 1e-3);
        xa(i) = lo(i) + span * unit(gen);
        xb(i) = lo(i) + span * unit(gen);
      }
      for (int i = 0; i < m; ++i) {
        ua(i) = box.lower(i) + (box.upper(i) - box.lower(i)) * unit(gen);
        ub(i) = box.lower(i) + (box.upper(i) - box.lower(i)) * unit(gen);
      }
      const Vec xm = (xa + xb) / 2.0, um = (ua + ub) / 2.0;
      const double e = midpoint_excess(reduced_hamiltonian(problem, t, xa, ua, p_first),
                                       reduced_hamiltonian(problem, t, xb, ub, p_first),
                                       reduced_hamiltonian(problem, t, xm, um, p_first));
      h_worst = std::max(h_worst, e);
    }
    if (h_worst > convex_tol) {
      rep.hamiltonian_convex = false;
      rep.violations.push_back({"hamiltonian", t, h_worst});
    }
  }
  rep.first_order_ok = rep.first_order_violation_times == 0;

  const Vec& lo = traj.lower.back();
  const Vec& hi = traj.upper.back();
  double h_worst = 0.0, g_worst = 0.0;
  for (std::size_t k = 0; k < opt.n_midpoint; ++k) {
    Vec xa(n), xb(n), ma(n), mb(n);
    for (int i = 0; i < n; ++i) {
      const double span = std::max(hi(i) - lo(i), 1e-3);
      xa(i) = lo(i) + span * unit(gen);
      xb(i) = lo(i) + span * unit(gen);
      ma(i) = tm(i) + 2.0 * (2.0 * unit(gen) - 1.0);
      mb(i) = tm(i) + 2.0 * (2.0 * unit(gen) - 1.0);
    }
    h_worst = std::max(h_worst, midpoint_excess(problem.terminal_cost(xa), problem.terminal_cost(xb),
                                                problem.terminal_cost(Vec((xa + xb) / 2.0))));
    g_worst = std::max(g_worst, midpoint_excess(problem.meanfield_cost(ma), problem.meanfield_cost(mb),
                                                problem.meanfield_cost(Vec((ma + mb) / 2.0))));
  }
  if (h_worst > convex_tol) {
    rep.terminal_cost_convex = false;
    rep.violations.push_back({"terminal_cost", problem.horizon, h_worst});
  }
  if (g_worst > convex_tol) {
    rep.meanfield_cost_convex = false;
    rep.violations.push_back({"meanfield_cost", problem.horizon, g_worst});
  }
  rep.sufficient = rep.first_order_ok && rep.hamiltonian_convex && rep.terminal_cost_convex && rep.meanfield_cost_convex;
  return rep;
}

}  // namespace bsmp
