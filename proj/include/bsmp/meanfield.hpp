#pragma once

#include "bsmp/core.hpp"
#include "bsmp/costate_field.hpp"
#include "bsmp/problem.hpp"
#include "bsmp/sde.hpp"
#include "bsmp/smp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace bsmp {

/// Costate used to turn a terminal mean m into a control u(m): the feedback
/// argmin of <b, theta_x + g_x G_x(m)> + f. Defaults to theta_x = 0, g_x = I.
using CostateModel = std::function<CostateSample(double, const Vec&)>;

struct MeanfieldOptions {
  McConfig cfg{100000, 100, 0, 1};
  std::optional<CostateModel> costate_model;
  /// Minimize once at (0, x0) and hold the control constant. Exact when b
  /// and f do not depend on (t, x) and the costate model is constant.
  bool constant_control = false;
};

/// The control policy u(m) induced by terminal mean m.
inline ControlPolicy control_for_terminal_mean(const ControlProblem& problem, const Vec& m,
                                               const MeanfieldOptions& opt = {}) {
  const Vec G_grad = problem.meanfield_gradient(m);
  const int n = problem.state_dim;
  CostateModel model = opt.costate_model ? *opt.costate_model : CostateModel([n](double, const Vec&) {
    auto s = CostateSample::zero(n);
    s.g_x = Mat::Identity(n, n);
    return s;
  });
  if (opt.constant_control) {
    const auto c = make_costate(model(0.0, problem.initial_state), G_grad);
    return ControlPolicy::constant(minimize_extended_hamiltonian(problem, 0.0, problem.initial_state, c).u);
  }
  return ControlPolicy::feedback([problem, G_grad, model](double t, const Vec& x) {
    return minimize_extended_hamiltonian(problem, t, x, make_costate(model(t, x), G_grad)).u;
  });
}

/// r(m) = m - x0 - T u(m) for the example (control-additive drift, constant
/// control), which is m + m e^{-m^2} + 1 while u(m) stays inside the box.
inline Vec consistency_residual_analytic(const ControlProblem& problem, const Vec& m) {
  if (problem.name != "example_e") throw ArgumentError("analytic consistency residual is only known for example_e");
  if (!m.allFinite()) throw ArgumentError("terminal mean must be finite");
  MeanfieldOptions opt;
  opt.constant_control = true;
  const Vec u = control_for_terminal_mean(problem, m, opt).constant_value();
  return m - problem.initial_state - problem.horizon * u;
}

struct ResidualEstimate {
  Vec residual;
  Vec std_error;
};

/// r(m) = m - sample mean of X(T) under u(m). The same seed is used for every
/// m, so r is a smooth function of m for a fixed config.
inline ResidualEstimate consistency_residual_mc(const ControlProblem& problem, const Vec& m,
                                                const MeanfieldOptions& opt) {
  if (!m.allFinite()) throw ArgumentError("terminal mean must be finite");
  const auto policy = control_for_terminal_mean(problem, m, opt);
  const auto times = uniform_time_grid(0.0, problem.horizon, opt.cfg.n_steps);
  const auto n = static_cast<std::size_t>(problem.state_dim);
  std::vector<std::vector<double>> terminal(n, std::vector<double>(opt.cfg.n_paths));
  for_each_path(controlled_dynamics(problem, policy), times, problem.initial_state, opt.cfg,
                [&](std::size_t p, std::span<const double> states, std::span<const double>) {
                  for (std::size_t i = 0; i < n; ++i) terminal[i][p] = states[opt.cfg.n_steps * n + i];
                });
  ResidualEstimate out{Vec(problem.state_dim), Vec(problem.state_dim)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto me = mean_and_error(terminal[i]);
    out.residual(static_cast<Eigen::Index>(i)) = m(static_cast<Eigen::Index>(i)) - me.mean;
    out.std_error(static_cast<Eigen::Index>(i)) = me.std_error;
  }
  return out;
}

struct FixedPointResult {
  Vec m_star;
  double residual = 0.0;
  int iterations = 0;
  /// "bisection" or "damped_picard".
  std::string method;
  std::vector<std::pair<Vec, double>> history;
  bool converged = false;
  double tolerance = 0.0;
  double damping = 0.0;
  bool multiple_roots_detected = false;
  /// Monte Carlo standard error of the final residual (0 for analytic runs).
  Vec std_error;
};

/// Bisection on a scalar residual until the bracket is no wider than tol.
/// A 64-interval pre-scan flags brackets holding more than one sign change.
inline FixedPointResult solve_fixed_point_bisection(const std::function<double(double)>& r, double lo, double hi,
                                                    double tol, int max_iter) {
  if (!(tol > 0.0)) throw ArgumentError("tolerance must be positive");
  if (!(lo < hi)) throw ArgumentError("bracket must satisfy lo < hi");
  double rlo = r(lo);
  const double rhi = r(hi);
  if (rlo * rhi > 0.0) throw ArgumentError("no sign change in bracket");
  FixedPointResult res;
  res.method = "bisection";
  res.tolerance = tol;
  int changes = 0;
  double prev = rlo;
  for (int k = 1; k <= 64; ++k) {
    const double v = r(lo + (hi - lo) * k / 64.0);
    if ((prev < 0.0 && v >= 0.0) || (prev > 0.0 && v <= 0.0)) ++changes;
    if (v != 0.0) prev = v;
  }
  res.multiple_roots_detected = changes > 1;
  while (hi - lo > tol && res.iterations < max_iter) {
    const double mid = 0.5 * (lo + hi);
    const double rm = r(mid);
    res.history.emplace_back(make_vec({mid}), std::abs(rm));
    if ((rlo < 0.0) == (rm < 0.0) && rm != 0.0) {
      lo = mid;
      rlo = rm;
    } else {
      hi = mid;
    }
    ++res.iterations;
  }
  const double m = 0.5 * (lo + hi);
  res.m_star = make_vec({m});
  res.residual = std::abs(r(m));
  res.converged = hi - lo <= tol;
  res.std_error = make_vec({0.0});
  return res;
}

/// Example fixed point by bisection of the analytic residual.
inline FixedPointResult solve_fixed_point(const ControlProblem& problem, double lo, double hi, double tol = 1e-10,
                                          int max_iter = 200) {
  if (problem.state_dim != 1) throw ArgumentError("bisection needs a scalar state");
  return solve_fixed_point_bisection(
      [&](double m) { return consistency_residual_analytic(problem, make_vec({m}))(0); }, lo, hi, tol, max_iter);
}

struct PicardOptions {
  double damping = 0.5;
  double tolerance = 1e-8;
  int max_iter = 200;
};

/// m <- m - lambda r(m). Lambda halves, restarting from the best iterate,
/// whenever the residual exceeds ten times its smallest value at least five
/// iterations back.
inline FixedPointResult solve_fixed_point_picard(const std::function<ResidualEstimate(const Vec&)>& r, Vec m,
                                                 const PicardOptions& opt) {
  if (!(opt.damping > 0.0 && opt.damping <= 1.0)) throw ArgumentError("damping must lie in (0, 1]");
  FixedPointResult res;
  res.method = "damped_picard";
  res.tolerance = opt.tolerance;
  double lambda = opt.damping;
  std::vector<double> norms;
  Vec best_m = m;
  double best_norm = std::numeric_limits<double>::infinity();
  ResidualEstimate cur = r(m);
  for (;;) {
    const double norm = cur.residual.norm();
    if (!std::isfinite(norm)) {
      std::vector<double> hist;
      for (const auto& h : res.history) hist.push_back(h.second);
      throw ConvergenceError("picard residual is not finite", hist);
    }
    res.history.emplace_back(m, norm);
    norms.push_back(norm);
    if (norm < best_norm) {
      best_norm = norm;
      best_m = m;
    }
    if (norm <= opt.tolerance || res.iterations >= opt.max_iter) break;
    if (norms.size() > 5 && norm > 10.0 * *std::min_element(norms.begin(), norms.end() - 5)) {
      lambda *= 0.5;
      if (lambda < 1.0 / 64.0) {
        std::vector<double> hist;
        for (const auto& h : res.history) hist.push_back(h.second);
        throw ConvergenceError("damped picard iteration diverged", hist);
      }
      m = best_m;
      norms.clear();
    } else {
      m = m - lambda * cur.residual;
    }
    cur = r(m);
    ++res.iterations;
  }
  res.m_star = m;
  res.residual = cur.residual.norm();
  res.std_error = cur.std_error;
  res.converged = res.residual <= opt.tolerance;
  res.damping = lambda;
  return res;
}

/// Monte Carlo fixed point for any problem.
inline FixedPointResult solve_fixed_point(const ControlProblem& problem, const Vec& init, const MeanfieldOptions& mf,
                                          const PicardOptions& opt = {}) {
  if (init.size() != problem.state_dim) throw ArgumentError("initial terminal mean has wrong length");
  return solve_fixed_point_picard([&](const Vec& m) { return consistency_residual_mc(problem, m, mf); }, init, opt);
}

/// Closed-form solution of the example at fixed point m*.
struct ExampleEClosedForms {
  double m_star = 0.0;
  double u_bar = 0.0;
  double N = 1.0;
  double J = 0.0;
  std::function<double(double)> M;
  std::function<double(double)> L;
  std::function<double(double, double)> theta;
  std::function<double(double, double)> g;
  double psi = 0.0;
  double eta = 0.0;
};

/// Values quoted in the source text, kept for the comparison table.
struct ExampleEStatedValues {
  static constexpr double x_star = -0.58462;
  static constexpr double u_bar = 0.58462;
  static constexpr double J = -0.29;
};

inline ExampleEClosedForms example_e_closed_forms(double m, double horizon = 1.0, double x0 = 0.0) {
  ExampleEClosedForms cf;
  cf.m_star = m;
  const double e = std::exp(-m * m);
  cf.u_bar = -m * e - 1.0;
  const double u = cf.u_bar;
  const double m_coeff = 0.5 * m * m * e * e;
  cf.M = [m_coeff, horizon](double t) { return m_coeff * (horizon - t); };
  cf.L = [u, horizon](double t) { return u * (horizon - t); };
  cf.theta = [m_coeff, horizon](double t, double) { return m_coeff * (horizon - t); };
  cf.g = [u, horizon](double t, double x) { return x + u * (horizon - t); };
  const double g00 = cf.g(0.0, x0);
  cf.J = cf.M(0.0) - 0.5 * std::exp(-g00 * g00);
  return cf;
}

/// theta_x = 0, g_x = 1, g = x + L(t) from the closed forms.
inline AnalyticCostateField example_e_costate_field(const ExampleEClosedForms& cf) {
  return AnalyticCostateField([L = cf.L](double t, const Vec& x) {
    auto s = CostateSample::zero(1);
    s.g_x(0, 0) = 1.0;
    s.g_value(0) = x(0) + L(t);
    return s;
  });
}

}  // namespace bsmp
