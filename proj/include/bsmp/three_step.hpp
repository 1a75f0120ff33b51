#pragma once

#include "bsmp/core.hpp"
#include "bsmp/parallel.hpp"
#include "bsmp/sde.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

namespace bsmp {

/// Coefficients of the coupled forward SDE / backward SPDE pair
///   dX = b(t, X, p_x(t, X)) dt + sigma(t, X) dW,
///   dp = -f(t, x, p_x(t, X)) dt + q dW,  p(T, x) = F(x).
/// The grid solver handles a scalar state (n = 1) with any noise dimension.
struct FbspdeSpec {
  std::string name;
  int state_dim = 1;
  int noise_dim = 1;
  double horizon = 1.0;
  Vec initial_state = Vec::Zero(1);
  std::function<Vec(double, const Vec&, const Vec&)> b_bar;
  std::function<Mat(double, const Vec&)> sigma_bar;
  std::function<double(double, const Vec&, const Vec&)> f_bar;
  std::function<double(const Vec&)> F_bar;
  /// Extra forcing g(t, x, y) added to f_bar. Only the manufactured problem
  /// needs it, since its forcing is not a function of (t, x, p) alone.
  std::function<double(double, double, double)> source;
  /// Terminal data theta(T, x, y); defaults to F_bar(x).
  std::function<double(double, double)> terminal_xy;
  /// Known solution theta(t, x, y), when there is one.
  std::function<double(double, double, double)> exact;
};

inline void check_spec(const FbspdeSpec& spec) {
  if (spec.state_dim != 1) throw ArgumentError("decoupling field solver supports a scalar state only");
  if (spec.noise_dim < 1 || spec.noise_dim > kMaxDim) throw ArgumentError("noise dimension out of range");
  if (!(spec.horizon > 0.0) || !std::isfinite(spec.horizon)) throw ArgumentError("horizon must be positive");
  if (spec.initial_state.size() != 1) throw ArgumentError("initial state must have length 1");
  if (!spec.b_bar || !spec.sigma_bar || !spec.f_bar || !spec.F_bar)
    throw ArgumentError("spec needs b_bar, sigma_bar, f_bar and F_bar");
}

/// theta = c: zero drift and running cost, unit noise.
inline FbspdeSpec constant_spec(double c, double horizon = 1.0) {
  FbspdeSpec s;
  s.name = "constant";
  s.horizon = horizon;
  s.b_bar = [](double, const Vec&, const Vec&) { return Vec(Vec::Zero(1)); };
  s.sigma_bar = [](double, const Vec&) { return Mat(Mat::Identity(1, 1)); };
  s.f_bar = [](double, const Vec&, const Vec&) { return 0.0; };
  s.F_bar = [c](const Vec&) { return c; };
  s.exact = [c](double, double, double) { return c; };
  return s;
}

/// The scalar example with its optimal control u_bar frozen in:
/// b = u_bar, f = (u_bar + 1)^2 / 2, F = 0, so theta = f (T - t).
inline FbspdeSpec example_e_frozen_spec(double u_bar, double horizon = 1.0) {
  FbspdeSpec s;
  s.name = "example_e_frozen";
  s.horizon = horizon;
  const double run = 0.5 * (u_bar + 1.0) * (u_bar + 1.0);
  s.b_bar = [u_bar](double, const Vec&, const Vec&) { return make_vec({u_bar}); };
  s.sigma_bar = [](double, const Vec&) { return Mat(Mat::Identity(1, 1)); };
  s.f_bar = [run](double, const Vec&, const Vec&) { return run; };
  s.F_bar = [](const Vec&) { return 0.0; };
  s.exact = [run, horizon](double t, double, double) { return run * (horizon - t); };
  return s;
}

/// theta*(t, x, y) = e^{-t} sin x cos y with b(t, x, p) = p and unit noise.
/// The forcing is theta* substituted into the decoupling equation.
inline FbspdeSpec manufactured_spec(double horizon = 0.5) {
  FbspdeSpec s;
  s.name = "manufactured";
  s.horizon = horizon;
  s.b_bar = [](double, const Vec&, const Vec& p) { return Vec(p); };
  s.sigma_bar = [](double, const Vec&) { return Mat(Mat::Identity(1, 1)); };
  s.f_bar = [](double, const Vec&, const Vec&) { return 0.0; };
  // Only used for its y-free slice; terminal_xy carries the real data.
  s.F_bar = [horizon](const Vec& x) { return std::exp(-horizon) * std::sin(x(0)); };
  s.exact = [](double t, double x, double y) { return std::exp(-t) * std::sin(x) * std::cos(y); };
  s.terminal_xy = [horizon](double x, double y) { return std::exp(-horizon) * std::sin(x) * std::cos(y); };
  s.source = [](double t, double x, double y) {
    const double e = std::exp(-t);
    const double th = e * std::sin(x) * std::cos(y);
    const double th_x = e * std::cos(x) * std::cos(y);
    const double th_y = -e * std::sin(x) * std::sin(y);
    const double th_xy = -e * std::cos(x) * std::sin(y);
    const double p = e * std::cos(y) * std::cos(y);
    // -theta_t - (theta_xx + theta_yy)/2 - theta_xy - p (theta_x + theta_y)
    return 2.0 * th - th_xy - p * (th_x + th_y);
  };
  return s;
}

struct GridConfig {
  /// Half-width of the square [-L, L]^2. 0 picks |x0| + 8 standard deviations.
  double L = 0.0;
  std::size_t n_xy = 81;
  /// Time steps; 0 picks one from the stability bound.
  std::size_t n_t = 0;
  double picard_tol = 1e-8;
  int picard_max = 50;
  /// Keep every stride-th time level (plus t = T); 0 keeps about 21 levels.
  std::size_t output_stride = 0;
  int workers = 1;
};

/// |x0| + 8 sigma sqrt(T), with sigma the largest noise norm seen on [x0 +- 4].
inline double default_half_width(const FbspdeSpec& spec) {
  double sig = 0.0;
  for (int k = -4; k <= 4; ++k) {
    const Vec x = make_vec({spec.initial_state(0) + k});
    sig = std::max(sig, spec.sigma_bar(0.0, x).norm());
  }
  return std::abs(spec.initial_state(0)) + 8.0 * std::max(sig, 1e-3) * std::sqrt(spec.horizon);
}

/// Decoupling field theta(t, x, y) on [0, T] x [-L, L]^2. Index layout is
/// [i * n_xy + j] with i along x and j along y.
struct PdeSolution {
  double L = 0.0;
  double h = 0.0;
  double dt = 0.0;
  double horizon = 0.0;
  std::size_t n_xy = 0;
  std::size_t n_t = 0;
  std::vector<double> t_grid;
  std::vector<double> xy_grid;
  /// Solver time indices kept in `theta`, increasing, last one n_t.
  std::vector<std::size_t> stored_steps;
  std::vector<std::vector<double>> theta;
  std::vector<std::vector<double>> theta_x, theta_y, theta_xx, theta_yy, theta_xy;
  /// Levels k - 1 and k + 1 around each stored step (empty at 0 and n_t).
  std::vector<std::vector<double>> theta_prev, theta_next;
  /// theta_x at (j, j), (j + 1, j) and (j, j + 1) for every solver level.
  std::vector<std::vector<double>> diag, diag_lower, diag_upper;
  int picard_iterations = 0;
  double final_update = 0.0;
  std::vector<double> update_history;
  double admissible_dt = 0.0;

  std::size_t idx(std::size_t i, std::size_t j) const { return i * n_xy + j; }
  double time_of(std::size_t level) const { return t_grid[stored_steps[level]]; }
  std::size_t n_levels() const { return stored_steps.size(); }
  /// Region the forward dynamics are expected to stay in.
  double coverage() const { return 0.5 * L; }

  /// Cell index and weight of coordinate z, clamped to the grid.
  std::pair<std::size_t, double> locate(double z, bool* clamped = nullptr) const {
    if (clamped) *clamped = z < -L || z > L;
    const double s = std::clamp((z + L) / h, 0.0, static_cast<double>(n_xy - 1));
    const auto c = std::min(static_cast<std::size_t>(s), n_xy - 2);
    return {c, s - static_cast<double>(c)};
  }

  /// Bilinear interpolation of a stored field at (x, y).
  double interpolate(const std::vector<double>& field, double x, double y) const {
    const auto [i, wx] = locate(x);
    const auto [j, wy] = locate(y);
    const double a = field[idx(i, j)] + wy * (field[idx(i, j + 1)] - field[idx(i, j)]);
    const double b = field[idx(i + 1, j)] + wy * (field[idx(i + 1, j + 1)] - field[idx(i + 1, j)]);
    return a + wx * (b - a);
  }

  /// theta_x(t, y, y) at solver level k, bilinear on the diagonal cell.
  double diagonal_theta_x(std::size_t k, double y, bool* clamped = nullptr) const {
    const auto [c, w] = locate(y, clamped);
    return (1.0 - w) * (1.0 - w) * diag[k][c] + w * (1.0 - w) * (diag_lower[k][c] + diag_upper[k][c]) +
           w * w * diag[k][c + 1];
  }
};

namespace detail {

/// First and second differences along one grid line; second-order one-sided
/// stencils at the ends.
inline double d1(const double* f, std::size_t stride, std::size_t i, std::size_t n, double h) {
  if (i == 0) return (-3.0 * f[0] + 4.0 * f[stride] - f[2 * stride]) / (2.0 * h);
  if (i == n - 1) return (3.0 * f[i * stride] - 4.0 * f[(i - 1) * stride] + f[(i - 2) * stride]) / (2.0 * h);
  return (f[(i + 1) * stride] - f[(i - 1) * stride]) / (2.0 * h);
}

inline double d2(const double* f, std::size_t stride, std::size_t i, std::size_t n, double h) {
  if (i == 0) return (2.0 * f[0] - 5.0 * f[stride] + 4.0 * f[2 * stride] - f[3 * stride]) / (h * h);
  if (i == n - 1)
    return (2.0 * f[i * stride] - 5.0 * f[(i - 1) * stride] + 4.0 * f[(i - 2) * stride] - f[(i - 3) * stride]) /
           (h * h);
  return (f[(i + 1) * stride] - 2.0 * f[i * stride] + f[(i - 1) * stride]) / (h * h);
}

struct Derivatives {
  std::vector<double> x, y, xx, yy, xy;
};

inline Derivatives differentiate(const std::vector<double>& f, std::size_t n, double h) {
  Derivatives d;
  const std::size_t total = n * n;
  d.x.resize(total);
  d.y.resize(total);
  d.xx.resize(total);
  d.yy.resize(total);
  d.xy.resize(total);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      d.x[i * n + j] = d1(f.data() + j, n, i, n, h);
      d.xx[i * n + j] = d2(f.data() + j, n, i, n, h);
      d.y[i * n + j] = d1(f.data() + i * n, 1, j, n, h);
      d.yy[i * n + j] = d2(f.data() + i * n, 1, j, n, h);
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) d.xy[i * n + j] = d1(d.x.data() + i * n, 1, j, n, h);
  return d;
}

/// theta_x on the diagonal and the two neighbouring bands.
inline void diagonal_bands(const std::vector<double>& f, std::size_t n, double h, std::vector<double>& diag,
                           std::vector<double>& lower, std::vector<double>& upper) {
  diag.assign(n, 0.0);
  lower.assign(n, 0.0);
  upper.assign(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    diag[j] = d1(f.data() + j, n, j, n, h);
    if (j + 1 < n) {
      lower[j] = d1(f.data() + j, n, j + 1, n, h);
      upper[j] = d1(f.data() + j + 1, n, j, n, h);
    }
  }
}

struct LevelCoefficients {
  std::vector<double> a11, cxy, bx, by, f;
};

/// Operator coefficients at time t with the lagged diagonal P(y_j).
inline LevelCoefficients level_coefficients(const FbspdeSpec& spec, double t, const std::vector<double>& grid,
                                            const std::vector<double>& P) {
  const std::size_t n = grid.size();
  LevelCoefficients c;
  c.a11.resize(n);
  c.by.resize(n);
  c.cxy.resize(n * n);
  c.bx.resize(n * n);
  c.f.resize(n * n);
  std::vector<Vec> sig(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Mat s = spec.sigma_bar(t, make_vec({grid[i]}));
    sig[i] = s.row(0).transpose();
    c.a11[i] = 0.5 * sig[i].squaredNorm();
    c.by[i] = spec.b_bar(t, make_vec({grid[i]}), make_vec({P[i]}))(0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Vec x = make_vec({grid[i]});
    for (std::size_t j = 0; j < n; ++j) {
      const Vec p = make_vec({P[j]});
      c.cxy[i * n + j] = sig[i].dot(sig[j]);
      c.bx[i * n + j] = spec.b_bar(t, x, p)(0);
      double f = spec.f_bar(t, x, p);
      if (spec.source) f += spec.source(t, grid[i], grid[j]);
      c.f[i * n + j] = f;
    }
  }
  return c;
}

/// Largest stable explicit step for the given coefficients.
inline double admissible_step(const LevelCoefficients& c, std::size_t n, double h) {
  double rate = 0.0;
  for (std::size_t i = 1; i + 1 < n; ++i)
    for (std::size_t j = 1; j + 1 < n; ++j) {
      const std::size_t k = i * n + j;
      const double r = 2.0 * (c.a11[i] + c.a11[j]) / (h * h) + std::abs(c.cxy[k]) / (h * h) +
                       (std::abs(c.bx[k]) + std::abs(c.by[j])) / h;
      rate = std::max(rate, r);
    }
  return rate > 0.0 ? 1.0 / rate : std::numeric_limits<double>::infinity();
}

/// First difference for the advection term: central while the cell Peclet
/// number |b| h / (2 a) stays below one, upwind otherwise.
inline double advect(double b, double a, double minus, double centre, double plus, double h) {
  if (std::abs(b) * h > 2.0 * a) return b > 0.0 ? b * (plus - centre) / h : b * (centre - minus) / h;
  return b * (plus - minus) / (2.0 * h);
}

/// One explicit backward step theta(t_k) from theta(t_{k+1}).
inline void backward_step(const std::vector<double>& in, std::vector<double>& out, const LevelCoefficients& c,
                          std::size_t n, double h, double dt, int workers) {
  const double h2 = h * h;
  parallel_for(n - 2, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin + 1; i < end + 1; ++i) {
      for (std::size_t j = 1; j + 1 < n; ++j) {
        const std::size_t k = i * n + j;
        const double u = in[k];
        const double xm = in[k - n], xp = in[k + n], ym = in[k - 1], yp = in[k + 1];
        const double dxx = (xp - 2.0 * u + xm) / h2;
        const double dyy = (yp - 2.0 * u + ym) / h2;
        const double dxy = (in[k + n + 1] - in[k + n - 1] - in[k - n + 1] + in[k - n - 1]) / (4.0 * h2);
        const double adv = advect(c.bx[k], c.a11[i], xm, u, xp, h) + advect(c.by[j], c.a11[j], ym, u, yp, h);
        out[k] = u + dt * (c.a11[i] * dxx + c.a11[j] * dyy + c.cxy[k] * dxy + adv + c.f[k]);
      }
    }
  });
  for (std::size_t j = 1; j + 1 < n; ++j) {
    out[j] = 2.0 * out[n + j] - out[2 * n + j];
    out[(n - 1) * n + j] = 2.0 * out[(n - 2) * n + j] - out[(n - 3) * n + j];
  }
  for (std::size_t i = 0; i < n; ++i) {
    out[i * n] = 2.0 * out[i * n + 1] - out[i * n + 2];
    out[i * n + n - 1] = 2.0 * out[i * n + n - 2] - out[i * n + n - 3];
  }
}

inline double sup_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

inline std::vector<double> terminal_values(const FbspdeSpec& spec, const std::vector<double>& grid) {
  const std::size_t n = grid.size();
  std::vector<double> v(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    const double F = spec.terminal_xy ? 0.0 : spec.F_bar(make_vec({grid[i]}));
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] = spec.terminal_xy ? spec.terminal_xy(grid[i], grid[j]) : F;
  }
  return v;
}

/// Shared grid and level bookkeeping for solved and sampled fields.
inline PdeSolution empty_solution(const FbspdeSpec& spec, const GridConfig& cfg, std::size_t n_t) {
  PdeSolution s;
  s.L = cfg.L > 0.0 ? cfg.L : default_half_width(spec);
  s.n_xy = cfg.n_xy;
  s.h = 2.0 * s.L / static_cast<double>(cfg.n_xy - 1);
  s.horizon = spec.horizon;
  s.n_t = n_t;
  s.dt = spec.horizon / static_cast<double>(n_t);
  s.t_grid = uniform_time_grid(0.0, spec.horizon, n_t);
  s.xy_grid.resize(cfg.n_xy);
  for (std::size_t i = 0; i < cfg.n_xy; ++i) s.xy_grid[i] = -s.L + s.h * static_cast<double>(i);
  const std::size_t stride =
      cfg.output_stride > 0 ? cfg.output_stride : std::max<std::size_t>(1, (n_t + 19) / 20);
  for (std::size_t k = 0; k < n_t; k += stride) s.stored_steps.push_back(k);
  s.stored_steps.push_back(n_t);
  const std::size_t levels = s.stored_steps.size();
  s.theta.resize(levels);
  s.theta_prev.resize(levels);
  s.theta_next.resize(levels);
  s.diag.resize(n_t + 1);
  s.diag_lower.resize(n_t + 1);
  s.diag_upper.resize(n_t + 1);
  return s;
}

inline void fill_derivatives(PdeSolution& s) {
  const std::size_t levels = s.n_levels();
  s.theta_x.resize(levels);
  s.theta_y.resize(levels);
  s.theta_xx.resize(levels);
  s.theta_yy.resize(levels);
  s.theta_xy.resize(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    auto d = differentiate(s.theta[l], s.n_xy, s.h);
    s.theta_x[l] = std::move(d.x);
    s.theta_y[l] = std::move(d.y);
    s.theta_xx[l] = std::move(d.xx);
    s.theta_yy[l] = std::move(d.yy);
    s.theta_xy[l] = std::move(d.xy);
  }
}

inline void check_grid(const GridConfig& cfg) {
  if (cfg.n_xy < 5) throw ArgumentError("grid needs at least 5 points per axis");
  if (cfg.L < 0.0 || !std::isfinite(cfg.L)) throw ArgumentError("half-width L must be positive");
  if (!(cfg.picard_tol > 0.0)) throw ArgumentError("picard tolerance must be positive");
  if (cfg.picard_max < 1) throw ArgumentError("picard_max must be at least 1");
}

}  // namespace detail

/// Step 1: backward sweeps of the decoupling equation
///   theta_t + <theta_X, b> + tr[a theta_XX] + f = 0,  theta(T) = F,
/// with b and f evaluated at the previous sweep's theta_x(t, y, y).
inline PdeSolution solve_decoupling_pde(const FbspdeSpec& spec, const GridConfig& cfg) {
  check_spec(spec);
  detail::check_grid(cfg);
  const double L = cfg.L > 0.0 ? cfg.L : default_half_width(spec);
  const std::size_t n = cfg.n_xy;
  const double h = 2.0 * L / static_cast<double>(n - 1);
  std::vector<double> grid(n);
  for (std::size_t i = 0; i < n; ++i) grid[i] = -L + h * static_cast<double>(i);

  const auto terminal = detail::terminal_values(spec, grid);
  std::vector<double> d0, l0, u0;
  detail::diagonal_bands(terminal, n, h, d0, l0, u0);

  std::size_t n_t = cfg.n_t;
  const double dt_terminal = detail::admissible_step(detail::level_coefficients(spec, spec.horizon, grid, d0), n, h);
  if (n_t == 0) n_t = static_cast<std::size_t>(std::ceil(spec.horizon / (0.8 * dt_terminal)));
  GridConfig with_l = cfg;
  with_l.L = L;
  PdeSolution sol = detail::empty_solution(spec, with_l, n_t);
  const double dt = sol.dt;
  if (dt > dt_terminal * (1.0 + 1e-12)) throw CflError(dt, dt_terminal);

  std::vector<std::vector<double>> P(n_t + 1, d0);
  std::vector<std::size_t> slot(n_t + 1, SIZE_MAX);
  for (std::size_t l = 0; l < sol.n_levels(); ++l) slot[sol.stored_steps[l]] = l;
  const std::size_t last_slot = sol.n_levels() - 1;
  std::vector<std::vector<double>> prev_theta(sol.n_levels(), terminal);
  double admissible = dt_terminal;

  for (int sweep = 1; sweep <= cfg.picard_max; ++sweep) {
    std::vector<double> next = terminal, cur(n * n), older(n * n);
    sol.theta[last_slot] = terminal;
    detail::diagonal_bands(terminal, n, h, sol.diag[n_t], sol.diag_lower[n_t], sol.diag_upper[n_t]);
    for (std::size_t k = n_t; k-- > 0;) {
      const auto coeff = detail::level_coefficients(spec, sol.t_grid[k + 1], grid, P[k + 1]);
      const double adm = detail::admissible_step(coeff, n, h);
      admissible = std::min(admissible, adm);
      if (dt > adm * (1.0 + 1e-12)) throw CflError(dt, adm);
      detail::backward_step(next, cur, coeff, n, h, dt, cfg.workers);
      if (!std::all_of(cur.begin(), cur.end(), [](double v) { return std::isfinite(v); }))
        throw Error("decoupling field became non-finite at time step " + std::to_string(k));
      detail::diagonal_bands(cur, n, h, sol.diag[k], sol.diag_lower[k], sol.diag_upper[k]);
      // cur = level k, next = level k + 1, older = level k + 2.
      if (k + 1 < n_t && slot[k + 1] != SIZE_MAX) {
        sol.theta_next[slot[k + 1]] = older;
        sol.theta_prev[slot[k + 1]] = cur;
      }
      if (slot[k] != SIZE_MAX) sol.theta[slot[k]] = cur;
      older.swap(next);
      next.swap(cur);
    }
    double update = 0.0;
    for (std::size_t k = 0; k <= n_t; ++k) update = std::max(update, detail::sup_diff(sol.diag[k], P[k]));
    for (std::size_t l = 0; l < sol.n_levels(); ++l)
      update = std::max(update, detail::sup_diff(sol.theta[l], prev_theta[l]));
    sol.update_history.push_back(update);
    sol.picard_iterations = sweep;
    sol.final_update = update;
    if (sweep >= 2 && update <= cfg.picard_tol) break;
    if (sweep == cfg.picard_max)
      throw ConvergenceError("decoupling field picard sweeps did not converge", sol.update_history);
    P = sol.diag;
    prev_theta = sol.theta;
  }
  sol.admissible_dt = admissible;
  detail::fill_derivatives(sol);
  return sol;
}

/// The known solution sampled on the solver's grid, with the diagonal taken
/// from its own differences. Residual checks use it as the reference.
inline PdeSolution sample_exact_solution(const FbspdeSpec& spec, const GridConfig& cfg) {
  check_spec(spec);
  detail::check_grid(cfg);
  if (!spec.exact) throw ArgumentError("spec has no known solution");
  if (cfg.n_t == 0) throw ArgumentError("sampling the known solution needs an explicit n_t");
  PdeSolution sol = detail::empty_solution(spec, cfg, cfg.n_t);
  const std::size_t n = sol.n_xy;
  const auto sample = [&](std::size_t k) {
    std::vector<double> v(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) v[i * n + j] = spec.exact(sol.t_grid[k], sol.xy_grid[i], sol.xy_grid[j]);
    return v;
  };
  for (std::size_t k = 0; k <= sol.n_t; ++k) {
    const auto v = sample(k);
    detail::diagonal_bands(v, n, sol.h, sol.diag[k], sol.diag_lower[k], sol.diag_upper[k]);
  }
  for (std::size_t l = 0; l < sol.n_levels(); ++l) {
    const std::size_t k = sol.stored_steps[l];
    sol.theta[l] = k == sol.n_t ? detail::terminal_values(spec, sol.xy_grid) : sample(k);
    if (k > 0 && k < sol.n_t) {
      sol.theta_prev[l] = sample(k - 1);
      sol.theta_next[l] = sample(k + 1);
    }
  }
  sol.picard_iterations = 0;
  detail::fill_derivatives(sol);
  return sol;
}

/// Max |theta_t + <theta_X, b> + tr[a theta_XX] + f| over stored interior
/// levels, on nodes at least two cells from the edge and inside [-L/2, L/2]^2.
/// Differences are central in t and X; b and f use the solution's own
/// theta_x(t, y, y).
inline double pde_residual(const PdeSolution& pde, const FbspdeSpec& spec) {
  check_spec(spec);
  const std::size_t n = pde.n_xy;
  const double h = pde.h;
  double worst = 0.0;
  for (std::size_t l = 0; l < pde.n_levels(); ++l) {
    if (pde.theta_prev[l].empty() || pde.theta_next[l].empty()) continue;
    const std::size_t k = pde.stored_steps[l];
    const double t = pde.t_grid[k];
    const auto& th = pde.theta[l];
    for (std::size_t i = 2; i + 2 < n; ++i) {
      const double x = pde.xy_grid[i];
      if (std::abs(x) > pde.coverage() + 1e-12) continue;
      const Mat sx = spec.sigma_bar(t, make_vec({x}));
      for (std::size_t j = 2; j + 2 < n; ++j) {
        const double y = pde.xy_grid[j];
        if (std::abs(y) > pde.coverage() + 1e-12) continue;
        const Mat sy = spec.sigma_bar(t, make_vec({y}));
        // a = 1/2 [sx sx^T, sx sy^T; sy sx^T, sy sy^T]
        const double a11 = 0.5 * sx.row(0).squaredNorm();
        const double a12 = 0.5 * sx.row(0).dot(sy.row(0));
        const double a22 = 0.5 * sy.row(0).squaredNorm();
        const std::size_t c = i * n + j;
        const double th_t = (pde.theta_next[l][c] - pde.theta_prev[l][c]) / (2.0 * pde.dt);
        const double th_x = (th[c + n] - th[c - n]) / (2.0 * h);
        const double th_y = (th[c + 1] - th[c - 1]) / (2.0 * h);
        const double th_xx = (th[c + n] - 2.0 * th[c] + th[c - n]) / (h * h);
        const double th_yy = (th[c + 1] - 2.0 * th[c] + th[c - 1]) / (h * h);
        const double th_xy = (th[c + n + 1] - th[c + n - 1] - th[c - n + 1] + th[c - n - 1]) / (4.0 * h * h);
        const Vec p = make_vec({pde.diag[k][j]});
        const double bx = spec.b_bar(t, make_vec({x}), p)(0);
        const double by = spec.b_bar(t, make_vec({y}), p)(0);
        double f = spec.f_bar(t, make_vec({x}), p);
        if (spec.source) f += spec.source(t, x, y);
        const double r = th_t + bx * th_x + by * th_y + a11 * th_xx + 2.0 * a12 * th_xy + a22 * th_yy + f;
        worst = std::max(worst, std::abs(r));
      }
    }
  }
  return worst;
}

/// Max |theta - exact| over stored levels inside [-L/2, L/2]^2.
inline double max_error_vs_exact(const PdeSolution& pde, const FbspdeSpec& spec) {
  if (!spec.exact) throw ArgumentError("spec has no known solution");
  double worst = 0.0;
  const std::size_t n = pde.n_xy;
  for (std::size_t l = 0; l < pde.n_levels(); ++l)
    for (std::size_t i = 0; i < n; ++i) {
      if (std::abs(pde.xy_grid[i]) > pde.coverage() + 1e-12) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (std::abs(pde.xy_grid[j]) > pde.coverage() + 1e-12) continue;
        const double e = spec.exact(pde.time_of(l), pde.xy_grid[i], pde.xy_grid[j]);
        worst = std::max(worst, std::abs(pde.theta[l][i * n + j] - e));
      }
    }
  return worst;
}

struct DriftSample {
  Vec value;
  bool clamped = false;
};

/// b(t, y, theta_x(t, y, y)): bilinear on the diagonal, linear between solver
/// levels. Points outside [-L, L] are clamped and flagged.
inline DriftSample decoupled_drift(const PdeSolution& pde, const FbspdeSpec& spec, double t, const Vec& y) {
  if (!(t >= -1e-12 && t <= pde.horizon + 1e-12)) throw ArgumentError("time outside the solved horizon");
  if (y.size() != 1 || !y.allFinite()) throw ArgumentError("state must be a finite scalar");
  const double u = std::clamp(t / pde.dt, 0.0, static_cast<double>(pde.n_t));
  const auto k = std::min(static_cast<std::size_t>(u), pde.n_t - 1);
  const double w = u - static_cast<double>(k);
  DriftSample out;
  const double lo = pde.diagonal_theta_x(k, y(0), &out.clamped);
  const double hi = pde.diagonal_theta_x(k + 1, y(0));
  out.value = spec.b_bar(t, y, make_vec({lo + w * (hi - lo)}));
  return out;
}

/// Steps 2 and 3: forward paths under the decoupled drift and the assembled
/// p(t, x) = theta(t, x, X(t)), q(t, x) = sigma(t, X(t))^T theta_y(t, x, X(t))
/// at the stored levels.
struct FbspdeSolution {
  std::vector<double> times;
  std::size_t n_paths = 0;
  std::size_t n_x = 0;
  int noise_dim = 1;
  std::vector<double> x_grid;
  /// [level * n_paths + path]
  std::vector<double> states;
  /// [(level * n_paths + path) * n_x + i]
  std::vector<double> p;
  /// [((level * n_paths + path) * n_x + i) * noise_dim + r]
  std::vector<double> q;
  std::uint64_t seed = 0;
  std::size_t n_t = 0;
  std::size_t n_xy = 0;
  double L = 0.0;
  /// Drift and assembly lookups that fell outside [-L, L].
  std::size_t clamped_evaluations = 0;

  double state(std::size_t level, std::size_t path) const { return states[level * n_paths + path]; }
  double p_at(std::size_t level, std::size_t path, std::size_t i) const {
    return p[(level * n_paths + path) * n_x + i];
  }
  double q_at(std::size_t level, std::size_t path, std::size_t i, int r = 0) const {
    return q[((level * n_paths + path) * n_x + i) * static_cast<std::size_t>(noise_dim) + static_cast<std::size_t>(r)];
  }
};

/// Runs the forward SDE on the solver's own time grid, so the drift uses
/// solver levels directly; mc.n_steps is not used.
inline FbspdeSolution assemble_three_step(const PdeSolution& pde, const FbspdeSpec& spec, const McConfig& mc) {
  check_spec(spec);
  McConfig cfg = mc;
  cfg.n_steps = pde.n_t;
  check_config(cfg);
  const std::size_t n = pde.n_xy;
  const std::size_t levels = pde.n_levels();
  const auto d = static_cast<std::size_t>(spec.noise_dim);

  FbspdeSolution out;
  for (std::size_t l = 0; l < levels; ++l) out.times.push_back(pde.time_of(l));
  out.n_paths = cfg.n_paths;
  out.n_x = n;
  out.noise_dim = spec.noise_dim;
  out.x_grid = pde.xy_grid;
  out.seed = cfg.seed;
  out.n_t = pde.n_t;
  out.n_xy = n;
  out.L = pde.L;
  out.states.resize(levels * cfg.n_paths);
  out.p.resize(levels * cfg.n_paths * n);
  out.q.resize(levels * cfg.n_paths * n * d);
  std::vector<unsigned char> clamped(cfg.n_paths, 0);

  Dynamics dyn;
  dyn.state_dim = 1;
  dyn.noise_dim = spec.noise_dim;
  dyn.drift = [&pde, &spec](double t, const Vec& y) { return decoupled_drift(pde, spec, t, y).value; };
  dyn.diffusion = spec.sigma_bar;

  for_each_path(dyn, pde.t_grid, spec.initial_state, cfg,
                [&](std::size_t path, std::span<const double> states, std::span<const double>) {
                  for (std::size_t k = 0; k <= pde.n_t; ++k)
                    if (states[k] < -pde.L || states[k] > pde.L) clamped[path] = 1;
                  for (std::size_t l = 0; l < levels; ++l) {
                    const std::size_t k = pde.stored_steps[l];
                    const double t = pde.t_grid[k];
                    const double X = states[k];
                    out.states[l * cfg.n_paths + path] = X;
                    const auto [j, w] = pde.locate(X);
                    const Mat sig = spec.sigma_bar(t, make_vec({X}));
                    const auto& th = pde.theta[l];
                    const auto& ty = pde.theta_y[l];
                    for (std::size_t i = 0; i < n; ++i) {
                      const std::size_t base = (l * cfg.n_paths + path) * n + i;
                      const double lo = th[i * n + j], hi = th[i * n + j + 1];
                      out.p[base] = lo + w * (hi - lo);
                      const double gy = ty[i * n + j] + w * (ty[i * n + j + 1] - ty[i * n + j]);
                      for (std::size_t r = 0; r < d; ++r) out.q[base * d + r] = sig(0, static_cast<Eigen::Index>(r)) * gy;
                    }
                  }
                });
  out.clamped_evaluations = static_cast<std::size_t>(std::count(clamped.begin(), clamped.end(), 1));
  return out;
}

inline FbspdeSolution run_three_step(const FbspdeSpec& spec, const GridConfig& grid, const McConfig& mc) {
  return assemble_three_step(solve_decoupling_pde(spec, grid), spec, mc);
}

// ---------------------------------------------------------------------------
// Export

/// Binary layout, little-endian: "BSMPGRID", u32 version, u64 levels, nx, ny,
/// f64 L, dx, dy, dt, f64 times[levels], then theta row-major [level][i][j].
inline void write_grid_binary(const PdeSolution& pde, std::ostream& os) {
  const auto put = [&os](const auto& v) { os.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
  os.write("BSMPGRID", 8);
  put(std::uint32_t{1});
  put(static_cast<std::uint64_t>(pde.n_levels()));
  put(static_cast<std::uint64_t>(pde.n_xy));
  put(static_cast<std::uint64_t>(pde.n_xy));
  put(pde.L);
  put(pde.h);
  put(pde.h);
  put(pde.dt);
  for (std::size_t l = 0; l < pde.n_levels(); ++l) put(pde.time_of(l));
  for (const auto& level : pde.theta)
    os.write(reinterpret_cast<const char*>(level.data()), static_cast<std::streamsize>(level.size() * sizeof(double)));
  if (!os) throw Error("failed to write grid file");
}

struct GridFile {
  std::uint32_t version = 0;
  std::uint64_t levels = 0, nx = 0, ny = 0;
  double L = 0.0, dx = 0.0, dy = 0.0, dt = 0.0;
  std::vector<double> times;
  std::vector<double> values;
};

inline GridFile read_grid_binary(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "BSMPGRID", 8) != 0) throw Error("not a grid file");
  GridFile g;
  const auto get = [&is](auto& v) { is.read(reinterpret_cast<char*>(&v), sizeof(v)); };
  get(g.version);
  get(g.levels);
  get(g.nx);
  get(g.ny);
  get(g.L);
  get(g.dx);
  get(g.dy);
  get(g.dt);
  if (!is || g.version != 1) throw Error("unsupported grid file");
  g.times.resize(g.levels);
  g.values.resize(g.levels * g.nx * g.ny);
  is.read(reinterpret_cast<char*>(g.times.data()), static_cast<std::streamsize>(g.times.size() * sizeof(double)));
  is.read(reinterpret_cast<char*>(g.values.data()), static_cast<std::streamsize>(g.values.size() * sizeof(double)));
  if (!is) throw Error("truncated grid file");
  return g;
}

/// One stored level as CSV rows t,x,y,theta,theta_x,theta_y.
inline void write_slice_csv(const PdeSolution& pde, std::size_t level, std::ostream& os) {
  if (level >= pde.n_levels()) throw ArgumentError("stored level out of range");
  const auto old = os.precision(17);
  os << "t,x,y,theta,theta_x,theta_y\n";
  const std::size_t n = pde.n_xy;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t c = i * n + j;
      os << pde.time_of(level) << ',' << pde.xy_grid[i] << ',' << pde.xy_grid[j] << ',' << pde.theta[level][c] << ','
         << pde.theta_x[level][c] << ',' << pde.theta_y[level][c] << '\n';
    }
  os.precision(old);
}

}  // namespace bsmp
