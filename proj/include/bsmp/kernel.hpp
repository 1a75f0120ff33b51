#pragma once

#include "bsmp/core.hpp"
#include "bsmp/parallel.hpp"
#include "bsmp/three_step.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <vector>

namespace bsmp {

/// Gaussian fundamental solution of theta_t + tr[a theta_XX] = 0 in dimension
/// 2n: (4 pi (s - t))^{-n} det(a)^{-1/2} exp(-<a^{-1}(X - Z), X - Z> / 4(s - t)).
inline double gamma0_kernel(double t, const Eigen::VectorXd& X, double s, const Eigen::VectorXd& Z,
                            const Eigen::MatrixXd& a) {
  if (!(s > t)) throw ArgumentError("kernel needs s > t");
  const auto D = X.size();
  if (D == 0 || D % 2 != 0 || Z.size() != D || a.rows() != D || a.cols() != D)
    throw ArgumentError("kernel dimensions must be 2n");
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, a.cwiseAbs().maxCoeff()))
    throw ArgumentError("kernel matrix must be symmetric positive definite");
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a, Eigen::EigenvaluesOnly);
  const auto& ev = es.eigenvalues();
  if (!(ev.minCoeff() > 1e-12 * ev.cwiseAbs().maxCoeff()))
    throw ArgumentError("kernel matrix must be symmetric positive definite");
  const Eigen::LLT<Eigen::MatrixXd> llt(a);
  const double tau = s - t;
  const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const Eigen::VectorXd w = llt.matrixL().solve(X - Z);
  const double n = static_cast<double>(D / 2);
  return std::exp(-n * std::log(4.0 * std::numbers::pi * tau) - 0.5 * log_det - w.squaredNorm() / (4.0 * tau));
}

/// Tensor trapezoid rule on [lo0, hi0] x [lo1, hi1] with n points per axis.
inline double trapezoid_2d(const std::function<double(double, double)>& fn, double lo0, double hi0, double lo1,
                           double hi1, std::size_t n) {
  if (n < 2) throw ArgumentError("trapezoid rule needs at least 2 points");
  const double h0 = (hi0 - lo0) / static_cast<double>(n - 1);
  const double h1 = (hi1 - lo1) / static_cast<double>(n - 1);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double wi = (i == 0 || i == n - 1) ? 0.5 : 1.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double wj = (j == 0 || j == n - 1) ? 0.5 : 1.0;
      sum += wi * wj * fn(lo0 + h0 * static_cast<double>(i), lo1 + h1 * static_cast<double>(j));
    }
  }
  return sum * h0 * h1;
}

/// Mass of Gamma0(0, X; tau, .) over the box [-half_width, half_width]^2.
inline double kernel_mass(double tau, const Eigen::Vector2d& X, const Eigen::Matrix2d& a, double half_width,
                          std::size_t n) {
  return trapezoid_2d(
      [&](double z0, double z1) { return gamma0_kernel(0.0, X, tau, Eigen::Vector2d(z0, z1), a); }, -half_width,
      half_width, -half_width, half_width, n);
}

/// |int Gamma0(t, X; s, Z) Gamma0(s, Z; r, Y) dZ - Gamma0(t, X; r, Y)| by quadrature.
inline double chapman_kolmogorov_gap(double t, const Eigen::Vector2d& X, double s, double r, const Eigen::Vector2d& Y,
                                     const Eigen::Matrix2d& a, double half_width, std::size_t n) {
  const double conv = trapezoid_2d(
      [&](double z0, double z1) {
        const Eigen::Vector2d Z(z0, z1);
        return gamma0_kernel(t, X, s, Z, a) * gamma0_kernel(s, Z, r, Y, a);
      },
      -half_width, half_width, -half_width, half_width, n);
  return std::abs(conv - gamma0_kernel(t, X, r, Y, a));
}

/// theta on a short window [T - window, T] for the integral form of the
/// decoupling equation.
struct KernelField {
  std::vector<double> times;
  double L = 0.0;
  double h = 0.0;
  std::size_t n_xy = 0;
  std::vector<double> grid;
  /// [level][i * n_xy + j]
  std::vector<std::vector<double>> values;

  double interpolate(const std::vector<double>& f, double x, double y) const {
    const auto cell = [&](double z) {
      const double s = std::clamp((z + L) / h, 0.0, static_cast<double>(n_xy - 1));
      const auto c = std::min(static_cast<std::size_t>(s), n_xy - 2);
      return std::pair{c, s - static_cast<double>(c)};
    };
    const auto [i, wx] = cell(x);
    const auto [j, wy] = cell(y);
    const std::size_t k = i * n_xy + j;
    const double a = f[k] + wy * (f[k + 1] - f[k]);
    const double b = f[k + n_xy] + wy * (f[k + n_xy + 1] - f[k + n_xy]);
    return a + wx * (b - a);
  }
  double value(std::size_t level, double x, double y) const { return interpolate(values[level], x, y); }
};

struct KernelOptions {
  std::size_t n_xy = 51;
  double L = 2.5;
  /// Time levels on the window, including both ends.
  std::size_t n_times = 11;
  double window = 0.05;
  /// Trapezoid points per axis in whitened coordinates.
  std::size_t quad_points = 16;
  /// Half-width of the whitened quadrature box, in standard deviations.
  double quad_half_width = 5.0;
  /// Added to a's diagonal; negative means 1e-3 trace(a).
  double epsilon_reg = -1.0;
  std::optional<Eigen::Matrix2d> a_override;
  int workers = 1;
};

namespace detail {

struct WhitenedRule {
  std::vector<Eigen::Vector2d> nodes;
  std::vector<double> weights;
};

/// Standard normal tensor trapezoid rule; weights renormalized to 1 once the
/// box is known to hold enough mass.
inline WhitenedRule whitened_rule(const KernelOptions& opt) {
  const std::size_t q = opt.quad_points;
  if (q < 2) throw ArgumentError("quadrature needs at least 2 points per axis");
  const double W = opt.quad_half_width;
  const double step = 2.0 * W / static_cast<double>(q - 1);
  std::vector<double> w1(q);
  double mass1 = 0.0;
  for (std::size_t i = 0; i < q; ++i) {
    const double xi = -W + step * static_cast<double>(i);
    const double end = (i == 0 || i == q - 1) ? 0.5 : 1.0;
    w1[i] = end * step * std::exp(-0.5 * xi * xi) / std::sqrt(2.0 * std::numbers::pi);
    mass1 += w1[i];
  }
  const double mass = mass1 * mass1;
  if (mass < 1.0 - 1e-3)
    throw Error("quadrature box too small: kernel mass " + std::to_string(mass) + " < 1 - 1e-3");
  WhitenedRule rule;
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = 0; j < q; ++j) {
      rule.nodes.emplace_back(-W + step * static_cast<double>(i), -W + step * static_cast<double>(j));
      rule.weights.push_back(w1[i] * w1[j] / mass);
    }
  return rule;
}

inline Eigen::Matrix2d kernel_matrix(const FbspdeSpec& spec, const KernelOptions& opt, double t, double x, double y) {
  Eigen::Matrix2d a;
  if (opt.a_override) {
    a = *opt.a_override;
  } else {
    const Mat sx = spec.sigma_bar(t, make_vec({x}));
    const Mat sy = spec.sigma_bar(t, make_vec({y}));
    a << sx.row(0).squaredNorm(), sx.row(0).dot(sy.row(0)), sy.row(0).dot(sx.row(0)), sy.row(0).squaredNorm();
    a *= 0.5;
  }
  const double eps = opt.epsilon_reg >= 0.0 ? opt.epsilon_reg : 1e-3 * a.trace();
  a += eps * Eigen::Matrix2d::Identity();
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(a);
  if (!(es.eigenvalues().minCoeff() > 0.0)) throw ArgumentError("kernel matrix must be symmetric positive definite");
  return a;
}

}  // namespace detail

/// theta = terminal data at every level of the window.
inline KernelField terminal_kernel_field(const FbspdeSpec& spec, const KernelOptions& opt) {
  check_spec(spec);
  if (opt.n_xy < 5 || opt.n_times < 2 || !(opt.L > 0.0) || !(opt.window > 0.0) || opt.window > spec.horizon + 1e-12)
    throw ArgumentError("invalid kernel solver options");
  KernelField f;
  f.n_xy = opt.n_xy;
  f.L = opt.L;
  f.h = 2.0 * opt.L / static_cast<double>(opt.n_xy - 1);
  for (std::size_t i = 0; i < opt.n_xy; ++i) f.grid.push_back(-opt.L + f.h * static_cast<double>(i));
  f.times = uniform_time_grid(spec.horizon - opt.window, spec.horizon, opt.n_times - 1);
  f.times.back() = spec.horizon;
  const auto terminal = detail::terminal_values(spec, f.grid);
  f.values.assign(opt.n_times, terminal);
  return f;
}

/// One application of the integral map v -> theta,
///   theta(t, X) = int G F dZ + int_t^T int G [<b(s, Z, v_x(s, z_y, z_y)), v_X> + f] dZ ds,
/// with G the regularized kernel frozen at (t, X), whitened trapezoid rules in
/// Z and the left-endpoint rule in s.
inline KernelField picard_kernel_step(const KernelField& v, const FbspdeSpec& spec, const KernelOptions& opt) {
  check_spec(spec);
  const auto rule = detail::whitened_rule(opt);
  const std::size_t n = v.n_xy;
  const std::size_t m = v.times.size();
  const double ds = v.times[1] - v.times[0];

  // Integrand g(s_j, x, y) on the grid for every level but the last.
  std::vector<std::vector<double>> g(m - 1);
  for (std::size_t j = 0; j + 1 < m; ++j) {
    const auto d = detail::differentiate(v.values[j], n, v.h);
    const double s = v.times[j];
    g[j].resize(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t l = 0; l < n; ++l) {
        const Vec P = make_vec({d.x[l * n + l]});
        const Vec x = make_vec({v.grid[i]}), y = make_vec({v.grid[l]});
        const std::size_t c = i * n + l;
        double val = spec.b_bar(s, x, P)(0) * d.x[c] + spec.b_bar(s, y, P)(0) * d.y[c] + spec.f_bar(s, x, P);
        if (spec.source) val += spec.source(s, v.grid[i], v.grid[l]);
        g[j][c] = val;
      }
  }

  KernelField out = v;
  const double T = v.times.back();
  out.values[m - 1] = detail::terminal_values(spec, v.grid);
  for (std::size_t k = 0; k + 1 < m; ++k) {
    const double t = v.times[k];
    parallel_for(n, opt.workers, [&](std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i)
        for (std::size_t l = 0; l < n; ++l) {
          const double x = v.grid[i], y = v.grid[l];
          const Eigen::Matrix2d a = detail::kernel_matrix(spec, opt, t, x, y);
          const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(a);
          const Eigen::Matrix2d root = es.operatorSqrt();
          const auto average = [&](const std::vector<double>& f, double tau) {
            const Eigen::Matrix2d R = std::sqrt(2.0 * tau) * root;
            double sum = 0.0;
            for (std::size_t q = 0; q < rule.nodes.size(); ++q) {
              const Eigen::Vector2d z = R * rule.nodes[q];
              sum += rule.weights[q] * v.interpolate(f, x + z(0), y + z(1));
            }
            return sum;
          };
          double val = average(out.values[m - 1], T - t) + ds * g[k][i * n + l];
          for (std::size_t j = k + 1; j + 1 < m; ++j) val += ds * average(g[j], v.times[j] - t);
          out.values[k][i * n + l] = val;
        }
    });
  }
  return out;
}

struct KernelSolveResult {
  KernelField field;
  std::vector<double> update_history;
  int iterations = 0;
};

/// Iterates picard_kernel_step from the terminal field.
inline KernelSolveResult picard_kernel_solve(const FbspdeSpec& spec, const KernelOptions& opt, int iterations,
                                             double tol = 0.0) {
  if (iterations < 1) throw ArgumentError("kernel solver needs at least one iteration");
  KernelSolveResult res;
  res.field = terminal_kernel_field(spec, opt);
  for (int it = 0; it < iterations; ++it) {
    auto next = picard_kernel_step(res.field, spec, opt);
    double update = 0.0;
    for (std::size_t k = 0; k < next.values.size(); ++k)
      update = std::max(update, detail::sup_diff(next.values[k], res.field.values[k]));
    res.field = std::move(next);
    res.update_history.push_back(update);
    res.iterations = it + 1;
    if (update <= tol) break;
  }
  return res;
}

}  // namespace bsmp
