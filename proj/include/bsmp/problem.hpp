#pragma once

#include "bsmp/core.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace bsmp {

/// The admissible control set U: either a finite list of control vectors or
/// a closed box [lower, upper].
class ControlDomain {
 public:
  struct FiniteSet {
    std::vector<Vec> points;
  };
  struct Box {
    Vec lower;
    Vec upper;
  };

  static ControlDomain finite_set(std::vector<Vec> points) {
    if (points.empty()) throw ArgumentError("finite control set must be non-empty");
    const auto dim = points.front().size();
    for (const auto& p : points)
      if (p.size() != dim) throw ArgumentError("finite control set has mixed dimensions");
    return ControlDomain(FiniteSet{std::move(points)});
  }

  static ControlDomain box(Vec lower, Vec upper) {
    if (lower.size() != upper.size() || lower.size() == 0)
      throw ArgumentError("box bounds must have equal, positive length");
    if ((lower.array() > upper.array()).any())
      throw ArgumentError("box requires lower <= upper componentwise");
    return ControlDomain(Box{std::move(lower), std::move(upper)});
  }

  int control_dim() const {
    return std::visit(
        [](const auto& d) -> int {
          if constexpr (std::is_same_v<std::decay_t<decltype(d)>, Box>)
            return static_cast<int>(d.lower.size());
          else
            return static_cast<int>(d.points.front().size());
        },
        rep_);
  }

  bool is_box() const { return std::holds_alternative<Box>(rep_); }
  const Box& as_box() const { return std::get<Box>(rep_); }
  const FiniteSet& as_finite_set() const { return std::get<FiniteSet>(rep_); }

  bool contains(const Vec& u, double tol = 1e-12) const {
    if (u.size() != control_dim()) return false;
    if (is_box()) {
      const auto& b = as_box();
      return ((u.array() >= b.lower.array() - tol) && (u.array() <= b.upper.array() + tol)).all();
    }
    for (const auto& p : as_finite_set().points)
      if ((p - u).lpNorm<Eigen::Infinity>() <= tol) return true;
    return false;
  }

  /// Nearest admissible control (clamp for a box, closest point for a set).
  Vec project(const Vec& u) const {
    if (is_box()) {
      const auto& b = as_box();
      return u.cwiseMax(b.lower).cwiseMin(b.upper);
    }
    const auto& pts = as_finite_set().points;
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double d = (pts[i] - u).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    return pts[best];
  }

 private:
  explicit ControlDomain(std::variant<FiniteSet, Box> rep) : rep_(std::move(rep)) {}
  std::variant<FiniteSet, Box> rep_;
};

/// A Markov control u(t, x). Piecewise-constant values live on half-open
/// intervals [b_j, b_{j+1}); the value before the first breakpoint is values[0].
class ControlPolicy {
 public:
  using FeedbackFn = std::function<Vec(double, const Vec&)>;

  static ControlPolicy constant(Vec u) { return ControlPolicy(Constant{std::move(u)}); }

  static ControlPolicy piecewise_constant(std::vector<double> breakpoints, std::vector<Vec> values) {
    if (values.size() != breakpoints.size() + 1)
      throw ArgumentError("piecewise policy needs exactly one more value than breakpoints");
    for (std::size_t i = 1; i < breakpoints.size(); ++i)
      if (!(breakpoints[i] > breakpoints[i - 1]))
        throw ArgumentError("piecewise policy breakpoints must be strictly increasing");
    return ControlPolicy(Piecewise{std::move(breakpoints), std::move(values)});
  }

  /// `breakpoints` lists the times where the feedback may jump; simulations
  /// require them to sit on the time grid.
  static ControlPolicy feedback(FeedbackFn fn, std::vector<double> breakpoints = {}) {
    if (!fn) throw ArgumentError("feedback policy needs a callable");
    return ControlPolicy(Feedback{std::move(fn), std::move(breakpoints)});
  }

  Vec operator()(double t, const Vec& x) const {
    switch (rep_.index()) {
      case 0:
        return std::get<Constant>(rep_).u;
      case 1: {
        const auto& p = std::get<Piecewise>(rep_);
        const auto it = std::upper_bound(p.breakpoints.begin(), p.breakpoints.end(), t);
        return p.values[static_cast<std::size_t>(it - p.breakpoints.begin())];
      }
      default:
        return std::get<Feedback>(rep_).fn(t, x);
    }
  }

  std::span<const double> breakpoints() const {
    if (const auto* p = std::get_if<Piecewise>(&rep_)) return p->breakpoints;
    if (const auto* f = std::get_if<Feedback>(&rep_)) return f->breakpoints;
    return {};
  }

  bool is_constant() const { return std::holds_alternative<Constant>(rep_); }
  bool is_piecewise() const { return std::holds_alternative<Piecewise>(rep_); }
  bool is_feedback() const { return std::holds_alternative<Feedback>(rep_); }

  const Vec& constant_value() const { return std::get<Constant>(rep_).u; }
  std::span<const Vec> piecewise_values() const { return std::get<Piecewise>(rep_).values; }

 private:
  struct Constant {
    Vec u;
  };
  struct Piecewise {
    std::vector<double> breakpoints;
    std::vector<Vec> values;
  };
  struct Feedback {
    FeedbackFn fn;
    std::vector<double> breakpoints;
  };
  template <class Rep>
  explicit ControlPolicy(Rep rep) : rep_(std::move(rep)) {}
  std::variant<Constant, Piecewise, Feedback> rep_;
};

/// The controlled system dX = b(t,X,u)dt + sigma(t,X)dW with cost
/// E[int f dt + h(X(T))] + G(E[X(T)]).
struct ControlProblem {
  using DriftFn = std::function<Vec(double, const Vec&, const Vec&)>;
  using DiffusionFn = std::function<Mat(double, const Vec&)>;
  using RunningCostFn = std::function<double(double, const Vec&, const Vec&)>;
  using ScalarFieldFn = std::function<double(const Vec&)>;
  using GradientFn = std::function<Vec(const Vec&)>;

  std::string name;
  int state_dim = 1;
  int noise_dim = 1;
  double horizon = 1.0;
  Vec initial_state;
  DriftFn drift;
  DiffusionFn diffusion;
  RunningCostFn running_cost;
  ScalarFieldFn terminal_cost;
  GradientFn terminal_gradient;  // optional; central differences when empty
  ScalarFieldFn meanfield_cost;
  GradientFn meanfield_gradient;
  ControlDomain control_domain = ControlDomain::box(make_vec({-1.0}), make_vec({1.0}));

  /// h_x(x); analytic when supplied.
  Vec terminal_grad(const Vec& x) const {
    if (terminal_gradient) return terminal_gradient(x);
    Vec g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double h = 1e-5 * std::max(1.0, std::abs(x(i)));
      Vec xp = x, xm = x;
      xp(i) += h;
      xm(i) -= h;
      g(i) = (terminal_cost(xp) - terminal_cost(xm)) / (2.0 * h);
    }
    return g;
  }

  /// Hessian of G by central differences of its gradient (symmetrized).
  Mat meanfield_hessian(const Vec& m) const {
    const auto n = m.size();
    Mat hess(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double h = 1e-5 * std::max(1.0, std::abs(m(j)));
      Vec mp = m, mm = m;
      mp(j) += h;
      mm(j) -= h;
      hess.col(j) = (meanfield_gradient(mp) - meanfield_gradient(mm)) / (2.0 * h);
    }
    return Mat((hess + hess.transpose()) / 2.0);
  }
};

/// Throws ArgumentError when dimensions, horizon or callables are inconsistent.
inline void validate(const ControlProblem& p) {
  if (p.state_dim < 1 || p.state_dim > kMaxDim) throw ArgumentError("state_dim must be in [1, 4]");
  if (p.noise_dim < 1 || p.noise_dim > kMaxDim) throw ArgumentError("noise_dim must be in [1, 4]");
  if (!(p.horizon > 0.0) || !std::isfinite(p.horizon))
    throw ArgumentError("horizon must be positive and finite");
  if (p.initial_state.size() != p.state_dim)
    throw ArgumentError("initial_state length differs from state_dim");
  if (!p.drift || !p.diffusion || !p.running_cost || !p.terminal_cost || !p.meanfield_cost ||
      !p.meanfield_gradient)
    throw ArgumentError("control problem is missing a coefficient function");
  if (p.control_domain.control_dim() > kMaxDim) throw ArgumentError("control_dim must be <= 4");
}

/// Largest relative error between G's declared gradient and central
/// differences of G over `points`.
inline double meanfield_gradient_error(const ControlProblem& p, std::span<const Vec> points) {
  double worst = 0.0;
  for (const auto& m : points) {
    const Vec g = p.meanfield_gradient(m);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double h = 1e-5 * std::max(1.0, std::abs(m(i)));
      Vec mp = m, mm = m;
      mp(i) += h;
      mm(i) -= h;
      const double fd = (p.meanfield_cost(mp) - p.meanfield_cost(mm)) / (2.0 * h);
      const double scale = std::max({std::abs(fd), std::abs(g(i)), 1e-8});
      worst = std::max(worst, std::abs(fd - g(i)) / scale);
    }
  }
  return worst;
}

/// True when the policy emits admissible controls at every (t, x) sample.
inline bool policy_respects_domain(const ControlProblem& p, const ControlPolicy& policy,
                                   std::span<const double> times, std::span<const Vec> states) {
  for (double t : times)
    for (const auto& x : states)
      if (!p.control_domain.contains(policy(t, x), 1e-12)) return false;
  return true;
}

struct ExampleEOptions {
  double horizon = 1.0;
  double initial_state = 0.0;
  double sigma = 1.0;
  double control_lower = -2.0;
  double control_upper = 2.0;
};

/// dX = u dt + dW on [0, 1], X(0) = 0, U = [-2, 2],
/// J(u) = E[int 1/2 (u+1)^2 dt] - 1/2 exp(-E[X(1)]^2).
inline ControlProblem build_example_e(const ExampleEOptions& opt = {}) {
  ControlProblem p;
  p.name = "example_e";
  p.state_dim = 1;
  p.noise_dim = 1;
  p.horizon = opt.horizon;
  p.initial_state = make_vec({opt.initial_state});
  p.drift = [](double, const Vec&, const Vec& u) { return u; };
  const double sigma = opt.sigma;
  p.diffusion = [sigma](double, const Vec&) { return Mat::Constant(1, 1, sigma); };
  p.running_cost = [](double, const Vec&, const Vec& u) {
    return 0.5 * (u(0) + 1.0) * (u(0) + 1.0);
  };
  p.terminal_cost = [](const Vec&) { return 0.0; };
  p.terminal_gradient = [](const Vec& x) { return Vec(Vec::Zero(x.size())); };
  p.meanfield_cost = [](const Vec& m) { return -0.5 * std::exp(-m(0) * m(0)); };
  p.meanfield_gradient = [](const Vec& m) { return make_vec({m(0) * std::exp(-m(0) * m(0))}); };
  p.control_domain = ControlDomain::box(make_vec({opt.control_lower}), make_vec({opt.control_upper}));
  validate(p);
  return p;
}

}  // namespace bsmp
