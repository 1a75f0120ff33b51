#pragma once

#include "bsmp/core.hpp"
#include "bsmp/feynman_kac.hpp"
#include "bsmp/problem.hpp"
#include "bsmp/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <vector>

namespace bsmp {

/// Pointwise values of the backward fields under a fixed policy: theta_x,
/// the columns g_x^i, the conditional terminal mean g and their standard errors.
struct CostateSample {
  Vec theta_x;
  Mat g_x;
  Vec g_value;
  Vec theta_x_se;
  Mat g_x_se;

  static CostateSample zero(int n) {
    return {Vec::Zero(n), Mat::Zero(n, n), Vec::Zero(n), Vec::Zero(n), Mat::Zero(n, n)};
  }
};

/// Source of theta_x, g_x and g along a trajectory. `prepare` announces the
/// states that will be queried at time t before any `at(t, .)` call.
class CostateField {
 public:
  virtual ~CostateField() = default;
  virtual void prepare(double /*t*/, std::span<const Vec> /*states*/) {}
  virtual CostateSample at(double t, const Vec& x) const = 0;
};

/// Closed-form fields.
class AnalyticCostateField : public CostateField {
 public:
  using Fn = std::function<CostateSample(double, const Vec&)>;
  explicit AnalyticCostateField(Fn fn) : fn_(std::move(fn)) {
    if (!fn_) throw ArgumentError("analytic costate field needs a callable");
  }
  CostateSample at(double t, const Vec& x) const override { return fn_(t, x); }

 private:
  Fn fn_;
};

struct FieldOptions {
  std::size_t n_paths = 2000;
  /// Inner Euler steps per unit of remaining horizon (at least one step).
  double steps_per_unit_time = 100.0;
  int points_per_dim = 8;
  /// Fraction of the state spread added on each side of the grid.
  double padding = 0.25;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

/// theta_x, g_x and g from fk_gradient on a small tensor grid per time,
/// multilinearly interpolated (clamped at the grid edge). Grid ranges follow
/// the states passed to the first `prepare` call for that time.
class MonteCarloCostateField : public CostateField {
 public:
  MonteCarloCostateField(const ControlProblem& problem, const ControlPolicy& policy, FieldOptions opt = {})
      : n_(problem.state_dim), horizon_(problem.horizon), opt_(opt), theta_(theta_spec(problem, policy)) {
    if (opt_.points_per_dim < 2) throw ArgumentError("costate field needs at least 2 points per dimension");
    if (opt_.n_paths < 2) throw ArgumentError("costate field needs at least 2 inner paths");
    for (int i = 0; i < n_; ++i) g_.push_back(g_translated_spec(problem, policy, i));
  }

  void prepare(double t, std::span<const Vec> states) override {
    if (nodes_.count(t) != 0) return;
    if (states.empty()) throw ArgumentError("costate field prepare needs at least one state");
    Vec lo = states.front(), hi = states.front();
    for (const auto& x : states) {
      lo = lo.cwiseMin(x);
      hi = hi.cwiseMax(x);
    }
    for (int i = 0; i < n_; ++i) {
      const double pad = std::max(opt_.padding * (hi(i) - lo(i)), 0.05);
      lo(i) -= pad;
      hi(i) += pad;
    }
    nodes_.emplace(t, build_node(t, lo, hi));
  }

  CostateSample at(double t, const Vec& x) const override {
    const auto it = nodes_.find(t);
    if (it == nodes_.end()) throw ArgumentError("costate field queried at a time that was not prepared");
    return interpolate(it->second, x);
  }

  /// Number of fk_gradient evaluations spent so far.
  std::size_t evaluations() const { return evaluations_; }

 private:
  struct Node {
    Vec lo;
    Vec hi;
    std::vector<CostateSample> samples;
  };

  std::size_t grid_size() const {
    std::size_t s = 1;
    for (int i = 0; i < n_; ++i) s *= static_cast<std::size_t>(opt_.points_per_dim);
    return s;
  }

  Vec grid_point(const Node& node, std::size_t flat) const {
    Vec x(n_);
    const auto p = static_cast<std::size_t>(opt_.points_per_dim);
    for (int i = 0; i < n_; ++i) {
      const auto k = flat % p;
      flat /= p;
      x(i) = node.lo(i) + (node.hi(i) - node.lo(i)) * static_cast<double>(k) / static_cast<double>(p - 1);
    }
    return x;
  }

  Node build_node(double t, const Vec& lo, const Vec& hi) {
    Node node{lo, hi, {}};
    const double remaining = std::max(horizon_ - t, 0.0);
    McConfig cfg;
    cfg.n_paths = opt_.n_paths;
    cfg.n_steps = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(remaining * opt_.steps_per_unit_time - 1e-9)));
    cfg.workers = opt_.workers;
    const auto node_seed = rng::derive_seed(opt_.seed, static_cast<std::uint64_t>(std::llround(t * 1e9)));
    const std::size_t count = grid_size();
    node.samples.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
      const Vec x = grid_point(node, k);
      CostateSample s = CostateSample::zero(n_);
      cfg.seed = rng::derive_seed(node_seed, k * static_cast<std::size_t>(n_ + 1));
      const auto th = fk_gradient(theta_, t, x, cfg);
      s.theta_x = *th.gradient;
      s.theta_x_se = *th.gradient_std_error;
      for (int i = 0; i < n_; ++i) {
        cfg.seed = rng::derive_seed(node_seed, k * static_cast<std::size_t>(n_ + 1) + static_cast<std::size_t>(i) + 1);
        const auto gi = fk_gradient(g_[static_cast<std::size_t>(i)], t, x, cfg);
        s.g_x.col(i) = *gi.gradient + unit_vec(n_, i);
        s.g_x_se.col(i) = *gi.gradient_std_error;
        s.g_value(i) = x(i) + gi.value;
      }
      evaluations_ += static_cast<std::size_t>(n_ + 1);
      node.samples.push_back(std::move(s));
    }
    return node;
  }

  CostateSample interpolate(const Node& node, const Vec& x) const {
    const int p = opt_.points_per_dim;
    std::array<int, kMaxDim> cell{};
    std::array<double, kMaxDim> frac{};
    for (int i = 0; i < n_; ++i) {
      const double h = (node.hi(i) - node.lo(i)) / static_cast<double>(p - 1);
      const double s = std::clamp((x(i) - node.lo(i)) / h, 0.0, static_cast<double>(p - 1));
      cell[static_cast<std::size_t>(i)] = std::min(static_cast<int>(s), p - 2);
      frac[static_cast<std::size_t>(i)] = s - cell[static_cast<std::size_t>(i)];
    }
    CostateSample out = CostateSample::zero(n_);
    for (int corner = 0; corner < (1 << n_); ++corner) {
      double w = 1.0;
      std::size_t flat = 0, stride = 1;
      for (int i = 0; i < n_; ++i) {
        const bool up = (corner >> i) & 1;
        const auto ii = static_cast<std::size_t>(i);
        w *= up ? frac[ii] : 1.0 - frac[ii];
        flat += static_cast<std::size_t>(cell[ii] + (up ? 1 : 0)) * stride;
        stride *= static_cast<std::size_t>(p);
      }
      if (w == 0.0) continue;
      const auto& s = node.samples[flat];
      out.theta_x += w * s.theta_x;
      out.g_x += w * s.g_x;
      out.g_value += w * s.g_value;
      out.theta_x_se += w * s.theta_x_se;
      out.g_x_se += w * s.g_x_se;
    }
    return out;
  }

  int n_;
  double horizon_;
  FieldOptions opt_;
  LinearBspdeSpec theta_;
  std::vector<LinearBspdeSpec> g_;
  std::map<double, Node> nodes_;
  std::size_t evaluations_ = 0;
};

}  // namespace bsmp
