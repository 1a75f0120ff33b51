#include "bsmp/smp.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace {

using bsmp::ControlDomain;
using bsmp::ControlPolicy;
using bsmp::CostateSample;
using bsmp::make_vec;
using bsmp::Mat;
using bsmp::McConfig;
using bsmp::Vec;

constexpr double kXStar = -0.584624152597072218;
constexpr double kM0 = 0.0862685473028501731;
constexpr double kJStar = -0.268981783664238897;

double g_prime(double m) { return m * std::exp(-m * m); }

ControlPolicy optimal() { return ControlPolicy::constant(make_vec({kXStar})); }

bsmp::ExtendedCostate scalar_costate(double p) {
  return bsmp::make_costate(make_vec({0.0}), Mat::Identity(1, 1), make_vec({p}));
}

// theta_x = 0, g_x = 1, g = x + u (1 - t) for a constant control u.
bsmp::AnalyticCostateField example_e_field(double u) {
  return bsmp::AnalyticCostateField([u](double t, const Vec& x) {
    auto s = CostateSample::zero(1);
    s.g_x(0, 0) = 1.0;
    s.g_value(0) = x(0) + u * (1.0 - t);
    return s;
  });
}

double grid_argmin(const bsmp::ControlProblem& p, double peff, std::size_t n) {
  double best = 0.0, best_v = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) {
    const double u = -2.0 + 4.0 * static_cast<double>(k) / static_cast<double>(n - 1);
    const double v = bsmp::reduced_hamiltonian(p, 0.0, make_vec({0.0}), make_vec({u}), make_vec({peff}));
    if (v < best_v) {
      best_v = v;
      best = u;
    }
  }
  return best;
}

TEST(ExtendedCostate, PeffMatchesParts) {
  Mat gx(2, 2);
  gx << 1.0, 0.3, -0.2, 0.9;
  const auto c = bsmp::make_costate(make_vec({0.1, -0.4}), gx, make_vec({2.0, -1.5}));
  EXPECT_LE((c.recompute_p_eff() - c.p_eff).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_NEAR(c.p_eff(0), 0.1 + 2.0 - 0.45, 1e-14);
}

TEST(Hamiltonian, ExampleEValues) {
  const auto p = bsmp::build_example_e();
  const Vec x = make_vec({0.3});
  EXPECT_DOUBLE_EQ(bsmp::hamiltonian(p, 0.1, x, make_vec({0.0}), make_vec({1.0}), Mat::Zero(1, 1)), 0.5);
  EXPECT_DOUBLE_EQ(bsmp::hamiltonian(p, 0.1, x, make_vec({-1.0}), make_vec({2.0}), Mat::Constant(1, 1, 3.0)), 1.0);
}

TEST(Hamiltonian, VanishesWithoutCostOrCostate) {
  auto p = bsmp::build_example_e();
  p.running_cost = [](double, const Vec&, const Vec&) { return 0.0; };
  for (double u : {-2.0, 0.5, 2.0})
    EXPECT_EQ(bsmp::hamiltonian(p, 0.0, make_vec({1.0}), make_vec({u}), make_vec({0.0}), Mat::Zero(1, 1)), 0.0);
}

TEST(MinimizeHamiltonian, ExampleEClosedForms) {
  const auto p = bsmp::build_example_e();
  const Vec x = make_vec({0.0});
  const auto at_opt = bsmp::minimize_extended_hamiltonian(p, 0.5, x, scalar_costate(g_prime(kXStar)));
  EXPECT_NEAR(at_opt.u(0), kXStar, 1e-12);
  EXPECT_EQ(at_opt.method, "quadratic");
  EXPECT_NEAR(bsmp::minimize_extended_hamiltonian(p, 0.5, x, scalar_costate(0.0)).u(0), -1.0, 1e-12);
  EXPECT_NEAR(bsmp::minimize_extended_hamiltonian(p, 0.5, x, scalar_costate(5.0)).u(0), -2.0, 1e-12);
}

TEST(MinimizeHamiltonian, ClampAgreesWithGridScan) {
  const auto p = bsmp::build_example_e();
  for (double peff : {-4.3, -1.7, -0.2, 0.9, 2.6}) {
    const auto r = bsmp::minimize_extended_hamiltonian(p, 0.0, make_vec({0.0}), scalar_costate(peff));
    EXPECT_NEAR(r.u(0), grid_argmin(p, peff, 200001), 2.5e-5);
  }
}

TEST(MinimizeHamiltonian, FiniteSetTiesGoToLowestIndex) {
  auto p = bsmp::build_example_e();
  p.control_domain = ControlDomain::finite_set({make_vec({-2.0}), make_vec({0.0}), make_vec({2.0})});
  p.running_cost = [](double, const Vec&, const Vec& u) { return u(0) * u(0); };
  const auto r = bsmp::minimize_extended_hamiltonian(p, 0.0, make_vec({0.0}), scalar_costate(0.0));
  EXPECT_EQ(r.u(0), 0.0);
  EXPECT_EQ(r.method, "scan");
  p.running_cost = [](double, const Vec&, const Vec&) { return 1.0; };
  EXPECT_EQ(bsmp::minimize_extended_hamiltonian(p, 0.0, make_vec({0.0}), scalar_costate(0.0)).u(0), -2.0);
}

TEST(MinimizeHamiltonian, NonQuadraticUsesMultistart) {
  auto p = bsmp::build_example_e();
  p.running_cost = [](double, const Vec&, const Vec& u) { return std::pow(u(0) * u(0) - 1.0, 2); };
  for (double peff : {-0.7, 0.0, 0.3, 1.1}) {
    const auto r = bsmp::minimize_extended_hamiltonian(p, 0.0, make_vec({0.0}), scalar_costate(peff));
    EXPECT_EQ(r.method, "multistart");
    const double g = grid_argmin(p, peff, 400001);
    const auto value_at = [&](double u) {
      return bsmp::reduced_hamiltonian(p, 0.0, make_vec({0.0}), make_vec({u}), make_vec({peff}));
    };
    EXPECT_LE(r.value, value_at(g) + 1e-9) << "peff=" << peff;
  }
}

TEST(MinimizeHamiltonian, CoupledQuadraticInTwoDimensions) {
  bsmp::ControlProblem p = bsmp::build_example_e();
  p.control_domain = ControlDomain::box(make_vec({-1.0, -1.0}), make_vec({1.0, 1.0}));
  p.drift = [](double, const Vec&, const Vec& u) { return make_vec({u(0) + u(1)}); };
  p.running_cost = [](double, const Vec&, const Vec& u) {
    return u(0) * u(0) + u(1) * u(1) + 0.8 * u(0) * u(1);
  };
  const auto r = bsmp::minimize_extended_hamiltonian(p, 0.0, make_vec({0.0}), scalar_costate(3.0));
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 400; ++i)
    for (int j = 0; j <= 400; ++j) {
      const Vec u = make_vec({-1.0 + i / 200.0, -1.0 + j / 200.0});
      best = std::min(best, bsmp::reduced_hamiltonian(p, 0.0, make_vec({0.0}), u, make_vec({3.0})));
    }
  EXPECT_LE(r.value, best + 1e-9);
  EXPECT_TRUE(p.control_domain.contains(r.u));
}

TEST(MinimizeHamiltonian, ConstantShiftInCostMovesOnlyTheValue) {
  auto p = bsmp::build_example_e();
  auto shifted = p;
  shifted.running_cost = [f = p.running_cost](double t, const Vec& x, const Vec& u) { return f(t, x, u) + 7.25; };
  for (double peff : {-3.0, -0.4, 0.0, 1.2}) {
    const auto a = bsmp::minimize_extended_hamiltonian(p, 0.2, make_vec({0.1}), scalar_costate(peff));
    const auto b = bsmp::minimize_extended_hamiltonian(shifted, 0.2, make_vec({0.1}), scalar_costate(peff));
    EXPECT_NEAR(a.u(0), b.u(0), 1e-12);
    EXPECT_NEAR(b.value - a.value, 7.25, 1e-10);
  }
}

TEST(VariationalResidual, ArgminHasTheSmallestResidual) {
  auto p = bsmp::build_example_e();
  p.running_cost = [](double t, const Vec& x, const Vec& u) {
    return std::cosh(u(0) - x(0)) + t * u(0);
  };
  std::mt19937_64 gen(4);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    const double t = 0.5 * (dist(gen) + 2.0) / 2.0;
    const Vec x = make_vec({dist(gen)});
    const auto c = scalar_costate(dist(gen));
    const Vec ubar = make_vec({dist(gen)});
    const auto star = bsmp::minimize_extended_hamiltonian(p, t, x, c);
    const double r_star = bsmp::variational_residual(p, t, x, star.u, ubar, c);
    for (int k = 0; k <= 100; ++k) {
      const Vec u = make_vec({-2.0 + 0.04 * k});
      EXPECT_LE(r_star, bsmp::variational_residual(p, t, x, u, ubar, c) + 1e-9);
    }
  }
}

TEST(VariationalResidual, ExampleEAtOptimum) {
  const auto p = bsmp::build_example_e();
  const auto c = scalar_costate(g_prime(kXStar));
  const Vec x = make_vec({0.4});
  const Vec ubar = make_vec({kXStar});
  EXPECT_EQ(bsmp::variational_residual(p, 0.3, x, ubar, ubar, c), 0.0);
  EXPECT_NEAR(bsmp::variational_residual(p, 0.3, x, make_vec({0.0}), ubar, c), 0.5 * kXStar * kXStar, 1e-12);
  double lowest = 1.0;
  for (int k = 0; k <= 400; ++k)
    lowest = std::min(lowest, bsmp::variational_residual(p, 0.3, x, make_vec({-2.0 + 0.01 * k}), ubar, c));
  EXPECT_GE(lowest, -1e-12);
}

TEST(Spike, PolicyFollowsHalfOpenWindow) {
  const auto p = bsmp::build_example_e();
  const auto pol = bsmp::spike_perturb(p, optimal(), 0.3, 0.1, make_vec({2.0}));
  const Vec x = make_vec({0.0});
  EXPECT_EQ(pol(0.29, x)(0), kXStar);
  EXPECT_EQ(pol(0.3, x)(0), 2.0);
  EXPECT_EQ(pol(0.35, x)(0), 2.0);
  EXPECT_EQ(pol(0.3 + 0.1, x)(0), kXStar);
}

TEST(Spike, FullWindowWithBaseValueIsTheBase) {
  const auto p = bsmp::build_example_e();
  const auto pol = bsmp::spike_perturb(p, optimal(), 0.0, 1.0, make_vec({kXStar}));
  for (double t : {0.0, 0.4, 0.999}) EXPECT_EQ(pol(t, make_vec({1.0}))(0), kXStar);
}

TEST(Spike, RejectsInvalidWindows) {
  const auto p = bsmp::build_example_e();
  EXPECT_THROW(bsmp::spike_perturb(p, optimal(), 0.95, 0.1, make_vec({0.0})), bsmp::ArgumentError);
  EXPECT_THROW(bsmp::spike_perturb(p, optimal(), 1.0, 0.1, make_vec({0.0})), bsmp::ArgumentError);
  EXPECT_THROW(bsmp::spike_perturb(p, optimal(), 0.2, 0.0, make_vec({0.0})), bsmp::ArgumentError);
  EXPECT_THROW(bsmp::spike_perturb(p, optimal(), 0.2, 0.1, make_vec({3.0})), bsmp::ArgumentError);
}

TEST(SpikeCheck, TrivialSpikeIsExactlyZero) {
  const auto p = bsmp::build_example_e();
  auto field = example_e_field(kXStar);
  const auto spike = bsmp::make_spike(p, optimal(), 0.2, 0.1, make_vec({kXStar}));
  const auto r = bsmp::spike_difference_check(p, spike, field, McConfig{5000, 50, 1});
  EXPECT_EQ(r.lhs, 0.0);
  EXPECT_EQ(r.rhs, 0.0);
  EXPECT_TRUE(r.pass);
}

// Exact spike difference for the example: eps (f(v) - f(u)) + G(X* + eps (v - X*)) - G(X*).
TEST(SpikeCheck, ExampleEIdentityWithMonteCarloFields) {
  const auto p = bsmp::build_example_e();
  bsmp::FieldOptions fo;
  fo.n_paths = 500;
  bsmp::MonteCarloCostateField field(p, optimal(), fo);
  const auto spike = bsmp::make_spike(p, optimal(), 0.2, 0.1, make_vec({1.0}));
  const auto r = bsmp::spike_difference_check(p, spike, field, McConfig{20000, 100, 11});
  EXPECT_TRUE(r.pass) << r.lhs << " vs " << r.rhs << " se " << r.combined_std_error;
  EXPECT_NEAR(r.lhs, 0.1296618175, 3.0 * r.lhs_std_error + 1e-6);
  EXPECT_NEAR(r.rhs, 0.1296618175, 3.0 * r.rhs_std_error + 1e-4);
}

TEST(SpikeCheck, CostNeverDecreasesAtTheOptimum) {
  const auto p = bsmp::build_example_e();
  auto field = example_e_field(kXStar);
  for (double v : {-2.0, 0.0, 1.0}) {
    const auto spike = bsmp::make_spike(p, optimal(), 0.5, 0.05, make_vec({v}));
    const auto r = bsmp::spike_difference_check(p, spike, field, McConfig{20000, 100, 12});
    EXPECT_GE(r.lhs, -3.0 * r.lhs_std_error);
    EXPECT_TRUE(r.pass) << "v=" << v;
  }
}

TEST(SpikeCheck, OffGridWindowIsAnError) {
  const auto p = bsmp::build_example_e();
  auto field = example_e_field(kXStar);
  const auto spike = bsmp::make_spike(p, optimal(), 0.203, 0.1, make_vec({1.0}));
  EXPECT_THROW(bsmp::spike_difference_check(p, spike, field, McConfig{100, 100, 1}), bsmp::GridMismatchError);
}

TEST(Objective, FormulaValues) {
  const auto p = bsmp::build_example_e();
  EXPECT_EQ(bsmp::objective_via_bspde(0.0, make_vec({0.3}), [](const Vec&) { return 0.0; }), 0.0);
  EXPECT_NEAR(bsmp::objective_via_bspde(kM0, make_vec({kXStar}), p.meanfield_cost), kJStar, 1e-15);
}

TEST(Objective, FormulaAgreesWithDirectMonteCarlo) {
  const auto p = bsmp::build_example_e();
  const auto mc = bsmp::estimate_cost(p, optimal(), McConfig{1000000, 10, 99});
  EXPECT_NEAR(bsmp::objective_via_bspde(kM0, make_vec({kXStar}), p.meanfield_cost), mc.mean,
              3.0 * mc.total_std_error);
}

TEST(Adjoint, ExampleEIsConstant) {
  const auto p = bsmp::build_example_e();
  auto field = example_e_field(kXStar);
  const auto times = bsmp::uniform_time_grid(0.0, 1.0, 10);
  std::vector<Vec> states;
  for (double t : times) states.push_back(make_vec({0.3 * t}));
  const auto adj = bsmp::adjoint_along_trajectory(p, field, times, states, make_vec({kXStar}));
  for (const auto& v : adj) EXPECT_NEAR(v(0), g_prime(kXStar), 1e-15);
  EXPECT_NEAR(g_prime(kXStar), -0.415375847402927782, 1e-15);
}

TEST(Adjoint, TerminalValueUsesExactGradients) {
  auto p = bsmp::build_example_e();
  p.terminal_cost = [](const Vec& x) { return x(0); };
  p.terminal_gradient = [](const Vec&) { return make_vec({1.0}); };
  p.meanfield_cost = [](const Vec&) { return 0.0; };
  p.meanfield_gradient = [](const Vec&) { return make_vec({0.0}); };
  auto field = example_e_field(0.0);
  const std::vector<double> times{0.5, 1.0};
  const std::vector<Vec> states{make_vec({0.2}), make_vec({-0.7})};
  const auto adj = bsmp::adjoint_along_trajectory(p, field, times, states, make_vec({0.0}));
  EXPECT_EQ(adj.back()(0), 1.0);
}

TEST(Adjoint, HeatProblemMatchesConditionalExpectation) {
  auto p = bsmp::build_example_e();
  p.drift = [](double, const Vec&, const Vec&) { return make_vec({0.0}); };
  p.running_cost = [](double, const Vec&, const Vec&) { return 0.0; };
  p.terminal_cost = [](const Vec& x) { return x(0) * x(0); };
  p.terminal_gradient = [](const Vec& x) { return make_vec({2.0 * x(0)}); };
  p.meanfield_cost = [](const Vec&) { return 0.0; };
  p.meanfield_gradient = [](const Vec&) { return make_vec({0.0}); };
  const auto pol = ControlPolicy::constant(make_vec({0.0}));
  bsmp::FieldOptions fo;
  fo.n_paths = 4000;
  fo.points_per_dim = 5;
  bsmp::MonteCarloCostateField field(p, pol, fo);
  const auto batch = bsmp::simulate(p, pol, 0.0, p.initial_state, 1.0, McConfig{1, 4, 3});
  std::vector<Vec> states;
  for (std::size_t k = 0; k <= 4; ++k) states.push_back(batch.state(0, k));
  const auto adj = bsmp::adjoint_along_trajectory(p, field, batch.times(), states, make_vec({0.0}));
  for (std::size_t k = 0; k < 4; ++k) {
    const auto s = field.at(batch.times()[k], states[k]);
    EXPECT_NEAR(adj[k](0), 2.0 * states[k](0), 3.0 * s.theta_x_se(0) + 1e-9) << "k=" << k;
  }
  EXPECT_DOUBLE_EQ(adj[4](0), 2.0 * states[4](0));
}

TEST(Adjoint, MismatchedGridsAreRejected) {
  const std::vector<Vec> th{make_vec({0.0})};
  const std::vector<Mat> gx{Mat::Identity(1, 1), Mat::Identity(1, 1)};
  const std::vector<double> times{0.0, 1.0};
  EXPECT_THROW(bsmp::assemble_adjoint(th, gx, make_vec({0.0}), times), bsmp::GridMismatchError);
}

TEST(SmpReport, OptimumPassesWithExactTerminalMean) {
  const auto p = bsmp::build_example_e();
  bsmp::SmpOptions opt;
  opt.cfg = McConfig{20000, 100, 5};
  opt.terminal_mean = make_vec({kXStar});
  opt.field.n_paths = 200;
  const auto rep = bsmp::build_smp_report(p, optimal(), opt);
  EXPECT_TRUE(rep.pass);
  EXPECT_EQ(rep.residuals.size(), 21u);
  EXPECT_EQ(rep.controls.size(), 41u);
  EXPECT_GE(rep.min_residual, -1e-10);
  EXPECT_LE(rep.max_gap, 1e-10);
  EXPECT_NEAR(rep.objective_via_formula, kJStar, 3.0 * rep.objective_formula_std_error + 1e-12);
  EXPECT_NEAR(rep.objective_via_mc.mean, kJStar, 3.0 * rep.objective_via_mc.total_std_error);
}

TEST(SmpReport, OptimumPassesWithSampledTerminalMean) {
  const auto p = bsmp::build_example_e();
  bsmp::SmpOptions opt;
  opt.cfg = McConfig{100000, 20, 6};
  opt.n_times = 11;
  opt.field.n_paths = 200;
  const auto rep = bsmp::build_smp_report(p, optimal(), opt);
  EXPECT_TRUE(rep.pass) << rep.min_residual << " " << rep.max_gap;
}

TEST(SmpReport, ZeroControlIsRejected) {
  const auto p = bsmp::build_example_e();
  bsmp::SmpOptions opt;
  opt.cfg = McConfig{20000, 100, 7};
  opt.field.n_paths = 200;
  const auto rep = bsmp::build_smp_report(p, ControlPolicy::constant(make_vec({0.0})), opt);
  EXPECT_FALSE(rep.pass);
  EXPECT_LE(rep.min_residual, -0.05);
  EXPECT_NEAR(rep.minimizers.front()(0), -1.0, 2e-2);
}

TEST(Sufficiency, ExampleEOptimum) {
  const auto p = bsmp::build_example_e();
  auto field = example_e_field(kXStar);
  bsmp::SufficiencyOptions opt;
  opt.terminal_mean = make_vec({kXStar});
  const auto rep = bsmp::sufficient_check(p, optimal(), field, opt);
  EXPECT_TRUE(rep.first_order_ok);
  EXPECT_TRUE(rep.hamiltonian_convex);
  EXPECT_TRUE(rep.terminal_cost_convex);
  // G = -exp(-m^2)/2 is concave for |m| > 1/sqrt(2), so the midpoint test must flag it.
  EXPECT_FALSE(rep.meanfield_cost_convex);
  EXPECT_FALSE(rep.sufficient);
}

TEST(Sufficiency, ZeroControlViolatesFirstOrderEverywhere) {
  const auto p = bsmp::build_example_e();
  auto field = example_e_field(0.0);
  bsmp::SufficiencyOptions opt;
  const auto rep = bsmp::sufficient_check(p, ControlPolicy::constant(make_vec({0.0})), field, opt);
  EXPECT_FALSE(rep.first_order_ok);
  EXPECT_EQ(rep.first_order_violation_times, opt.n_times);
}

TEST(Sufficiency, ConcaveRunningCostFailsMidpointTest) {
  auto p = bsmp::build_example_e();
  p.running_cost = [](double, const Vec&, const Vec& u) { return -(u(0) + 1.0) * (u(0) + 1.0); };
  auto field = example_e_field(kXStar);
  const auto rep = bsmp::sufficient_check(p, optimal(), field);
  EXPECT_FALSE(rep.hamiltonian_convex);
}

TEST(Sufficiency, FiniteDomainIsRejected) {
  auto p = bsmp::build_example_e();
  p.control_domain = ControlDomain::finite_set({make_vec({0.0}), make_vec({1.0})});
  auto field = example_e_field(0.0);
  try {
    bsmp::sufficient_check(p, ControlPolicy::constant(make_vec({0.0})), field);
    FAIL();
  } catch (const bsmp::ArgumentError& e) {
    EXPECT_STREQ(e.what(), "sufficiency check requires convex domain");
  }
}

}  // namespace
