#include "bsmp/problem.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace {

using bsmp::ControlDomain;
using bsmp::ControlPolicy;
using bsmp::make_vec;
using bsmp::Vec;

TEST(ExampleE, Coefficients) {
  const auto p = bsmp::build_example_e();
  EXPECT_EQ(p.state_dim, 1);
  EXPECT_EQ(p.noise_dim, 1);
  EXPECT_DOUBLE_EQ(p.horizon, 1.0);
  EXPECT_DOUBLE_EQ(p.initial_state(0), 0.0);
  EXPECT_DOUBLE_EQ(p.drift(0.3, make_vec({1.7}), make_vec({0.5}))(0), 0.5);
  EXPECT_DOUBLE_EQ(p.diffusion(0.2, make_vec({3.0}))(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(p.terminal_cost(make_vec({2.0})), 0.0);
  EXPECT_DOUBLE_EQ(p.meanfield_cost(make_vec({0.0})), -0.5);
  const auto& box = p.control_domain.as_box();
  EXPECT_DOUBLE_EQ(box.lower(0), -2.0);
  EXPECT_DOUBLE_EQ(box.upper(0), 2.0);
}

TEST(ExampleE, RunningCostVanishesAtMinusOne) {
  const auto p = bsmp::build_example_e();
  for (double t : {0.0, 0.4, 1.0})
    for (double x : {-3.0, 0.0, 5.0}) EXPECT_EQ(p.running_cost(t, make_vec({x}), make_vec({-1.0})), 0.0);
}

TEST(ExampleE, DiffusionIsControlFree) {
  const auto p = bsmp::build_example_e();
  const auto a = p.diffusion(0.5, make_vec({0.1}));
  const auto b = p.diffusion(0.5, make_vec({0.1}));
  EXPECT_EQ(a, b);
}

TEST(ExampleE, MeanfieldGradientMatchesFiniteDifferences) {
  const auto p = bsmp::build_example_e();
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> dist(-3.0, 3.0);
  std::vector<Vec> pts;
  for (int i = 0; i < 50; ++i) pts.push_back(make_vec({dist(gen)}));
  EXPECT_LE(bsmp::meanfield_gradient_error(p, pts), 1e-5);
}

TEST(ControlDomain, BoxValidation) {
  EXPECT_THROW(ControlDomain::box(make_vec({1.0}), make_vec({0.0})), bsmp::ArgumentError);
  EXPECT_THROW(ControlDomain::finite_set({}), bsmp::ArgumentError);
  const auto box = ControlDomain::box(make_vec({-1.0, 0.0}), make_vec({1.0, 2.0}));
  EXPECT_EQ(box.control_dim(), 2);
  EXPECT_TRUE(box.contains(make_vec({0.5, 2.0})));
  EXPECT_FALSE(box.contains(make_vec({1.5, 1.0})));
  EXPECT_EQ(box.project(make_vec({3.0, -1.0})), make_vec({1.0, 0.0}));
}

TEST(ControlDomain, FiniteSetProjection) {
  const auto set = ControlDomain::finite_set({make_vec({-1.0}), make_vec({0.0}), make_vec({2.0})});
  EXPECT_TRUE(set.contains(make_vec({0.0})));
  EXPECT_FALSE(set.contains(make_vec({0.5})));
  EXPECT_EQ(set.project(make_vec({1.2})), make_vec({2.0}));
}

TEST(ControlPolicy, PiecewiseHalfOpenIntervals) {
  const auto pol = ControlPolicy::piecewise_constant({0.3, 0.4}, {make_vec({-0.5}), make_vec({2.0}), make_vec({-0.5})});
  const Vec x = make_vec({0.0});
  EXPECT_DOUBLE_EQ(pol(0.0, x)(0), -0.5);
  EXPECT_DOUBLE_EQ(pol(0.3, x)(0), 2.0);
  EXPECT_DOUBLE_EQ(pol(0.35, x)(0), 2.0);
  EXPECT_DOUBLE_EQ(pol(0.4, x)(0), -0.5);
  EXPECT_EQ(pol.breakpoints().size(), 2u);
}

TEST(ControlPolicy, RejectsMalformedPiecewise) {
  EXPECT_THROW(ControlPolicy::piecewise_constant({0.5}, {make_vec({1.0})}), bsmp::ArgumentError);
  EXPECT_THROW(ControlPolicy::piecewise_constant({0.5, 0.5}, {make_vec({1.0}), make_vec({1.0}), make_vec({1.0})}),
               bsmp::ArgumentError);
}

TEST(ControlPolicy, FeedbackEmitsAdmissibleControlsAfterProjection) {
  const auto p = bsmp::build_example_e();
  const auto pol = ControlPolicy::feedback([&p](double t, const Vec& x) {
    return p.control_domain.project(make_vec({3.0 * x(0) - t}));
  });
  std::vector<double> times{0.0, 0.5, 1.0};
  std::vector<Vec> xs{make_vec({-4.0}), make_vec({0.1}), make_vec({4.0})};
  EXPECT_TRUE(bsmp::policy_respects_domain(p, pol, times, xs));
  const auto raw = ControlPolicy::feedback([](double, const Vec& x) { return make_vec({3.0 * x(0)}); });
  EXPECT_FALSE(bsmp::policy_respects_domain(p, raw, times, xs));
}

TEST(Validate, RejectsBadHorizon) {
  auto p = bsmp::build_example_e();
  p.horizon = 0.0;
  EXPECT_THROW(bsmp::validate(p), bsmp::ArgumentError);
  p.horizon = 1.0;
  p.initial_state = make_vec({0.0, 1.0});
  EXPECT_THROW(bsmp::validate(p), bsmp::ArgumentError);
}

}  // namespace
