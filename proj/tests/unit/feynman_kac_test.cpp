#include "bsmp/feynman_kac.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace {

using bsmp::ControlPolicy;
using bsmp::make_vec;
using bsmp::Mat;
using bsmp::McConfig;
using bsmp::Vec;

constexpr double kXStar = -0.584624152597072218;
constexpr double kM0 = 0.0862685473028501731;

bsmp::LinearBspdeSpec heat_spec(std::function<double(const Vec&)> terminal) {
  bsmp::LinearBspdeSpec s;
  s.drift = [](double, const Vec&) { return make_vec({0.0}); };
  s.diffusion = [](double, const Vec&) { return Mat::Constant(1, 1, 1.0); };
  s.source = [](double, const Vec&) { return 0.0; };
  s.terminal = std::move(terminal);
  return s;
}

ControlPolicy optimal() { return ControlPolicy::constant(make_vec({kXStar})); }

TEST(FkValue, ConstantTerminalIsExact) {
  const auto s = heat_spec([](const Vec&) { return 3.5; });
  const auto est = bsmp::fk_value(s, 0.2, make_vec({0.4}), McConfig{1000, 10, 1});
  EXPECT_DOUBLE_EQ(est.value, 3.5);
  EXPECT_LT(est.std_error, 1e-12);
}

TEST(FkValue, ThetaAtOriginMatchesClosedForm) {
  const auto p = bsmp::build_example_e();
  const auto est = bsmp::fk_value(bsmp::theta_spec(p, optimal()), 0.0, make_vec({0.0}), McConfig{10000, 50, 2});
  EXPECT_NEAR(est.value, kM0, 1e-12 + 3.0 * est.std_error);
}

TEST(FkValue, TerminalMeanField) {
  const auto p = bsmp::build_example_e();
  const auto est = bsmp::fk_value(bsmp::g_spec(p, optimal(), 0), 0.5, make_vec({0.2}), McConfig{100000, 20, 3});
  EXPECT_NEAR(est.value, 0.2 + 0.5 * kXStar, 3.0 * est.std_error);
}

TEST(FkValue, HeatEquationWithCosineTerminal) {
  const auto s = heat_spec([](const Vec& x) { return std::cos(x(0)); });
  const auto est = bsmp::fk_value(s, 0.0, make_vec({0.3}), McConfig{100000, 10, 4});
  EXPECT_NEAR(est.value, std::exp(-0.5) * std::cos(0.3), 3.0 * est.std_error);
}

TEST(FkValue, TranslatedSpecAgreesWithDirectSpec) {
  const auto p = bsmp::build_example_e();
  const McConfig cfg{50000, 20, 5};
  const Vec x = make_vec({-0.7});
  const auto direct = bsmp::fk_value(bsmp::g_spec(p, optimal(), 0), 0.25, x, cfg);
  const auto shifted = bsmp::fk_value(bsmp::g_translated_spec(p, optimal(), 0), 0.25, x, cfg);
  EXPECT_LT(shifted.std_error, 1e-12);
  EXPECT_NEAR(shifted.value + x(0), direct.value, 3.0 * direct.std_error + 1e-12);
}

// E[p(s, X_s)] = p(t, x) for a source-free field.
TEST(FkValue, TowerProperty) {
  const auto s = heat_spec([](const Vec& x) { return std::cos(x(0)); });
  const auto outer = bsmp::simulate(s.dynamics(), 0.0, make_vec({0.3}), 0.5, McConfig{20000, 5, 6});
  double acc = 0.0;
  for (std::size_t k = 0; k < outer.n_paths(); ++k) acc += std::exp(-0.25) * std::cos(outer.state(k, 5)(0));
  const double via_tower = acc / static_cast<double>(outer.n_paths());
  EXPECT_NEAR(via_tower, std::exp(-0.5) * std::cos(0.3), 4.0 * std::sqrt(0.5 / 20000.0));
}

TEST(FkGradient, TerminalMeanFieldHasUnitGradient) {
  const auto p = bsmp::build_example_e();
  const auto est = bsmp::fk_gradient(bsmp::g_spec(p, optimal(), 0), 0.3, make_vec({0.1}), McConfig{2000, 20, 7});
  ASSERT_TRUE(est.gradient.has_value());
  EXPECT_NEAR((*est.gradient)(0), 1.0, 1e-9);
  EXPECT_LT((*est.gradient_std_error)(0), 1e-10);
}

TEST(FkGradient, ThetaIsFlatInX) {
  const auto p = bsmp::build_example_e();
  const auto est = bsmp::fk_gradient(bsmp::theta_spec(p, optimal()), 0.0, make_vec({0.5}), McConfig{2000, 20, 8});
  EXPECT_NEAR((*est.gradient)(0), 0.0, 1e-10);
}

TEST(FkGradient, HeatQuadraticTerminal) {
  const auto s = heat_spec([](const Vec& x) { return x(0) * x(0); });
  const auto est = bsmp::fk_gradient(s, 0.0, make_vec({1.0}), McConfig{50000, 10, 9});
  EXPECT_NEAR(est.value, 2.0, 3.0 * est.std_error);
  EXPECT_NEAR((*est.gradient)(0), 2.0, 3.0 * (*est.gradient_std_error)(0));
}

TEST(FkGradient, CommonRandomNumbersBeatIndependentSeeds) {
  const auto s = heat_spec([](const Vec& x) { return x(0) * x(0); });
  const double h = 1e-2;
  const auto crn = bsmp::fk_gradient(s, 0.0, make_vec({1.0}), McConfig{5000, 10, 10}, h);
  const auto up = bsmp::fk_value(s, 0.0, make_vec({1.0 + h}), McConfig{5000, 10, 11});
  const auto down = bsmp::fk_value(s, 0.0, make_vec({1.0 - h}), McConfig{5000, 10, 12});
  const double independent = std::hypot(up.std_error, down.std_error) / (2.0 * h);
  EXPECT_LT((*crn.gradient_std_error)(0), independent);
}

TEST(FkGradient, AtHorizonUsesTerminalDifferences) {
  const auto s = heat_spec([](const Vec& x) { return x(0) * x(0); });
  const auto est = bsmp::fk_gradient(s, 1.0, make_vec({0.5}), McConfig{10, 10, 0});
  EXPECT_DOUBLE_EQ(est.value, 0.25);
  EXPECT_NEAR((*est.gradient)(0), 1.0, 1e-10);
  EXPECT_EQ((*est.gradient_std_error)(0), 0.0);
}

TEST(FkGradient, RejectsNonPositiveStep) {
  const auto s = heat_spec([](const Vec& x) { return x(0); });
  EXPECT_THROW(bsmp::fk_gradient(s, 0.0, make_vec({0.0}), McConfig{10, 10, 0}, 0.0), bsmp::ArgumentError);
  EXPECT_THROW(bsmp::fk_gradient(s, 0.0, make_vec({0.0}), McConfig{10, 10, 0}, -1e-3), bsmp::ArgumentError);
}

TEST(FkValue, RejectsTimeOutsideHorizon) {
  const auto s = heat_spec([](const Vec& x) { return x(0); });
  EXPECT_THROW(bsmp::fk_value(s, 1.5, make_vec({0.0}), McConfig{10, 10, 0}), bsmp::ArgumentError);
  EXPECT_THROW(bsmp::fk_value(s, 0.0, make_vec({0.0, 1.0}), McConfig{10, 10, 0}), bsmp::ArgumentError);
}

TEST(FkField, SinglePointUsesDerivedSeed) {
  const auto s = heat_spec([](const Vec& x) { return std::sin(x(0)); });
  const McConfig cfg{3000, 10, 13};
  const std::vector<Vec> pts{make_vec({0.4})};
  const auto field = bsmp::fk_field_on_grid(s, 0.1, pts, cfg);
  McConfig derived = cfg;
  derived.seed = bsmp::rng::derive_seed(13, 0);
  const auto direct = bsmp::fk_value(s, 0.1, pts[0], derived);
  EXPECT_EQ(field[0].value, direct.value);
  EXPECT_EQ(field[0].std_error, direct.std_error);
}

TEST(FkField, TerminalTimeReturnsTerminalValues) {
  const auto s = heat_spec([](const Vec& x) { return x(0); });
  const std::vector<Vec> pts{make_vec({-1.0}), make_vec({0.0}), make_vec({1.0})};
  const auto field = bsmp::fk_field_on_grid(s, 1.0, pts, McConfig{10, 10, 0});
  for (std::size_t i = 0; i < pts.size(); ++i) {
    EXPECT_EQ(field[i].value, pts[i](0));
    EXPECT_EQ(field[i].std_error, 0.0);
  }
}

TEST(FkField, ThetaOnGridMatchesClosedForm) {
  const auto p = bsmp::build_example_e();
  std::vector<Vec> pts;
  for (double x : {-1.0, -0.5, 0.0, 0.5, 1.0}) pts.push_back(make_vec({x}));
  const auto field = bsmp::fk_field_on_grid(bsmp::theta_spec(p, optimal()), 0.4, pts, McConfig{2000, 20, 14}, true);
  for (const auto& est : field) {
    EXPECT_NEAR(est.value, 0.6 * kM0, 1e-12 + 3.0 * est.std_error);
    ASSERT_TRUE(est.gradient.has_value());
  }
  std::ostringstream os;
  bsmp::write_field_csv(os, 0.4, pts, field);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "t,x0,value,std_error,grad0,grad_se0");
}

}  // namespace
