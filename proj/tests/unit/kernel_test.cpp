#include "bsmp/kernel.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

namespace {

using Eigen::Matrix2d;
using Eigen::Vector2d;

TEST(Gamma0, PeakValue) {
  Matrix2d a;
  a << 0.9, 0.3, 0.3, 0.6;
  const Vector2d X(0.2, -0.1);
  EXPECT_NEAR(bsmp::gamma0_kernel(0.1, X, 0.6, X, a), 1.0 / (4.0 * std::numbers::pi * 0.5 * std::sqrt(a.determinant())),
              1e-14);
}

TEST(Gamma0, DecaysAwayFromCentre) {
  const Matrix2d I = Matrix2d::Identity();
  const double centre = bsmp::gamma0_kernel(0.0, Vector2d(0, 0), 1.0, Vector2d(0, 0), I);
  const double off = bsmp::gamma0_kernel(0.0, Vector2d(0, 0), 1.0, Vector2d(2, 0), I);
  EXPECT_NEAR(off / centre, std::exp(-1.0), 1e-14);
}

TEST(Gamma0, FourDimensionalNormalization) {
  const Eigen::MatrixXd a = Eigen::MatrixXd::Identity(4, 4) * 2.0;
  const Eigen::VectorXd X = Eigen::VectorXd::Zero(4);
  EXPECT_NEAR(bsmp::gamma0_kernel(0.0, X, 0.5, X, a), std::pow(2.0 * std::numbers::pi, -2.0) / 4.0, 1e-15);
}

TEST(Gamma0, NormalizesToOne) {
  EXPECT_NEAR(bsmp::kernel_mass(1.0, Vector2d(0.3, -0.2), Matrix2d::Identity(), 20.0, 401), 1.0, 1e-6);
}

TEST(Gamma0, SymmetricInItsPoints) {
  Matrix2d a;
  a << 0.7, 0.2, 0.2, 0.5;
  const Vector2d X(0.4, -1.0), Z(-0.3, 0.8);
  EXPECT_DOUBLE_EQ(bsmp::gamma0_kernel(0.0, X, 0.7, Z, a), bsmp::gamma0_kernel(0.0, Z, 0.7, X, a));
}

TEST(Gamma0, ChapmanKolmogorov) {
  Matrix2d a;
  a << 0.7, 0.2, 0.2, 0.5;
  EXPECT_LE(bsmp::chapman_kolmogorov_gap(0.0, Vector2d(0.1, 0.2), 0.4, 1.0, Vector2d(-0.3, 0.5), a, 12.0, 301), 1e-4);
}

TEST(Gamma0, RejectsBadInput) {
  const Vector2d X(0, 0);
  Matrix2d singular;
  singular << 0.5, 0.5, 0.5, 0.5;
  Matrix2d asym;
  asym << 1.0, 0.1, 0.0, 1.0;
  EXPECT_THROW(bsmp::gamma0_kernel(0.0, X, 1.0, X, singular), bsmp::ArgumentError);
  EXPECT_THROW(bsmp::gamma0_kernel(0.0, X, 1.0, X, asym), bsmp::ArgumentError);
  EXPECT_THROW(bsmp::gamma0_kernel(1.0, X, 1.0, X, Matrix2d::Identity()), bsmp::ArgumentError);
  EXPECT_THROW(bsmp::gamma0_kernel(0.0, Eigen::VectorXd::Zero(3), 1.0, Eigen::VectorXd::Zero(3),
                                   Eigen::MatrixXd::Identity(3, 3)),
               bsmp::ArgumentError);
}

TEST(KernelPicard, ConstantDataStayConstant) {
  const auto spec = bsmp::constant_spec(0.8, 0.05);
  bsmp::KernelOptions opt;
  opt.n_xy = 21;
  const auto v = bsmp::terminal_kernel_field(spec, opt);
  const auto out = bsmp::picard_kernel_step(v, spec, opt);
  for (const auto& level : out.values)
    for (double x : level) EXPECT_NEAR(x, 0.8, 1e-12);
}

TEST(KernelPicard, HeatMeanIdentity) {
  auto spec = bsmp::constant_spec(0.0, 1.0);
  spec.F_bar = [](const bsmp::Vec& x) { return x(0); };
  bsmp::KernelOptions opt;
  opt.n_xy = 41;
  opt.L = 6.0;
  opt.window = 1.0;
  opt.n_times = 5;
  opt.a_override = 0.5 * Matrix2d::Identity();
  auto v = bsmp::terminal_kernel_field(spec, opt);
  for (auto& level : v.values) std::fill(level.begin(), level.end(), 0.0);
  const auto out = bsmp::picard_kernel_step(v, spec, opt);
  for (std::size_t k = 0; k < out.times.size(); ++k)
    for (std::size_t i = 0; i < opt.n_xy; ++i) {
      if (std::abs(out.grid[i]) > 2.0) continue;
      for (std::size_t j = 0; j < opt.n_xy; ++j) EXPECT_NEAR(out.values[k][i * opt.n_xy + j], out.grid[i], 1e-3);
    }
}

TEST(KernelPicard, SmallQuadratureBoxIsRejected) {
  const auto spec = bsmp::constant_spec(1.0, 0.05);
  bsmp::KernelOptions opt;
  opt.n_xy = 11;
  opt.quad_half_width = 3.0;
  const auto v = bsmp::terminal_kernel_field(spec, opt);
  EXPECT_THROW(bsmp::picard_kernel_step(v, spec, opt), bsmp::Error);
}

TEST(KernelPicard, AgreesWithGridSolverOnShortHorizon) {
  const auto spec = bsmp::manufactured_spec(0.05);
  bsmp::KernelOptions opt;
  const auto res = bsmp::picard_kernel_solve(spec, opt, 10);
  ASSERT_EQ(res.update_history.size(), 10u);
  EXPECT_LE(res.update_history.back(), 1e-4);
  bsmp::GridConfig g;
  g.L = 5.0;
  g.n_xy = 101;
  const auto pde = bsmp::solve_decoupling_pde(spec, g);
  double gap = 0.0;
  for (int a = -10; a <= 10; ++a)
    for (int b = -10; b <= 10; ++b) {
      const double x = 0.1 * a, y = 0.1 * b;
      gap = std::max(gap, std::abs(res.field.value(0, x, y) - pde.interpolate(pde.theta[0], x, y)));
    }
  EXPECT_LE(gap, 5e-3);
}

}  // namespace
