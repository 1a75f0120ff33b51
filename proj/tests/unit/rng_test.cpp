#include "bsmp/rng.hpp"
#include "bsmp/sde.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

namespace {

using bsmp::rng::Philox4x32;

// Known-answer vectors of the Random123 reference implementation.
TEST(Philox, MatchesReferenceVectors) {
  EXPECT_EQ(Philox4x32::apply({0, 0, 0, 0}, {0, 0}),
            (Philox4x32::Counter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  EXPECT_EQ(Philox4x32::apply({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                              {0xffffffffu, 0xffffffffu}),
            (Philox4x32::Counter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  EXPECT_EQ(Philox4x32::apply({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                              {0xa4093822u, 0x299f31d0u}),
            (Philox4x32::Counter{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Normals, EntriesDoNotDependOnRequestLength) {
  std::vector<double> a(7), b(12);
  bsmp::rng::fill_normals(99, 3, 1.0, a);
  bsmp::rng::fill_normals(99, 3, 1.0, b);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(BrownianIncrements, MomentsOfStandardNormal) {
  bsmp::McConfig cfg{100000, 1, 7};
  const auto w = bsmp::brownian_increments(cfg, 1, 1.0);
  ASSERT_EQ(w.size(), 100000u);
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
  double ss = 0.0;
  for (double v : w) ss += (v - mean) * (v - mean);
  const double var = ss / static_cast<double>(w.size() - 1);
  EXPECT_GE(mean, -0.01);
  EXPECT_LE(mean, 0.01);
  EXPECT_GE(var, 0.985);
  EXPECT_LE(var, 1.015);
}

TEST(BrownianIncrements, VarianceScalesWithDt) {
  bsmp::McConfig cfg{20000, 5, 11};
  const auto w = bsmp::brownian_increments(cfg, 2, 0.01);
  double ss = 0.0;
  for (double v : w) ss += v * v;
  EXPECT_NEAR(ss / static_cast<double>(w.size()), 0.01, 0.01 * 0.03);
}

TEST(BrownianIncrements, SameSeedIsBitIdentical) {
  bsmp::McConfig cfg{1000, 10, 7};
  EXPECT_EQ(bsmp::brownian_increments(cfg, 2, 0.1), bsmp::brownian_increments(cfg, 2, 0.1));
}

TEST(BrownianIncrements, WorkerCountDoesNotChangeDraws) {
  bsmp::McConfig one{5000, 4, 21, 1};
  bsmp::McConfig many = one;
  many.workers = 8;
  EXPECT_EQ(bsmp::brownian_increments(one, 1, 0.25), bsmp::brownian_increments(many, 1, 0.25));
}

TEST(BrownianIncrements, DifferentSeedsDiffer) {
  const auto a = bsmp::brownian_increments({10000, 1, 7}, 1, 1.0);
  const auto b = bsmp::brownian_increments({10000, 1, 8}, 1, 1.0);
  std::size_t differing = 0;
  for (std::size_t i = 0; i < a.size(); ++i) differing += (a[i] != b[i]);
  EXPECT_GT(static_cast<double>(differing), 0.99 * static_cast<double>(a.size()));
}

TEST(DeriveSeed, DistinctAcrossIndices) {
  EXPECT_NE(bsmp::rng::derive_seed(1, 0), bsmp::rng::derive_seed(1, 1));
  EXPECT_NE(bsmp::rng::derive_seed(1, 0), bsmp::rng::derive_seed(2, 0));
  EXPECT_EQ(bsmp::rng::derive_seed(5, 3), bsmp::rng::derive_seed(5, 3));
}

}  // namespace
