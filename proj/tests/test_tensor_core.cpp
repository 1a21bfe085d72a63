#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include "oracles.hpp"
#include "vitbind/gradcheck.hpp"
#include "vitbind/hungarian.hpp"
#include "vitbind/linalg.hpp"
#include "vitbind/optim.hpp"
#include "vitbind/parallel.hpp"
#include "vitbind/stats.hpp"

using namespace vitbind;

namespace {

double component_dot(const Tensor& c, std::size_t i, std::size_t j) { return dot(c.row(i), c.row(j)); }

void expect_orthonormal(const Tensor& c, double tol) {
  for (std::size_t i = 0; i < c.rows(); ++i)
    for (std::size_t j = 0; j < c.rows(); ++j) EXPECT_NEAR(component_dot(c, i, j), i == j ? 1.0 : 0.0, tol);
}

}  // namespace

// ---- pca_topk -------------------------------------------------------------

TEST(Pca, RankOneDataHasSingleComponent) {
  Tensor x(Shape{3, 2}, {1, 0, 2, 0, 3, 0});
  const EigenResult r = pca_topk(x, 1);
  EXPECT_NEAR(std::abs(r.components(0, 0)), 1.0, 1e-6);
  EXPECT_NEAR(r.components(0, 1), 0.0, 1e-6);
  EXPECT_GT(r.components(0, 0), 0.0f);  // sign convention
  EXPECT_NEAR(r.explained_ratio[0], 1.0, 1e-12);
  EXPECT_NEAR(r.explained_variance[0], 1.0, 1e-12);
}

TEST(Pca, IdenticalRowsGiveZeroVarianceAndOrthonormalComponents) {
  Tensor x(Shape{4, 3}, {1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3});
  const EigenResult r = pca_topk(x, 2);
  EXPECT_EQ(r.explained_variance[0], 0.0);
  EXPECT_EQ(r.explained_ratio[0], 0.0);
  expect_orthonormal(r.components, 1e-6);
}

TEST(Pca, MatchesFrozenNumpyDecomposition) {
  // Values computed with numpy.linalg.eigh on the sample covariance.
  const std::vector<float> values = {
      0.0012f,  0.2987f,  -0.2741f, -0.8906f, -0.4547f, -0.9916f, 0.0601f,  1.3402f,  -0.4922f, -0.6205f,
      0.4898f,  0.3569f,  0.1054f,  -0.9305f, -0.0293f, 0.6953f,  -1.3442f, -0.4576f, -1.9012f, -1.2895f,
      -1.8417f, -0.2351f, -1.2674f, 0.2713f,  0.1568f,  -0.1869f, -2.5168f, -0.5387f, -0.0485f, 0.1133f,
      -1.5301f, -0.4778f, -0.9785f, -0.8088f, 1.0609f,  -0.8075f, -0.0325f, 0.8844f,  -0.5836f, -0.1117f};
  const Tensor x(Shape{8, 5}, values);
  const EigenResult r = pca_topk(x, 3);
  const double var[3] = {1.440883379040597, 1.2083060657470186, 0.5126992881111264};
  const double ratio[3] = {0.41204100125405885, 0.3455322258511017, 0.14661361987270147};
  const double comp[3][5] = {
      {0.6875095855589736, 0.0038465979341251177, 0.3725638515757516, -0.4114116529082464, -0.468243955432644},
      {-0.24820011798670916, 0.8195599246866203, 0.5137539887902217, 0.05244053039718195, 0.0050061015615150695},
      {-0.22160513183188507, -0.5357203415421908, 0.7090476085715266, 0.38722573941336424, -0.10584232007313434}};
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(r.explained_variance[c], var[c], 1e-5);
    EXPECT_NEAR(r.explained_ratio[c], ratio[c], 1e-5);
    for (int j = 0; j < 5; ++j) EXPECT_NEAR(r.components(c, j), comp[c][j], 1e-5);
  }
}

TEST(Pca, RandomMatricesMatchClassicalJacobiOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = oracle::random_matrix(8, 5, rng);
    const EigenResult r = pca_topk(x, 3);
    const oracle::Eigen ref = oracle::classical_jacobi(oracle::covariance(x));
    expect_orthonormal(r.components, 1e-5);
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_NEAR(r.explained_variance[c], static_cast<double>(ref.values[c]), 1e-5);
      // Compare up to sign.
      double align = 0.0;
      for (std::size_t j = 0; j < 5; ++j) align += r.components(c, j) * static_cast<double>(ref.vectors[c][j]);
      EXPECT_NEAR(std::abs(align), 1.0, 1e-5);
      if (c > 0) {
        EXPECT_LE(r.explained_ratio[c], r.explained_ratio[c - 1]);
      }
    }
  }
}

TEST(Pca, RejectsBadRank) {
  Tensor x(Shape{3, 2}, {1, 0, 2, 0, 3, 1});
  EXPECT_THROW(pca_topk(x, 0), DataError);
  EXPECT_THROW(pca_topk(x, 3), DataError);
  EXPECT_THROW(pca_topk(Tensor(Shape{1, 2}, {1, 2}), 1), DataError);
}

// ---- adam_step ------------------------------------------------------------

TEST(Adam, ZeroGradientIsFixedPoint) {
  Tensor p(Shape{3}, {0.5f, -1.0f, 2.0f});
  const Tensor before = p;
  AdamState st(p.shape(), 1e-3);
  for (int i = 0; i < 5; ++i) adam_step(p, Tensor(Shape{3}), st);
  EXPECT_EQ(p, before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor p(Shape{1}, {0.0f});
  AdamState st(p.shape(), 1e-3);
  adam_step(p, Tensor(Shape{1}, {1.0f}), st);
  EXPECT_NEAR(p[0], -0.001, 1e-9);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, QuadraticDecreasesMonotonically) {
  Tensor x(Shape{1}, {1.0f});
  AdamState st(x.shape(), 0.01);
  double prev = x[0] * x[0];
  for (int i = 0; i < 10; ++i) {
    adam_step(x, Tensor(Shape{1}, {2.0f * x[0]}), st);
    const double f = static_cast<double>(x[0]) * x[0];
    EXPECT_LT(f, prev);
    prev = f;
  }
}

TEST(Adam, RejectsNonFiniteGradient) {
  Tensor p(Shape{2}, {1.0f, 1.0f});
  AdamState st(p.shape(), 1e-3);
  const StepOutcome out = adam_step(p, Tensor(Shape{2}, {1.0f, NAN}), st);
  EXPECT_FALSE(out.applied);
  EXPECT_NE(out.diagnostic.find("element 1"), std::string::npos);
  EXPECT_EQ(st.step, 0u);
  EXPECT_EQ(p[0], 1.0f);
}

TEST(Adam, StepScheduleDecaysEveryStepSize) {
  AdamState st(Shape{1}, 1e-3, StepSchedule{8, 0.2});
  for (std::size_t e = 1; e <= 16; ++e) st.end_epoch(e);
  EXPECT_NEAR(st.lr, 1e-3 * 0.04, 1e-15);
  EXPECT_THROW(AdamState(Shape{1}, 0.0), ConfigError);
  EXPECT_THROW(AdamState(Shape{1}, 1e-3, StepSchedule{8, 1.5}), ConfigError);
}

// ---- hungarian_assign -----------------------------------------------------

TEST(Hungarian, TwoByTwo) {
  CostMatrix c(2, 2);
  c(0, 0) = 1;
  c(0, 1) = 2;
  c(1, 0) = 3;
  c(1, 1) = 1;
  const Assignment a = hungarian_assign(c);
  EXPECT_EQ(a.row_to_col, (std::vector<int>{0, 1}));
  EXPECT_DOUBLE_EQ(a.total, 2.0);
}

TEST(Hungarian, IdentityFavoringCost) {
  CostMatrix c(4, 4, 1.0);
  for (std::size_t i = 0; i < 4; ++i) c(i, i) = 0.0;
  const Assignment a = hungarian_assign(c);
  EXPECT_EQ(a.row_to_col, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_DOUBLE_EQ(a.total, 0.0);
}

TEST(Hungarian, TiesBrokenByLowestColumn) {
  CostMatrix c(2, 3, 1.0);  // every assignment costs 2
  const Assignment a = hungarian_assign(c);
  EXPECT_EQ(a.row_to_col, (std::vector<int>{0, 1}));
  CostMatrix d(3, 3, 0.0);
  EXPECT_EQ(hungarian_assign(d).row_to_col, (std::vector<int>{0, 1, 2}));
}

TEST(Hungarian, EmptyAndPadded) {
  EXPECT_TRUE(hungarian_assign(CostMatrix(0, 0)).row_to_col.empty());
  CostMatrix tall(3, 2);
  tall(0, 0) = 5;
  tall(0, 1) = 1;
  tall(1, 0) = 1;
  tall(1, 1) = 5;
  tall(2, 0) = 9;
  tall(2, 1) = 9;
  const Assignment a = hungarian_assign(tall);
  EXPECT_EQ(a.row_to_col, (std::vector<int>{1, 0, -1}));
  EXPECT_DOUBLE_EQ(a.total, 2.0);
}

TEST(Hungarian, RandomMatricesMatchExhaustiveSearch) {
  Rng rng(2024);
  for (std::size_t n = 2; n <= 6; ++n) {
    for (int trial = 0; trial < 200; ++trial) {
      CostMatrix c(n, n);
      for (auto& v : c.cost) v = rng.uniform(0.0, 10.0);
      const Assignment a = hungarian_assign(c);
      EXPECT_NEAR(a.total, oracle::brute_force_assignment(c), 1e-9);
      std::vector<int> sorted = a.row_to_col;
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(sorted[i], static_cast<int>(i));
    }
  }
}

TEST(Hungarian, IntegerCostsWithTiesMatchLexicographicOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng.index(4);
    CostMatrix c(n, n);
    for (auto& v : c.cost) v = static_cast<double>(rng.index(3));
    // Oracle: first optimal permutation in lexicographic order.
    std::vector<int> perm(n), best_perm;
    std::iota(perm.begin(), perm.end(), 0);
    double best = 1e18;
    do {
      double t = 0;
      for (std::size_t i = 0; i < n; ++i) t += c(i, static_cast<std::size_t>(perm[i]));
      if (t < best - 1e-12) {
        best = t;
        best_perm = perm;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
    const Assignment a = hungarian_assign(c);
    EXPECT_DOUBLE_EQ(a.total, best);
    EXPECT_EQ(a.row_to_col, best_perm);
  }
}

// ---- pearson_corr / permutation_test --------------------------------------

TEST(Pearson, BasicValues) {
  const std::vector<double> x = {1, 2, 3, 4, 5};
  std::vector<double> neg(x.size());
  std::transform(x.begin(), x.end(), neg.begin(), [](double v) { return -v; });
  EXPECT_NEAR(pearson_corr(x, x), 1.0, 1e-12);
  EXPECT_NEAR(pearson_corr(x, neg), -1.0, 1e-12);
  const std::vector<double> a = {1, 2, 3}, b = {2, 4, 7};
  EXPECT_NEAR(pearson_corr(a, b), 0.99339, 1e-4);
  EXPECT_NEAR(pearson_corr(a, b), oracle::pearson(a, b), 1e-12);
}

TEST(Pearson, ErrorsOnZeroVarianceAndShortInput) {
  const std::vector<double> x = {1, 2, 3}, c = {4, 4, 4};
  EXPECT_THROW(pearson_corr(x, c), NumericError);
  EXPECT_THROW(pearson_corr(std::vector<double>{1, 2}, std::vector<double>{1, 2}), DataError);
}

TEST(Pearson, InvariantUnderIncreasingAffineMaps) {
  Rng rng(3);
  std::vector<double> a(40), b(40);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = rng.normal();
    b[i] = a[i] + rng.normal();
  }
  std::vector<double> b2(b.size());
  std::transform(b.begin(), b.end(), b2.begin(), [](double v) { return 3.5 * v - 7.0; });
  EXPECT_NEAR(pearson_corr(a, b), pearson_corr(a, b2), 1e-12);
}

TEST(PermutationTest, PerfectCorrelationIsSignificant) {
  std::vector<double> a(50);
  Rng rng(1);
  for (auto& v : a) v = rng.normal();
  const PermutationResult r = permutation_test(a, a, 999, 42);
  EXPECT_LE(r.p_value, 0.002);
  EXPECT_NEAR(r.r, 1.0, 1e-12);
}

TEST(PermutationTest, IndependentNoiseIsCalibrated) {
  int above = 0;
  for (std::uint64_t rep = 0; rep < 100; ++rep) {
    Rng rng(1000 + rep);
    std::vector<double> a(1000), b(1000);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    if (permutation_test(a, b, 199, rep).p_value > 0.05) ++above;
  }
  EXPECT_GE(above, 90);
}

TEST(PermutationTest, RejectsConstantInputAndFewPermutations) {
  const std::vector<double> a = {1, 2, 3, 4}, c = {1, 1, 1, 1};
  EXPECT_THROW(permutation_test(a, c, 999, 0), NumericError);
  EXPECT_THROW(permutation_test(a, a, 50, 0), ConfigError);
}

// ---- gaussian_kde ---------------------------------------------------------

TEST(Kde, SingleClusterPeaksNearCenter) {
  Rng rng(8);
  std::vector<double> s(200);
  for (auto& v : s) v = 0.5 + 0.05 * rng.normal();
  const auto grid = linspace(0.0, 1.0, 101);
  const KdeResult k = gaussian_kde(s, grid);
  const auto peak = std::max_element(k.density.begin(), k.density.end()) - k.density.begin();
  EXPECT_NEAR(grid[static_cast<std::size_t>(peak)], 0.5, 0.03);
  EXPECT_FALSE(k.degenerate);
  for (double d : k.density) EXPECT_GE(d, 0.0);
}

TEST(Kde, IntegratesToOneOnWideGrid) {
  Rng rng(9);
  std::vector<double> s(300);
  for (auto& v : s) v = rng.uniform();
  const double sigma = sample_stddev(s);
  const auto grid = linspace(-5 * sigma, 1 + 5 * sigma, 2001);
  const KdeResult k = gaussian_kde(s, grid);
  const double integral = trapezoid(grid, k.density);
  EXPECT_GT(integral, 0.98);
  EXPECT_LT(integral, 1.02);
}

TEST(Kde, SymmetricTwoPointSample) {
  const std::vector<double> s = {0.0, 1.0, 0.0, 1.0};
  const auto grid = linspace(0.0, 1.0, 11);
  const KdeResult k = gaussian_kde(s, grid);
  for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_NEAR(k.density[i], k.density[grid.size() - 1 - i], 1e-12);
}

TEST(Kde, ZeroSpreadFallsBackToFlaggedPointMass) {
  const std::vector<double> s = {0.3, 0.3, 0.3};
  const auto grid = linspace(0.0, 1.0, 11);
  const KdeResult k = gaussian_kde(s, grid);
  EXPECT_TRUE(k.degenerate);
  EXPECT_NEAR(trapezoid(grid, k.density), 1.0, 1e-12);
  EXPECT_GT(k.density[3], 0.0);
}

// ---- pinv_lift ------------------------------------------------------------

TEST(PinvLift, ZeroDeltaGivesZero) {
  Rng rng(4);
  const Tensor w = oracle::random_matrix(3, 7, rng);
  for (float v : pinv_lift(w, std::vector<float>(3, 0.0f))) EXPECT_EQ(v, 0.0f);
}

TEST(PinvLift, OrthonormalRowsReduceToTranspose) {
  Tensor w = Tensor::matrix(2, 4);
  w(0, 0) = 1;
  w(1, 2) = 1;
  const std::vector<float> delta = {0.5f, -2.0f};
  const auto x = pinv_lift(w, delta);
  const std::vector<float> expected = {0.5f, 0.0f, -2.0f, 0.0f};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(x[i], expected[i], 1e-7);
}

TEST(PinvLift, RoundTripOnRandomFullRankMatrices) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor w = oracle::random_matrix(4, 16, rng);
    std::vector<float> delta(4);
    for (auto& v : delta) v = static_cast<float>(rng.normal());
    const auto lifted = pinv_lift(w, delta);
    const auto back = matvec(w, lifted);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(back[i], delta[i], 1e-4);
  }
}

TEST(PinvLift, RankDeficientNamesSingularValue) {
  Tensor w = Tensor::matrix(2, 3);
  w(0, 0) = 1;
  w(1, 0) = 2;
  try {
    pinv_lift(w, std::vector<float>{1, 1});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("smallest singular value"), std::string::npos);
  }
}

TEST(PrincipalAngles, IdenticalAndOrthogonalSubspaces) {
  Tensor a = Tensor::matrix(2, 4), b = Tensor::matrix(2, 4);
  a(0, 0) = 1;
  a(1, 1) = 1;
  b(0, 0) = 2;
  b(1, 0) = 1;
  b(1, 1) = 3;
  for (double ang : principal_angles_deg(a, b)) EXPECT_NEAR(ang, 0.0, 1e-4);
  Tensor c = Tensor::matrix(1, 4);
  c(0, 3) = 1;
  EXPECT_NEAR(principal_angles_deg(a, c)[0], 90.0, 1e-6);
}

// ---- finite differences ---------------------------------------------------

TEST(GradCheck, DetectsCorrectAndWrongGradients) {
  std::vector<float> p = {0.3f, -1.2f, 2.0f};
  auto loss = [&] { return std::sin(p[0]) + static_cast<double>(p[1]) * p[2] + std::exp(0.1 * p[2]); };
  const std::vector<double> good = {std::cos(0.3f), 2.0, -1.2 + 0.1 * std::exp(0.2)};
  EXPECT_LT(finite_difference_check(p, good, loss).relative_error, 1e-4);
  std::vector<double> bad = good;
  bad[1] += 0.1;
  EXPECT_GT(finite_difference_check(p, bad, loss).relative_error, 1e-3);
}

// ---- parallel_for ---------------------------------------------------------

TEST(Parallel, ResultsIndependentOfThreadCount) {
  std::vector<double> one(100), many(100);
  set_max_threads(1);
  parallel_for(100, [&](std::size_t i) { one[i] = std::sqrt(static_cast<double>(i)); });
  set_max_threads(4);
  parallel_for(100, [&](std::size_t i) { many[i] = std::sqrt(static_cast<double>(i)); });
  set_max_threads(0);
  EXPECT_EQ(one, many);
}
