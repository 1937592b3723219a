#include <gtest/gtest.h>

#include "merlin/theory.hpp"
#include "test_support.hpp"

using namespace merlin;
using merlin::testing::random_matrix;

namespace {

// Dense grid search on [0, 2].
double brute_force_min(double lambda, double w, double kappa, double* arg = nullptr) {
  double best = std::numeric_limits<double>::infinity();
  double best_mu = 0.0;
  for (int i = 0; i <= 200000; ++i) {
    const double mu = 2.0 * i / 200000.0;
    const double v = mu_objective(mu, lambda, w, kappa);
    if (v < best) {
      best = v;
      best_mu = mu;
    }
  }
  if (arg) *arg = best_mu;
  return best;
}

}  // namespace

TEST(MuStar, MatchesBruteForceGrid) {
  for (double lambda : {1e-4, 1e-3, 0.01, 0.05, 0.09, 0.2, 0.5, 1.0}) {
    for (double w : {2.0 / 3.0, 0.3, 0.6}) {
      double grid_mu = 0.0;
      const double grid = brute_force_min(lambda, w, kSourceKappa, &grid_mu);
      const MuStar ms = mu_star(lambda, w, kSourceKappa);
      EXPECT_LE(ms.value, grid + 1e-12) << lambda << " " << w;
      EXPECT_NEAR(ms.value, grid, 1e-9) << lambda << " " << w;
      EXPECT_NEAR(ms.mu, grid_mu, 2e-4) << lambda << " " << w;
    }
  }
}

TEST(MuStar, EdgeCases) {
  EXPECT_EQ(mu_star(0.0, 0.5, kSourceKappa).mu, 1.0);
  EXPECT_EQ(mu_star(0.3, 0.0, kSourceKappa).mu, 0.0);
  // heavy regularization collapses to zero with value w
  const MuStar big = mu_star(10.0, 2.0 / 3.0, kSourceKappa);
  EXPECT_EQ(big.mu, 0.0);
  EXPECT_DOUBLE_EQ(big.value, 2.0 / 3.0);
  EXPECT_THROW(mu_star(-1.0, 1.0, 1.0), ContractError);
}

TEST(SourceMinimizers, SingleNeuronBelowThreshold) {
  const MinimizerDescriptor m = enumerate_source_minimizers(4, 20, 0.01);
  ASSERT_EQ(m.kind, MinimizerDescriptor::Kind::SingleNeuron);
  EXPECT_EQ(m.free_indices, 4);
  EXPECT_NEAR(m.head * m.weight_norm * m.weight_norm, m.mu, 1e-14);
  EXPECT_NEAR(m.weight_norm, std::sqrt(2.0) * m.head, 1e-15);
  // the realizing parameters hit the analytic value exactly
  const TheoryDist src = TheoryDist::source(4, 20);
  for (Index j = 0; j < 4; ++j) {
    const ModelParams p = single_neuron_params(m, 20, 3, j);
    const double obj = population_loss(p.theta_s, p.phi, src) + 0.01 * (p.theta_s.squaredNorm() + p.phi.squaredNorm());
    EXPECT_NEAR(obj, m.objective, 1e-14);
  }
}

TEST(SourceMinimizers, NumericalPretrainingReachesAnalyticValue) {
  const Architecture arch{8, 3, Activation::Quadratic, 1, 1};
  GdConfig gd;
  gd.restarts = 3;
  const RestartResult r = pretrain_regularized(SourceTask::infinite(TheoryDist::source(3, 8)), arch, 0.05, gd, 1);
  const MinimizerDescriptor m = enumerate_source_minimizers(3, 8, 0.05);
  EXPECT_NEAR(r.objective, m.objective, 1e-6);
  const ColumnAlignment a = dominant_column(r.params.phi);
  EXPECT_LT(a.coordinate, 3);
  EXPECT_GT(a.cosine, 0.999);
}

TEST(SignPatterns, VarianceVanishesExactlyForDiagonal) {
  Rng rng(4);
  for (Index k = 1; k <= 8; ++k) {
    Matrix D = Matrix::Zero(k, k);
    for (Index i = 0; i < k; ++i) D(i, i) = rng.normal();
    EXPECT_EQ(sign_pattern_variance(D), 0.0);
    if (k < 2) continue;
    Matrix M = D;
    M(0, k - 1) = M(k - 1, 0) = 0.25;
    // x^T M x = const + 0.5 x_0 x_{k-1}: variance 0.25
    EXPECT_NEAR(sign_pattern_variance(M), 0.25, 1e-12);
  }
}

TEST(JointBounds, ConstructionInterpolatesAndMatchesClosedForm) {
  const Index d = 40;
  const LabeledSet target = sample_theory_target({d}, 4, 12);
  for (double lambda : {1e-3, 1e-2}) {
    for (double alpha : {0.2, 0.7}) {
      const JointConstruction c = joint_upper_construction(target, 3, lambda, alpha);
      EXPECT_NEAR(batch_loss(target, c.params.theta_t, c.params.phi, Activation::Quadratic, LossKind::SquaredError),
                  0.0, 1e-20);
      const Objective f = joint_objective(SourceTask::infinite(TheoryDist::source(4, d)), target,
                                          Activation::Quadratic, LossKind::SquaredError, alpha, lambda);
      EXPECT_NEAR(f(c.params, nullptr), c.bound, 1e-12);
    }
  }
}

TEST(JointBounds, LowerBoundDecreasesWithAllowedLoss) {
  double prev = std::numeric_limits<double>::infinity();
  for (double eps : {0.0, 0.05, 0.2, 0.5, 2.0 / 3.0}) {
    const double b = joint_lower_bound(0.01, 0.3, eps);
    EXPECT_LT(b, prev);
    prev = b;
  }
  EXPECT_THROW(joint_lower_bound(0.01, 0.3, 0.7), ContractError);
}

TEST(MinNorm, InterpolatesFirstCoordinate) {
  const LabeledSet t = sample_theory_target({30}, 5, 3);
  const Vector v = min_norm_interpolator(t);
  EXPECT_LE((t.X * v - t.X.col(0)).norm(), 1e-12);
  EXPECT_LE(v.norm(), 1.0 + 1e-12);  // e_1 interpolates, so the minimum norm is at most 1
}

TEST(DominantColumn, FindsLargestColumnAndCoordinate) {
  Matrix phi = Matrix::Zero(5, 3);
  phi(2, 1) = -3.0;
  phi(4, 1) = 0.1;
  phi(0, 0) = 1.0;
  const ColumnAlignment a = dominant_column(phi);
  EXPECT_EQ(a.column, 1);
  EXPECT_EQ(a.coordinate, 2);
  EXPECT_NEAR(a.cosine, 3.0 / std::sqrt(9.01), 1e-15);
}

TEST(Theorem2, SmallRunRecoversTransferableCoordinate) {
  Theorem2Config cfg;
  cfg.seeds = 2;
  const Report r = run_theorem2(cfg);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.summary["successes"].get<int>(), 2);
  for (const auto& row : r.rows) EXPECT_EQ(row["selected_coordinate"].get<int>(), 1);
}

TEST(Theorem1, FinetuneBranchSmallRun) {
  Theorem1Config cfg;
  cfg.run_joint = false;
  cfg.finetune.seeds = 4;
  cfg.finetune.restarts = 1;
  cfg.gd.max_steps = 20000;
  const Report r = run_theorem1(cfg);
  ASSERT_EQ(r.rows.size(), 4u);
  const MinimizerDescriptor m = enumerate_source_minimizers(4, 20, 0.01);
  const double c = m.weight_norm * m.weight_norm;
  for (const auto& row : r.rows) {
    const double pop = row["target_population_loss"].get<double>();
    if (row["selected_coordinate"].get<int>() != 1) {
      EXPECT_GE(pop, 10.0 / 27.0 - 0.02);
      continue;
    }
    // On e_1 the only error is ridge shrinkage: the fit is s x_1^2 with
    // s = c^2 N1 / (c^2 N1 + n lambda), N1 the nonzero x_1 count.
    const LabeledSet t = sample_theory_target({20}, 20, derive_seed(derive_seed(0, 100 + row["seed"].get<int>()), 7));
    const double n1 = t.X.col(0).cwiseAbs().sum();
    const double s = c * c * n1 / (c * c * n1 + 20 * 0.01);
    EXPECT_NEAR(pop, 2.0 / 3.0 * (1.0 - s) * (1.0 - s), 1e-7);
  }
}
