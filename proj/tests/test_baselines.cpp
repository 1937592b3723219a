#include <gtest/gtest.h>

#include <set>

#include "merlin/baselines.hpp"
#include "test_support.hpp"

using namespace merlin;
using merlin::testing::random_classification;
using merlin::testing::random_matrix;

namespace {

Architecture small_arch(Index d, int classes) {
  return {d, 5, Activation::ReLU, classes, classes, LossKind::SoftmaxCrossEntropy, LossKind::SoftmaxCrossEntropy};
}

}  // namespace

TEST(Schedule, FactorsCompound) {
  SGDConfig c;
  c.lr = 0.4;
  c.lr_schedule = {{2, 0.5}, {4, 0.5}};
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 0), 0.4);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 2), 0.2);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 5), 0.1);
  c.lr_schedule = {{1, 1.5}};
  EXPECT_THROW(validate(c), ContractError);
}

TEST(BatchCursor, EachPassCoversEveryRowOnce) {
  BatchCursor cur(10, 4, 3);
  EXPECT_EQ(cur.steps_per_pass(), 3);
  for (int pass = 0; pass < 3; ++pass) {
    std::multiset<Index> seen;
    for (Index s = 0; s < cur.steps_per_pass(); ++s)
      for (Index i : cur.next()) seen.insert(i);
    ASSERT_EQ(seen.size(), 10u);
    for (Index i = 0; i < 10; ++i) EXPECT_EQ(seen.count(i), 1u);
  }
  BatchCursor full(7, 0, 3);
  EXPECT_TRUE(full.full_batch());
  EXPECT_EQ(full.next().size(), 7u);
}

TEST(FullBatchGd, ConvergesOnQuadraticAndNeverIncreases) {
  Rng rng(1);
  const Matrix A = random_matrix(rng, 4, 3);
  std::vector<double> trace;
  Objective f = [&](const ModelParams& p, Gradients* g) {
    const double v = 0.5 * (p.phi - A).squaredNorm();
    if (g) {
      g->d_phi = p.phi - A;
      g->d_theta_s = Matrix::Zero(p.theta_s.rows(), p.theta_s.cols());
      g->d_theta_t = Matrix::Zero(p.theta_t.rows(), p.theta_t.cols());
    }
    trace.push_back(v);
    return v;
  };
  ModelParams start{Matrix::Zero(4, 3), Matrix::Zero(3, 1), Matrix::Zero(3, 1)};
  GdConfig cfg;
  cfg.lr = 3.0;  // too large on purpose; the step control must recover
  cfg.max_lr = 3.0;
  const GdResult r = minimize_full_batch(f, start, cfg);
  EXPECT_TRUE(r.converged);
  EXPECT_LE((r.params.phi - A).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LE(r.objective, trace.front());
}

TEST(FullBatchGd, MaskFreezesBlocks) {
  Objective f = [](const ModelParams& p, Gradients* g) {
    if (g) {
      g->d_phi = p.phi;
      g->d_theta_s = p.theta_s;
      g->d_theta_t = p.theta_t;
    }
    return 0.5 * (p.phi.squaredNorm() + p.theta_s.squaredNorm() + p.theta_t.squaredNorm());
  };
  ModelParams start{Matrix::Ones(2, 2), Matrix::Ones(2, 1), Matrix::Ones(2, 1)};
  const GdResult r = minimize_full_batch(f, start, GdConfig{}, GradMask{false, true, false});
  EXPECT_EQ(r.params.phi, start.phi);
  EXPECT_EQ(r.params.theta_t, start.theta_t);
  EXPECT_LE(r.params.theta_s.norm(), 1e-7);
}

TEST(HeadOnly, ClosedFormMatchesAugmentedLeastSquares) {
  Rng rng(5);
  const Index d = 6;
  const Index n = 9;
  LabeledSet t;
  t.X = random_matrix(rng, n, d);
  t.y = random_matrix(rng, n, 1).col(0);
  const Architecture arch{d, 4, Activation::Quadratic, 1, 1};
  const Matrix phi = random_matrix(rng, d, 4, 0.4);
  const double lambda = 0.07;
  FinetuneOptions opt;
  opt.mode = FinetuneMode::HeadOnly;
  opt.head_l2 = lambda;
  const ModelParams p = finetune(t, phi, arch, SGDConfig{}, 1, opt);
  EXPECT_EQ(p.phi, phi);
  // [H / sqrt(n); sqrt(lambda) I] theta = [y / sqrt(n); 0] solved by QR
  const Matrix H = features(t.X, phi, Activation::Quadratic);
  Matrix A(n + 4, 4);
  A << H / std::sqrt(static_cast<double>(n)), std::sqrt(lambda) * Matrix::Identity(4, 4);
  Vector b = Vector::Zero(n + 4);
  b.head(n) = t.y / std::sqrt(static_cast<double>(n));
  const Vector ls = A.colPivHouseholderQr().solve(b);
  EXPECT_LE((p.theta_t.col(0) - ls).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(HeadOnly, SgdLeavesExtractorUntouched) {
  Rng rng(6);
  const LabeledSet t = random_classification(rng, 12, 5, 3);
  const Architecture arch = small_arch(5, 3);
  const Matrix phi = random_matrix(rng, 5, 5, 0.5);
  FinetuneOptions opt;
  opt.mode = FinetuneMode::HeadOnly;
  SGDConfig sgd;
  sgd.epochs = 5;
  const ModelParams p = finetune(t, phi, arch, sgd, 2, opt);
  EXPECT_EQ(p.phi, phi);
  EXPECT_GT(p.theta_t.norm(), 0.0);
}

TEST(Joint, AlphaOneReplaysTargetOnly) {
  Rng rng(7);
  const LabeledSet source = random_classification(rng, 30, 5, 3);
  const LabeledSet target = random_classification(rng, 10, 5, 3);
  const Architecture arch = small_arch(5, 3);
  SGDConfig sgd;
  sgd.lr = 0.05;
  sgd.epochs = 6;
  JointConfig jc;
  jc.alpha = 1.0;
  const ModelParams joint = joint_train(source, target, arch, jc, sgd, 11);
  const ModelParams alone = train_target_only(target, arch, sgd, 11);
  EXPECT_EQ(joint.phi, alone.phi);
  EXPECT_EQ(joint.theta_t, alone.theta_t);
  EXPECT_EQ(joint.theta_s.norm(), 0.0);
}

TEST(L2SP, ZeroStrengthReplaysFinetuning) {
  Rng rng(8);
  const LabeledSet target = random_classification(rng, 16, 5, 3);
  const Architecture arch = small_arch(5, 3);
  const Matrix phi = random_matrix(rng, 5, 5, 0.5);
  SGDConfig sgd;
  sgd.batch_size = 4;
  sgd.epochs = 4;
  const ModelParams a = l2sp_finetune(target, {0.0, phi}, arch, sgd, 3);
  const ModelParams b = finetune(target, phi, arch, sgd, 3);
  EXPECT_EQ(a.phi, b.phi);
  EXPECT_EQ(a.theta_t, b.theta_t);
}

TEST(L2SP, StrengthPullsTowardAnchor) {
  Rng rng(9);
  const LabeledSet target = random_classification(rng, 16, 5, 3);
  const Architecture arch = small_arch(5, 3);
  const Matrix phi = random_matrix(rng, 5, 5, 0.5);
  SGDConfig sgd;
  sgd.epochs = 20;
  const double weak = (l2sp_finetune(target, {0.0, phi}, arch, sgd, 3, 1.0).phi - phi).norm();
  const double strong = (l2sp_finetune(target, {5.0, phi}, arch, sgd, 3, 1.0).phi - phi).norm();
  EXPECT_LT(strong, weak);
  EXPECT_THROW(l2sp_finetune(target, {-1.0, phi}, arch, sgd, 3), ContractError);
}

TEST(Selection, PicksLowestValidationScore) {
  Rng rng(10);
  const LabeledSet target = random_classification(rng, 20, 3, 2);
  const std::vector<double> grid{0.3, 0.1, 0.7};
  const Selection s = select_by_validation(
      target, grid, 0.5, 4, [](const LabeledSet&, double v) { return v; },
      [](double model, const LabeledSet&) { return (model - 0.69) * (model - 0.69); });
  EXPECT_EQ(s.value, 0.7);
  EXPECT_NEAR(s.score, 1e-4, 1e-15);
}

TEST(Pretrain, SameSeedSameWeights) {
  Rng rng(12);
  const LabeledSet source = random_classification(rng, 24, 4, 3);
  const Architecture arch = small_arch(4, 3);
  SGDConfig sgd;
  sgd.batch_size = 8;
  sgd.epochs = 3;
  EXPECT_EQ(pretrain(source, arch, sgd, 5).phi_pre, pretrain(source, arch, sgd, 5).phi_pre);
  EXPECT_NE(pretrain(source, arch, sgd, 5).phi_pre, pretrain(source, arch, sgd, 6).phi_pre);
}
