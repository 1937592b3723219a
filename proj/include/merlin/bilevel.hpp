#pragma once

// Meta representation learning: the feature extractor is trained so that a
// linear head fit on one part of the target set generalizes to the other,
// jointly with the ordinary source loss.
//
//   inner:  theta_t(phi) = argmin_theta L_{target-train}(theta, phi)
//   outer:  min_{phi, theta_s} L_source(theta_s, phi) + rho * L_{target-val}(theta_t(phi), phi)
//
// The inner problem is solved either by n unrolled gradient steps from a zero
// head (hypergradient by reverse pass through every step) or by closed-form
// ridge regression (hypergradient through the linear solve).

#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "merlin/baselines.hpp"
#include "merlin/data.hpp"
#include "merlin/netcore.hpp"
#include "merlin/rng.hpp"
#include "merlin/types.hpp"

namespace merlin {

enum class InnerSolver { UnrolledGD, ClosedFormRidge };
enum class LabelEncoding { Scalar, MulticlassRegression };

inline std::string to_string(InnerSolver s) {
  return s == InnerSolver::UnrolledGD ? "unrolled_gd" : "closed_form_ridge";
}

inline InnerSolver inner_solver_from_string(const std::string& s) {
  if (s == "unrolled_gd") return InnerSolver::UnrolledGD;
  if (s == "closed_form_ridge" || s == "ridge") return InnerSolver::ClosedFormRidge;
  throw ContractError("unknown inner solver '" + s + "'");
}

struct MerlinConfig {
  double rho = 2.0;
  double lambda = 0.01;
  int inner_steps = 10;
  double inner_lr = 0.1;
  double inner_weight_decay = 0.0;
  double split_fraction = 0.5;
  int outer_iters = 1000;
  InnerSolver inner_solver = InnerSolver::ClosedFormRidge;
  LabelEncoding encoding = LabelEncoding::Scalar;
  LossKind inner_loss = LossKind::SquaredError;  // unrolled solver only
  bool regularize_outer = false;  // adds lambda (|theta_s|^2 + |phi|_F^2)
  bool warm_start = false;
  double ill_conditioned = 1e12;
  double grad_clip = 0.0;  // rescale outer gradients to at most this norm; 0 = off
};

inline void validate(const MerlinConfig& c) {
  require(c.rho >= 0.0, "rho must be non-negative");
  require(c.lambda >= 0.0, "lambda must be non-negative");
  require(c.split_fraction > 0.0 && c.split_fraction < 1.0, "split fraction must lie in (0, 1)");
  require(c.outer_iters >= 0, "outer iteration count must be non-negative");
  require(c.grad_clip >= 0.0, "gradient clip must be non-negative");
  if (c.inner_solver == InnerSolver::UnrolledGD) {
    require(c.inner_steps >= 1, "unrolled inner solver needs at least one step");
    require(c.inner_lr > 0.0, "inner learning rate must be positive");
  }
  if (c.inner_solver == InnerSolver::ClosedFormRidge)
    require(c.inner_loss == LossKind::SquaredError, "closed-form inner solver needs squared error");
}

// Labels of an inner/outer fit: a regression matrix or class indices.
struct HeadTargets {
  LossKind loss = LossKind::SquaredError;
  Matrix Y;
  std::vector<int> labels;

  Index rows() const { return loss == LossKind::SquaredError ? Y.rows() : static_cast<Index>(labels.size()); }

  static HeadTargets from_set(const LabeledSet& set, LossKind loss, LabelEncoding enc) {
    HeadTargets t;
    t.loss = loss;
    if (loss == LossKind::SquaredError) {
      if (enc == LabelEncoding::MulticlassRegression) {
        require(set.is_classification(), "multiclass encoding needs class labels");
        t.Y = encode_labels(set.y, set.num_classes);
      } else {
        t.Y = set.y;
      }
    } else {
      require(set.is_classification(), "cross entropy needs class labels");
      t.labels.resize(static_cast<std::size_t>(set.size()));
      for (Index i = 0; i < set.size(); ++i) t.labels[static_cast<std::size_t>(i)] = set.label(i);
      t.Y.resize(0, set.num_classes);
    }
    return t;
  }

  Index outputs() const { return Y.cols(); }

  // Per-row loss gradient (not divided by n) at predictions P.
  Matrix row_grad(const Matrix& P) const {
    if (loss == LossKind::SquaredError) return 2.0 * (P - Y);
    Matrix S = softmax(P);
    for (Index i = 0; i < P.rows(); ++i) S(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
    return S;
  }

  // Row-wise Jacobian of row_grad applied to V.
  Matrix row_grad_jvp(const Matrix& P, const Matrix& V) const {
    if (loss == LossKind::SquaredError) return 2.0 * V;
    const Matrix S = softmax(P);
    Matrix out = S.cwiseProduct(V);
    for (Index i = 0; i < P.rows(); ++i) out.row(i) -= S.row(i) * S.row(i).dot(V.row(i));
    return out;
  }

  double mean_loss(const Matrix& P) const {
    const auto n = static_cast<double>(P.rows());
    if (loss == LossKind::SquaredError) return (P - Y).squaredNorm() / n;
    double total = 0.0;
    for (Index i = 0; i < P.rows(); ++i) {
      const double shift = P.row(i).maxCoeff();
      total += std::log((P.row(i).array() - shift).exp().sum()) - (P(i, labels[static_cast<std::size_t>(i)]) - shift);
    }
    return total / n;
  }

  static Matrix softmax(const Matrix& P) {
    Matrix S(P.rows(), P.cols());
    for (Index i = 0; i < P.rows(); ++i) {
      Eigen::RowVectorXd e = (P.row(i).array() - P.row(i).maxCoeff()).exp();
      S.row(i) = e / e.sum();
    }
    return S;
  }
};

struct InnerSolution {
  Matrix theta;
  std::vector<double> loss_trajectory;  // unrolled: loss before each step and after the last
  std::vector<Matrix> iterates;         // unrolled: theta_0 .. theta_{n-1}
  double condition_number = std::numeric_limits<double>::quiet_NaN();  // ridge
};

// --- closed-form ridge ---------------------------------------------------------

// (H^T H + lambda I)^{-1} H^T Y
inline Matrix ridge_primal(const Matrix& H, const Matrix& Y, double lambda) {
  Matrix M = H.transpose() * H;
  M.diagonal().array() += lambda;
  Eigen::LLT<Matrix> llt(M);
  if (llt.info() != Eigen::Success) throw NumericError("ridge system is not positive definite; use lambda > 0");
  return llt.solve(H.transpose() * Y);
}

// H^T (H H^T + lambda I)^{-1} Y
inline Matrix ridge_dual(const Matrix& H, const Matrix& Y, double lambda) {
  Matrix K = H * H.transpose();
  K.diagonal().array() += lambda;
  Eigen::LLT<Matrix> llt(K);
  if (llt.info() != Eigen::Success) throw NumericError("dual ridge system is not positive definite; use lambda > 0");
  return H.transpose() * llt.solve(Y);
}

inline InnerSolution inner_fit_ridge(const Matrix& H, const Matrix& Y, double lambda) {
  require(lambda >= 0.0, "ridge lambda must be non-negative");
  require(H.rows() == Y.rows(), "feature and label rows differ");
  Matrix M = H.transpose() * H;
  M.diagonal().array() += lambda;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(M, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  InnerSolution sol;
  sol.condition_number = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  if (lambda == 0.0 && !(lo > 1e-14 * std::max(hi, 1.0)))
    throw NumericError("ridge system is singular at lambda = 0");
  Eigen::LLT<Matrix> llt(M);
  if (llt.info() != Eigen::Success) throw NumericError("ridge system is not positive definite");
  sol.theta = llt.solve(H.transpose() * Y);
  require_finite(sol.theta, "ridge head");
  return sol;
}

inline InnerSolution inner_fit_ridge(const Matrix& phi, const LabeledSet& train, double lambda, LabelEncoding enc,
                                     Activation act) {
  validate(train);
  const HeadTargets t = HeadTargets::from_set(train, LossKind::SquaredError, enc);
  return inner_fit_ridge(features(train.X, phi, act), t.Y, lambda);
}

// --- unrolled gradient descent ---------------------------------------------------

// n plain GD steps on the mean training loss (+ wd/2 |theta|^2) with features
// frozen: theta <- theta - lr (grad + wd theta).
inline InnerSolution inner_fit_gd(const Matrix& H, const HeadTargets& t, int steps, double lr, double wd,
                                  const Matrix& theta_init) {
  require(steps >= 0, "inner step count must be non-negative");
  require(lr > 0.0, "inner learning rate must be positive");
  require(theta_init.rows() == H.cols(), "initial head does not match feature width");
  const auto n = static_cast<double>(H.rows());
  InnerSolution sol;
  sol.theta = theta_init;
  sol.iterates.reserve(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k) {
    const Matrix P = H * sol.theta;
    const double loss = t.mean_loss(P);
    if (!std::isfinite(loss) || loss > 1e150)
      throw NumericError("inner gradient descent diverged; use a smaller inner learning rate");
    sol.loss_trajectory.push_back(loss);
    sol.iterates.push_back(sol.theta);
    sol.theta -= lr * (H.transpose() * t.row_grad(P) / n + wd * sol.theta);
  }
  const double final_loss = t.mean_loss(H * sol.theta);
  if (!std::isfinite(final_loss) || !sol.theta.allFinite())
    throw NumericError("inner gradient descent diverged; use a smaller inner learning rate");
  sol.loss_trajectory.push_back(final_loss);
  return sol;
}

inline InnerSolution inner_fit_gd(const Matrix& phi, const LabeledSet& train, int steps, double lr,
                                  const Matrix& theta_init, Activation act, LossKind loss = LossKind::SquaredError,
                                  LabelEncoding enc = LabelEncoding::Scalar, double wd = 0.0) {
  validate(train);
  return inner_fit_gd(features(train.X, phi, act), HeadTargets::from_set(train, loss, enc), steps, lr, wd,
                      theta_init);
}

// --- hypergradient -----------------------------------------------------------------

// Given dL/dtheta at the inner solution, returns dL/dH_train.
inline Matrix inner_backward(const Matrix& H, const HeadTargets& t, const InnerSolution& sol, const Matrix& d_theta,
                             const MerlinConfig& cfg) {
  if (cfg.inner_solver == InnerSolver::ClosedFormRidge) {
    Matrix M = H.transpose() * H;
    M.diagonal().array() += cfg.lambda;
    const Matrix Q = M.llt().solve(d_theta);
    return (t.Y - H * sol.theta) * Q.transpose() - H * Q * sol.theta.transpose();
  }
  const auto n = static_cast<double>(H.rows());
  const double eta = cfg.inner_lr;
  Matrix a = d_theta;
  Matrix dH = Matrix::Zero(H.rows(), H.cols());
  for (auto k = static_cast<int>(sol.iterates.size()) - 1; k >= 0; --k) {
    const Matrix& theta_k = sol.iterates[static_cast<std::size_t>(k)];
    const Matrix P = H * theta_k;
    const Matrix U = t.row_grad_jvp(P, H * a);
    dH -= (eta / n) * (t.row_grad(P) * a.transpose() + U * theta_k.transpose());
    a -= eta * (H.transpose() * U / n + cfg.inner_weight_decay * a);
  }
  return dH;
}

struct MetaSplit {
  LabeledSet train;
  LabeledSet val;

  static MetaSplit make(const LabeledSet& target, double fraction, std::uint64_t seed) {
    auto [tr, val] = split(target, fraction, seed);
    return {std::move(tr), std::move(val)};
  }
};

struct BilevelEval {
  double value = 0.0;
  double source_loss = 0.0;
  double meta_loss = 0.0;
  Gradients grad;  // d_theta_t is always zero
  InnerSolution inner;
};

inline Matrix zero_head(const Matrix& phi, const HeadTargets& t) {
  return Matrix::Zero(phi.cols(), t.Y.cols());
}

inline LossKind meta_loss_kind(const MerlinConfig& cfg) {
  return cfg.inner_solver == InnerSolver::ClosedFormRidge ? LossKind::SquaredError : cfg.inner_loss;
}

// Meta loss for a fixed split: fit the head on split.train, mean loss on split.val.
// Also returns dL/dphi when requested.
struct MetaEval {
  double value = 0.0;
  Matrix d_phi;
  InnerSolution inner;
};

inline MetaEval meta_loss_on_split(const Matrix& phi, const MetaSplit& s, const MerlinConfig& cfg, Activation act,
                                   const Matrix* theta_init, bool want_grad) {
  const LossKind lk = meta_loss_kind(cfg);
  const HeadTargets t_tr = HeadTargets::from_set(s.train, lk, cfg.encoding);
  const HeadTargets t_val = HeadTargets::from_set(s.val, lk, cfg.encoding);
  const Matrix Z_tr = s.train.X * phi;
  const Matrix Z_val = s.val.X * phi;
  const Matrix H_tr = apply_activation(Z_tr, act);
  const Matrix H_val = apply_activation(Z_val, act);

  MetaEval out;
  if (cfg.inner_solver == InnerSolver::ClosedFormRidge) {
    out.inner = inner_fit_ridge(H_tr, t_tr.Y, cfg.lambda);
  } else {
    const Matrix init = theta_init ? *theta_init : zero_head(phi, t_tr);
    out.inner = inner_fit_gd(H_tr, t_tr, cfg.inner_steps, cfg.inner_lr, cfg.inner_weight_decay, init);
  }
  const Matrix P_val = H_val * out.inner.theta;
  out.value = t_val.mean_loss(P_val);
  if (!std::isfinite(out.value)) throw NumericError("meta loss is not finite");
  if (!want_grad) return out;

  const Matrix G_val = t_val.row_grad(P_val) / static_cast<double>(P_val.rows());  // dL/dP_val
  const Matrix d_theta = H_val.transpose() * G_val;
  const Matrix dH_val = G_val * out.inner.theta.transpose();
  const Matrix dH_tr = inner_backward(H_tr, t_tr, out.inner, d_theta, cfg);
  out.d_phi = feature_backprop(s.train.X, Z_tr, dH_tr, act) + feature_backprop(s.val.X, Z_val, dH_val, act);
  return out;
}

// Value and gradient of the outer objective for a fixed split (and source batch).
inline BilevelEval outer_objective_grad(const ModelParams& p, const SourceTask& source, const LabeledSet* source_batch,
                                        const MetaSplit& split, const MerlinConfig& cfg, Activation act,
                                        const Matrix* theta_init = nullptr, bool want_grad = true) {
  check_congruent(p);
  BilevelEval out;
  const HeadGradient s = source_loss_grad(source, source_batch ? source_batch : source.data, p.theta_s, p.phi, act);
  out.source_loss = s.value;
  MetaEval m = meta_loss_on_split(p.phi, split, cfg, act, theta_init, want_grad && cfg.rho != 0.0);
  out.meta_loss = m.value;
  out.inner = std::move(m.inner);
  out.value = s.value + cfg.rho * m.value;
  if (cfg.regularize_outer) out.value += cfg.lambda * (p.theta_s.squaredNorm() + p.phi.squaredNorm());
  if (!want_grad) return out;
  out.grad.d_phi = s.d_phi;
  if (cfg.rho != 0.0) out.grad.d_phi += cfg.rho * m.d_phi;
  out.grad.d_theta_s = s.d_theta;
  if (cfg.regularize_outer) {
    out.grad.d_phi += 2.0 * cfg.lambda * p.phi;
    out.grad.d_theta_s += 2.0 * cfg.lambda * p.theta_s;
  }
  out.grad.d_theta_t = Matrix::Zero(p.theta_t.rows(), p.theta_t.cols());
  return out;
}

inline double outer_objective(const ModelParams& p, const SourceTask& source, const MetaSplit& split,
                              const MerlinConfig& cfg, Activation act) {
  return outer_objective_grad(p, source, nullptr, split, cfg, act, nullptr, false).value;
}

// Splits the target with `seed`, fits the inner head, returns the held-out loss.
inline std::pair<double, InnerSolution> meta_target_loss(const Matrix& phi, const LabeledSet& target,
                                                         const MerlinConfig& cfg, std::uint64_t seed,
                                                         Activation act) {
  validate(cfg);
  validate(target);
  const MetaSplit s = MetaSplit::make(target, cfg.split_fraction, seed);
  MetaEval m = meta_loss_on_split(phi, s, cfg, act, nullptr, false);
  return {m.value, std::move(m.inner)};
}

// Head for downstream use: the configured inner solver on the whole target set.
inline Matrix fit_target_head(const Matrix& phi, const LabeledSet& target, const MerlinConfig& cfg, Activation act) {
  const LossKind lk = meta_loss_kind(cfg);
  const HeadTargets t = HeadTargets::from_set(target, lk, cfg.encoding);
  const Matrix H = features(target.X, phi, act);
  if (cfg.inner_solver == InnerSolver::ClosedFormRidge) return inner_fit_ridge(H, t.Y, cfg.lambda).theta;
  return inner_fit_gd(H, t, cfg.inner_steps, cfg.inner_lr, cfg.inner_weight_decay, zero_head(phi, t)).theta;
}

// --- training loop -------------------------------------------------------------------

struct MerlinLogRow {
  int iter = 0;
  double objective = 0.0;
  double source_loss = 0.0;
  double meta_loss = 0.0;
  double condition_number = 0.0;
};

struct MerlinResult {
  ModelParams params;  // theta_t holds the head fit on the full target set
  std::vector<MerlinLogRow> log;
  int ill_conditioned_iters = 0;
};

inline std::uint64_t split_seed(std::uint64_t seed, int iter) {
  return derive_seed(derive_seed(seed, stream::kSplits), static_cast<std::uint64_t>(iter));
}

struct MerlinRunOptions {
  const ModelParams* init = nullptr;  // defaults to init_params(arch, seed)
  int log_every = 0;                  // 0 = no per-iteration log
  std::ostream* csv = nullptr;        // appended rows: iter,objective,source_loss,meta_loss,condition_number
  bool fit_head = true;
};

// One outer step per iteration: fresh split, fresh zero head (unless warm
// start), inner solve, gradient step on (phi, theta_s).
inline MerlinResult train_merlin(const SourceTask& source, const LabeledSet& target, const Architecture& arch,
                                 const MerlinConfig& cfg, const SGDConfig& sgd, std::uint64_t seed,
                                 const MerlinRunOptions& opt = {}) {
  validate(cfg);
  validate(sgd);
  validate(target);
  if (!source.is_population()) validate(*source.data);
  MerlinResult res;
  res.params = opt.init ? *opt.init : init_params(arch, derive_seed(seed, stream::kInit));
  check_congruent(res.params);

  std::optional<BatchCursor> cursor;
  if (!source.is_population())
    cursor.emplace(source.data->size(), sgd.batch_size, derive_seed(seed, stream::kSourceBatches));
  const Index steps_per_epoch = cursor ? cursor->steps_per_pass() : 1;
  SgdState state(res.params);
  std::optional<Matrix> warm;
  if (opt.csv) *opt.csv << "iter,objective,source_loss,meta_loss,condition_number\n";

  for (int it = 0; it < cfg.outer_iters; ++it) {
    const MetaSplit split = MetaSplit::make(target, cfg.split_fraction, split_seed(seed, it));
    std::optional<BatchView> batch;
    if (cursor) batch.emplace(*source.data, *cursor);
    const Matrix* init = cfg.warm_start && warm ? &*warm : nullptr;
    BilevelEval ev = outer_objective_grad(res.params, source, batch ? &batch->get() : nullptr, split, cfg, arch.act,
                                          init, true);
    if (cfg.inner_solver == InnerSolver::ClosedFormRidge && ev.inner.condition_number > cfg.ill_conditioned)
      ++res.ill_conditioned_iters;
    if (cfg.warm_start) warm = ev.inner.theta;
    if (cfg.grad_clip > 0.0) {
      const double norm = std::sqrt(ev.grad.d_phi.squaredNorm() + ev.grad.d_theta_s.squaredNorm());
      if (norm > cfg.grad_clip) {
        ev.grad.d_phi *= cfg.grad_clip / norm;
        ev.grad.d_theta_s *= cfg.grad_clip / norm;
      }
    }
    const int epoch = static_cast<int>(it / steps_per_epoch);
    state.step(res.params, ev.grad, scheduled_lr(sgd, epoch), sgd.momentum, sgd.weight_decay);
    if (!res.params.phi.allFinite() || !res.params.theta_s.allFinite())
      throw NumericError("outer optimization diverged; lower the learning rate");
    if (opt.log_every > 0 && (it % opt.log_every == 0 || it + 1 == cfg.outer_iters)) {
      MerlinLogRow row{it, ev.value, ev.source_loss, ev.meta_loss, ev.inner.condition_number};
      res.log.push_back(row);
      if (opt.csv)
        *opt.csv << row.iter << ',' << row.objective << ',' << row.source_loss << ',' << row.meta_loss << ','
                 << row.condition_number << '\n';
    }
  }
  if (opt.fit_head) res.params.theta_t = fit_target_head(res.params.phi, target, cfg, arch.act);
  return res;
}

}  // namespace merlin
