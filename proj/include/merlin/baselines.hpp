#pragma once

// Transfer-learning baselines: target-only, pre-training, fine-tuning, joint
// training and L2-SP, plus the L2-regularized objectives used with the
// quadratic-network theory setting (full-batch, multi-restart).

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "merlin/data.hpp"
#include "merlin/netcore.hpp"
#include "merlin/population.hpp"
#include "merlin/rng.hpp"
#include "merlin/types.hpp"

namespace merlin {

// Seed sub-streams shared by every trainer so that degenerate configurations
// (alpha = 1, rho = 0, L2-SP strength 0) replay the matching baseline exactly.
namespace stream {
inline constexpr std::uint64_t kInit = 11;
inline constexpr std::uint64_t kSourceBatches = 12;
inline constexpr std::uint64_t kTargetBatches = 13;
inline constexpr std::uint64_t kSplits = 14;
inline constexpr std::uint64_t kRestart = 15;
inline constexpr std::uint64_t kCrossVal = 16;
}  // namespace stream

struct SGDConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int epochs = 10;
  Index batch_size = 0;  // 0 = full batch
  std::vector<std::pair<int, double>> lr_schedule;  // (epoch, factor): lr *= factor from that epoch on
};

inline void validate(const SGDConfig& c) {
  require(c.lr > 0.0, "learning rate must be positive");
  require(c.epochs >= 0, "epoch count must be non-negative");
  require(c.batch_size >= 0, "batch size must be non-negative");
  for (const auto& [epoch, factor] : c.lr_schedule) {
    (void)epoch;
    require(factor > 0.0 && factor <= 1.0, "schedule factors must lie in (0, 1]");
  }
}

inline double scheduled_lr(const SGDConfig& c, int epoch) {
  double lr = c.lr;
  for (const auto& [at, factor] : c.lr_schedule)
    if (epoch >= at) lr *= factor;
  return lr;
}

// Full-batch gradient descent to convergence for the theory objectives.
struct GdConfig {
  double lr = 0.05;
  Index max_steps = 100000;
  double grad_tol = 1e-8;
  int restarts = 10;
  double lr_growth = 1.02;
  double max_lr = 1.0;
};

struct JointConfig {
  double alpha = 0.5;
  double lambda = 0.0;
  Index target_batch_size = 0;  // 0 = full target set
};

struct L2SPConfig {
  double strength = 0.0;
  Matrix anchor;  // pre-trained phi
};

// Shuffled mini-batch index stream over a set; reshuffles after each pass.
class BatchCursor {
 public:
  BatchCursor(Index n, Index batch_size, std::uint64_t seed)
      : n_(n), batch_(batch_size <= 0 || batch_size >= n ? n : batch_size), rng_(seed) {
    order_.resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) order_[static_cast<std::size_t>(i)] = i;
    if (batch_ < n_) rng_.shuffle(order_);
  }

  bool full_batch() const { return batch_ == n_; }
  Index steps_per_pass() const { return (n_ + batch_ - 1) / batch_; }

  std::vector<Index> next() {
    if (pos_ >= n_) {
      pos_ = 0;
      if (batch_ < n_) rng_.shuffle(order_);
    }
    const Index end = std::min(n_, pos_ + batch_);
    std::vector<Index> rows(order_.begin() + pos_, order_.begin() + end);
    pos_ = end;
    return rows;
  }

 private:
  Index n_;
  Index batch_;
  Index pos_ = 0;
  Rng rng_;
  std::vector<Index> order_;
};

// A view of a labeled set restricted to one batch; avoids copying in the
// full-batch case.
class BatchView {
 public:
  BatchView(const LabeledSet& set, BatchCursor& cursor) : set_(set) {
    if (!cursor.full_batch()) {
      owned_ = set.subset(cursor.next());
    }
  }
  const LabeledSet& get() const { return owned_ ? *owned_ : set_; }

 private:
  const LabeledSet& set_;
  std::optional<LabeledSet> owned_;
};

// --- source term: empirical or infinite-source -------------------------------

struct SourceTask {
  const LabeledSet* data = nullptr;
  std::optional<TheoryDist> population;
  LossKind loss = LossKind::SquaredError;

  static SourceTask empirical(const LabeledSet& set, LossKind loss) { return {&set, std::nullopt, loss}; }
  static SourceTask infinite(const TheoryDist& dist) { return {nullptr, dist, LossKind::SquaredError}; }
  bool is_population() const { return population.has_value(); }
};

inline HeadGradient source_loss_grad(const SourceTask& task, const LabeledSet* batch, const Matrix& theta,
                                     const Matrix& phi, Activation act) {
  if (task.is_population()) {
    if (act != Activation::Quadratic)
      throw ContractError("infinite-source mode needs quadratic activation");
    PopulationGrad pg = population_loss_grad(theta, phi, *task.population);
    return {pg.value, std::move(pg.d_theta), std::move(pg.d_phi)};
  }
  require(batch != nullptr, "empirical source term needs data");
  return loss_and_grad(*batch, theta, phi, act, task.loss);
}

inline double source_loss(const SourceTask& task, const Matrix& theta, const Matrix& phi, Activation act) {
  if (task.is_population()) return population_loss(theta, phi, *task.population, act);
  return batch_loss(*task.data, theta, phi, act, task.loss);
}

// --- full-batch minimizer ----------------------------------------------------

using Objective = std::function<double(const ModelParams&, Gradients*)>;

struct GdResult {
  ModelParams params;
  double objective = 0.0;
  double grad_norm = 0.0;
  Index steps = 0;
  bool converged = false;
};

inline void masked_axpy(ModelParams& p, const Gradients& g, double step, GradMask mask) {
  if (mask.phi) p.phi -= step * g.d_phi;
  if (mask.theta_s) p.theta_s -= step * g.d_theta_s;
  if (mask.theta_t) p.theta_t -= step * g.d_theta_t;
}

inline double masked_norm(const Gradients& g, GradMask mask) {
  double s = 0.0;
  if (mask.phi) s += g.d_phi.squaredNorm();
  if (mask.theta_s) s += g.d_theta_s.squaredNorm();
  if (mask.theta_t) s += g.d_theta_t.squaredNorm();
  return std::sqrt(s);
}

// Gradient descent that never accepts an increase of the objective: a step
// that would raise it is retried with half the rate. Accepted steps grow the
// rate by lr_growth, capped at max_lr.
inline GdResult minimize_full_batch(const Objective& f, ModelParams start, const GdConfig& cfg,
                                    GradMask mask = {}) {
  require(cfg.lr > 0.0, "learning rate must be positive");
  GdResult r;
  r.params = std::move(start);
  Gradients g = Gradients::zeros_like(r.params);
  r.objective = f(r.params, &g);
  if (!std::isfinite(r.objective)) throw NumericError("objective is not finite at the starting point");
  double lr = cfg.lr;
  Gradients g_trial = g;
  for (r.steps = 0; r.steps < cfg.max_steps; ++r.steps) {
    r.grad_norm = masked_norm(g, mask);
    if (r.grad_norm <= cfg.grad_tol) {
      r.converged = true;
      break;
    }
    bool accepted = false;
    for (int tries = 0; tries < 60 && !accepted; ++tries) {
      ModelParams trial = r.params;
      masked_axpy(trial, g, lr, mask);
      const double value = f(trial, &g_trial);
      if (std::isfinite(value) && value <= r.objective) {
        r.params = std::move(trial);
        r.objective = value;
        std::swap(g, g_trial);
        accepted = true;
        lr = std::min(cfg.max_lr, lr * cfg.lr_growth);
      } else {
        lr *= 0.5;
      }
    }
    if (!accepted) {
      r.grad_norm = masked_norm(g, mask);
      break;  // no descent at machine precision
    }
  }
  if (r.steps == cfg.max_steps) r.grad_norm = masked_norm(g, mask);
  return r;
}

// --- regularized theory objectives -------------------------------------------

inline double params_l2(const Matrix& m) { return m.squaredNorm(); }

// L_s(theta_s, phi) + lambda (|theta_s|^2 + |phi|_F^2)
inline Objective pretrain_objective(const SourceTask& task, Activation act, double lambda) {
  return [task, act, lambda](const ModelParams& p, Gradients* g) {
    const HeadGradient s = source_loss_grad(task, task.data, p.theta_s, p.phi, act);
    const double value = s.value + lambda * (params_l2(p.theta_s) + params_l2(p.phi));
    if (g) {
      g->d_phi = s.d_phi + 2.0 * lambda * p.phi;
      g->d_theta_s = s.d_theta + 2.0 * lambda * p.theta_s;
      g->d_theta_t = Matrix::Zero(p.theta_t.rows(), p.theta_t.cols());
    }
    return value;
  };
}

// (1-alpha) L_s + alpha L_t + lambda (|theta_s|^2 + |theta_t|^2 + |phi|_F^2)
inline Objective joint_objective(const SourceTask& task, const LabeledSet& target, Activation act,
                                 LossKind target_loss, double alpha, double lambda) {
  return [task, &target, act, target_loss, alpha, lambda](const ModelParams& p, Gradients* g) {
    const HeadGradient s = source_loss_grad(task, task.data, p.theta_s, p.phi, act);
    const HeadGradient t = loss_and_grad(target, p.theta_t, p.phi, act, target_loss);
    const double value = (1.0 - alpha) * s.value + alpha * t.value +
                         lambda * (params_l2(p.theta_s) + params_l2(p.theta_t) + params_l2(p.phi));
    if (g) {
      g->d_phi = (1.0 - alpha) * s.d_phi + alpha * t.d_phi + 2.0 * lambda * p.phi;
      g->d_theta_s = (1.0 - alpha) * s.d_theta + 2.0 * lambda * p.theta_s;
      g->d_theta_t = alpha * t.d_theta + 2.0 * lambda * p.theta_t;
    }
    return value;
  };
}

struct RestartResult {
  ModelParams params;
  double objective = std::numeric_limits<double>::infinity();
  int best_restart = -1;
  std::vector<double> objectives;  // per restart
  bool converged = false;
};

// Runs `cfg.restarts` descents from independent initializations and keeps the
// lowest objective.
inline RestartResult multi_restart(const Objective& f, const Architecture& arch, const GdConfig& cfg,
                                   std::uint64_t seed, GradMask mask = {}) {
  RestartResult best;
  for (int r = 0; r < std::max(1, cfg.restarts); ++r) {
    const ModelParams init = init_params(arch, derive_seed(seed, stream::kRestart + 100 * r));
    GdResult res = minimize_full_batch(f, init, cfg, mask);
    best.objectives.push_back(res.objective);
    if (res.objective < best.objective) {
      best.objective = res.objective;
      best.params = std::move(res.params);
      best.best_restart = r;
      best.converged = res.converged;
    }
  }
  return best;
}

inline RestartResult pretrain_regularized(const SourceTask& task, const Architecture& arch, double lambda,
                                          const GdConfig& cfg, std::uint64_t seed) {
  GradMask mask{true, true, false};
  return multi_restart(pretrain_objective(task, arch.act, lambda), arch, cfg, seed, mask);
}

inline RestartResult joint_train_regularized(const SourceTask& task, const LabeledSet& target,
                                             const Architecture& arch, const JointConfig& jc, const GdConfig& cfg,
                                             std::uint64_t seed) {
  require(jc.alpha >= 0.0 && jc.alpha <= 1.0, "alpha must lie in [0, 1]");
  require(jc.lambda >= 0.0, "lambda must be non-negative");
  return multi_restart(joint_objective(task, target, arch.act, arch.target_loss, jc.alpha, jc.lambda), arch,
                       cfg, seed);
}

// Head-only ridge fit with frozen features:
// argmin_theta mean_i |theta^T h_i - y_i|^2 + lambda |theta|^2.
inline Matrix fit_head_ridge_mean(const Matrix& H, const Matrix& Y, double lambda) {
  const auto n = static_cast<double>(H.rows());
  Matrix M = H.transpose() * H / n;
  M.diagonal().array() += lambda;
  Eigen::LDLT<Matrix> ldlt(M);
  if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-15)
    throw NumericError("head ridge system is singular; use lambda > 0");
  Matrix theta = ldlt.solve(H.transpose() * Y / n);
  require_finite(theta, "head ridge solution");
  return theta;
}

// --- SGD trainers --------------------------------------------------------------

namespace detail {

inline void add_scaled(Matrix& dst, const Matrix& src, double s) {
  if (s != 0.0) dst += s * src;
}

inline void check_finite(const ModelParams& p) {
  if (!p.phi.allFinite() || !p.theta_s.allFinite() || !p.theta_t.allFinite())
    throw NumericError("training diverged (non-finite parameters); lower the learning rate");
}

// Trains theta_t (and phi unless frozen) on the target set, optionally with
// an L2-SP penalty strength |phi - anchor|^2 and a head penalty head_l2 |theta_t|^2.
inline ModelParams train_on_target(const LabeledSet& target, ModelParams params, const Architecture& arch,
                                   const SGDConfig& cfg, double lr_scale, std::uint64_t seed, bool freeze_phi,
                                   double l2sp_strength, const Matrix* anchor, double head_l2) {
  validate(target);
  validate(cfg);
  BatchCursor cursor(target.size(), cfg.batch_size, derive_seed(seed, stream::kTargetBatches));
  SgdState state(params);
  const Index steps = cursor.steps_per_pass();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_scale * scheduled_lr(cfg, epoch);
    for (Index s = 0; s < steps; ++s) {
      BatchView batch(target, cursor);
      HeadGradient hg = loss_and_grad(batch.get(), params.theta_t, params.phi, arch.act, arch.target_loss,
                                      !freeze_phi);
      Gradients g = Gradients::zeros_like(params);
      g.d_theta_t = hg.d_theta;
      add_scaled(g.d_theta_t, params.theta_t, 2.0 * head_l2);
      if (!freeze_phi) {
        g.d_phi = hg.d_phi;
        if (anchor) add_scaled(g.d_phi, params.phi - *anchor, 2.0 * l2sp_strength);
      }
      state.step(params, g, lr, cfg.momentum, freeze_phi ? 0.0 : cfg.weight_decay);
    }
    check_finite(params);
  }
  return params;
}

}  // namespace detail

inline ModelParams train_target_only(const LabeledSet& target, const Architecture& arch, const SGDConfig& cfg,
                                     std::uint64_t seed) {
  const ModelParams init = init_params(arch, derive_seed(seed, stream::kInit));
  return detail::train_on_target(target, init, arch, cfg, 1.0, seed, false, 0.0, nullptr, 0.0);
}

struct PretrainResult {
  ModelParams params;
  Matrix phi_pre;
};

inline PretrainResult pretrain(const LabeledSet& source, const Architecture& arch, const SGDConfig& cfg,
                               std::uint64_t seed) {
  validate(source);
  validate(cfg);
  ModelParams params = init_params(arch, derive_seed(seed, stream::kInit));
  BatchCursor cursor(source.size(), cfg.batch_size, derive_seed(seed, stream::kSourceBatches));
  SgdState state(params);
  const Index steps = cursor.steps_per_pass();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = scheduled_lr(cfg, epoch);
    for (Index s = 0; s < steps; ++s) {
      BatchView batch(source, cursor);
      const HeadGradient hg = loss_and_grad(batch.get(), params.theta_s, params.phi, arch.act, arch.source_loss);
      Gradients g = Gradients::zeros_like(params);
      g.d_phi = hg.d_phi;
      g.d_theta_s = hg.d_theta;
      state.step(params, g, lr, cfg.momentum, cfg.weight_decay);
    }
    detail::check_finite(params);
  }
  return {params, params.phi};
}

enum class FinetuneMode { AllLayers, HeadOnly };

struct FinetuneOptions {
  FinetuneMode mode = FinetuneMode::AllLayers;
  double lr_scale = 0.1;  // relative to the pre-training rate
  double head_l2 = 0.0;   // lambda |theta_t|^2, used by head-only
};

// Starts from phi_pre with a fresh zero target head. Head-only with squared
// error is solved in closed form (ridge); otherwise SGD on the target set.
inline ModelParams finetune(const LabeledSet& target, const Matrix& phi_pre, const Architecture& arch,
                            const SGDConfig& cfg, std::uint64_t seed, const FinetuneOptions& opt = {}) {
  require(phi_pre.rows() == arch.input_dim && phi_pre.cols() == arch.width,
          "pre-trained extractor does not match the architecture");
  ModelParams params;
  params.phi = phi_pre;
  params.theta_s = Matrix::Zero(arch.width, arch.source_outputs);
  params.theta_t = Matrix::Zero(arch.width, arch.target_outputs);
  if (opt.mode == FinetuneMode::HeadOnly) {
    if (arch.target_loss == LossKind::SquaredError && opt.head_l2 > 0.0) {
      validate(target);
      const Matrix H = features(target.X, phi_pre, arch.act);
      params.theta_t = fit_head_ridge_mean(H, regression_targets(target, arch.target_outputs), opt.head_l2);
      return params;
    }
    return detail::train_on_target(target, params, arch, cfg, opt.lr_scale, seed, true, 0.0, nullptr,
                                   opt.head_l2);
  }
  return detail::train_on_target(target, params, arch, cfg, opt.lr_scale, seed, false, 0.0, nullptr, 0.0);
}

// Fine-tunes all layers with strength |phi - anchor|_F^2 added to the loss.
inline ModelParams l2sp_finetune(const LabeledSet& target, const L2SPConfig& l2sp, const Architecture& arch,
                                 const SGDConfig& cfg, std::uint64_t seed, double lr_scale = 0.1) {
  require(l2sp.strength >= 0.0, "L2-SP strength must be non-negative");
  require(l2sp.anchor.rows() == arch.input_dim && l2sp.anchor.cols() == arch.width,
          "anchor does not match the architecture");
  ModelParams params;
  params.phi = l2sp.anchor;
  params.theta_s = Matrix::Zero(arch.width, arch.source_outputs);
  params.theta_t = Matrix::Zero(arch.width, arch.target_outputs);
  return detail::train_on_target(target, params, arch, cfg, lr_scale, seed, false, l2sp.strength, &l2sp.anchor,
                                 0.0);
}

// Each step combines one source batch and one target batch; an epoch is one
// pass over the source set.
inline ModelParams joint_train(const LabeledSet& source, const LabeledSet& target, const Architecture& arch,
                               const JointConfig& jc, const SGDConfig& cfg, std::uint64_t seed) {
  validate(source);
  validate(target);
  validate(cfg);
  require(jc.alpha >= 0.0 && jc.alpha <= 1.0, "alpha must lie in [0, 1]");
  ModelParams params = init_params(arch, derive_seed(seed, stream::kInit));
  BatchCursor src(source.size(), cfg.batch_size, derive_seed(seed, stream::kSourceBatches));
  BatchCursor tgt(target.size(), jc.target_batch_size, derive_seed(seed, stream::kTargetBatches));
  SgdState state(params);
  const Index steps = src.steps_per_pass();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = scheduled_lr(cfg, epoch);
    for (Index s = 0; s < steps; ++s) {
      BatchView sb(source, src);
      BatchView tb(target, tgt);
      const HeadGradient hs = loss_and_grad(sb.get(), params.theta_s, params.phi, arch.act, arch.source_loss);
      const HeadGradient ht = loss_and_grad(tb.get(), params.theta_t, params.phi, arch.act, arch.target_loss);
      Gradients g;
      g.d_phi = (1.0 - jc.alpha) * hs.d_phi + jc.alpha * ht.d_phi;
      g.d_theta_s = (1.0 - jc.alpha) * hs.d_theta;
      g.d_theta_t = jc.alpha * ht.d_theta;
      if (jc.lambda > 0.0) {
        g.d_phi += 2.0 * jc.lambda * params.phi;
        g.d_theta_s += 2.0 * jc.lambda * params.theta_s;
        g.d_theta_t += 2.0 * jc.lambda * params.theta_t;
      }
      state.step(params, g, lr, cfg.momentum, cfg.weight_decay);
    }
    detail::check_finite(params);
  }
  return params;
}

struct Selection {
  double value = 0.0;
  double score = std::numeric_limits<double>::infinity();
};

// Picks the grid value whose model, trained on one split of the target set,
// has the lowest `score` on the other split. `train(train_split, value)`
// returns a model; `score(model, val_split)` is lower-is-better.
template <typename TrainFn, typename ScoreFn>
Selection select_by_validation(const LabeledSet& target, const std::vector<double>& grid, double fraction,
                               std::uint64_t seed, TrainFn&& train, ScoreFn&& score) {
  require(!grid.empty(), "selection grid must be nonempty");
  const auto [tr, val] = split(target, fraction, derive_seed(seed, stream::kCrossVal));
  Selection best{grid.front()};
  for (double v : grid) {
    const double s = score(train(tr, v), val);
    if (s < best.score) best = {v, s};
  }
  return best;
}

inline std::vector<double> default_alpha_grid() { return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}; }

}  // namespace merlin
