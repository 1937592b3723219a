#pragma once

// The composite AB experiment: pre-training, fine-tuning, joint training,
// target-only training and MeRLin compared on the same source/target draws,
// plus a rho x lambda sweep of MeRLin.

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "merlin/baselines.hpp"
#include "merlin/bilevel.hpp"
#include "merlin/data.hpp"
#include "merlin/metrics.hpp"
#include "merlin/parallel.hpp"
#include "merlin/report.hpp"

namespace merlin {

struct SemiSyntheticConfig {
  CompositeSpec spec;
  Index n_source = 20000;
  Index n_target = 500;
  Index n_test = 2000;
  Index n_masked = 2000;  // examples per masked evaluation of the pre-trained model
  Index width = 16;
  SGDConfig source_sgd{0.1, 0.9, 5e-3, 20, 128, {{10, 0.1}, {15, 0.1}}};
  SGDConfig target_sgd{0.05, 0.9, 5e-4, 200, 50, {{100, 0.1}}};
  double finetune_lr_scale = 0.1;
  std::vector<double> alpha_grid{0.05, 0.1, 0.2, 0.3, 0.5};
  double cv_fraction = 0.5;
  MerlinConfig merlin = default_merlin();
  // any of target_only, finetune, head_only, l2sp, joint, merlin
  std::vector<std::string> methods{"target_only", "finetune", "head_only", "joint", "merlin"};
  double l2sp_strength = 0.01;
  int seeds = 3;
  std::uint64_t seed = 0;

  static MerlinConfig default_merlin() {
    MerlinConfig m;
    m.rho = 0.5;
    m.lambda = 10.0;
    m.encoding = LabelEncoding::MulticlassRegression;
    m.outer_iters = 0;  // 0 = one outer step per source batch for every source epoch
    return m;
  }
};

inline void validate(const SemiSyntheticConfig& c) {
  validate(c.spec);
  require(c.n_source > 0 && c.n_target >= 4 && c.n_test > 0 && c.n_masked > 0, "set sizes must be positive");
  require(c.width > 0, "width must be positive");
  require(c.seeds >= 1, "need at least one seed");
  require(!c.alpha_grid.empty(), "alpha grid must be nonempty");
  require(c.finetune_lr_scale > 0.0, "fine-tuning rate scale must be positive");
  validate(c.source_sgd);
  validate(c.target_sgd);
  validate(c.merlin);
  for (const auto& m : c.methods)
    require(m == "target_only" || m == "finetune" || m == "head_only" || m == "l2sp" || m == "joint" ||
                m == "merlin",
            "unknown method '" + m + "'");
}

inline bool runs(const SemiSyntheticConfig& c, const std::string& method) {
  return std::find(c.methods.begin(), c.methods.end(), method) != c.methods.end();
}

struct SweepConfig {
  SemiSyntheticConfig base;
  std::vector<double> rhos{0.5, 1.0, 2.0, 4.0};
  std::vector<double> lambdas{0.1, 1.0, 10.0};
};

namespace detail {

struct CompositeDraw {
  LabeledSet source;
  LabeledSet target;
  LabeledSet test;
  Architecture arch;
};

inline CompositeDraw draw_composite(const SemiSyntheticConfig& c, std::uint64_t seed) {
  CompositeDraw d;
  d.source = generate_composite(c.spec, c.n_source, derive_seed(seed, 1), Variant::AB);
  d.target = generate_composite(c.spec, c.n_target, derive_seed(seed, 2), Variant::Target);
  d.test = generate_composite(c.spec, c.n_test, derive_seed(seed, 3), Variant::Target);
  d.arch = {c.spec.dim(), c.width, Activation::ReLU, c.spec.classes, c.spec.classes,
            LossKind::SoftmaxCrossEntropy, LossKind::SoftmaxCrossEntropy};
  return d;
}

inline MerlinConfig resolved_merlin(const SemiSyntheticConfig& c) {
  MerlinConfig m = c.merlin;
  if (m.outer_iters == 0) {
    const Index per_epoch = c.source_sgd.batch_size > 0
                                ? (c.n_source + c.source_sgd.batch_size - 1) / c.source_sgd.batch_size
                                : 1;
    m.outer_iters = static_cast<int>(per_epoch) * c.source_sgd.epochs;
  }
  return m;
}

inline Row method_row(const std::string& method, std::uint64_t seed, const ModelParams& p, const CompositeDraw& d) {
  Row r;
  r["method"] = method;
  r["seed"] = seed;
  r["train_accuracy"] = accuracy(d.target, p.theta_t, p.phi, d.arch.act);
  r["test_accuracy"] = accuracy(d.test, p.theta_t, p.phi, d.arch.act);
  r["test_loss"] = batch_loss(d.test, p.theta_t, p.phi, d.arch.act, LossKind::SoftmaxCrossEntropy);
  try {
    r["variance_ratio"] = variance_ratio(FeatureBatch::from(d.test, p.phi, d.arch.act));
  } catch (const NumericError&) {
    r["variance_ratio"] = std::numeric_limits<double>::quiet_NaN();  // collapsed features
  }
  return r;
}

inline std::vector<Row> semisynthetic_seed(const SemiSyntheticConfig& c, std::uint64_t seed) {
  const CompositeDraw d = draw_composite(c, seed);
  const Architecture& arch = d.arch;
  std::vector<Row> rows;

  const PretrainResult pre = pretrain(d.source, arch, c.source_sgd, seed);
  Row pr;
  pr["method"] = "pretrain";
  pr["seed"] = seed;
  pr["source_accuracy"] = accuracy(d.source, pre.params.theta_s, pre.params.phi, arch.act);
  for (Variant v : {Variant::AB, Variant::AOnly, Variant::BOnly})
    pr["masked_" + to_string(v)] =
        masked_eval(pre.params, pre.params.theta_s, arch.act, c.spec, v, c.n_masked, derive_seed(seed, 4));
  rows.push_back(pr);

  if (runs(c, "target_only"))
    rows.push_back(method_row("target_only", seed, train_target_only(d.target, arch, c.target_sgd, seed), d));
  if (runs(c, "finetune")) {
    FinetuneOptions ft;
    ft.lr_scale = c.finetune_lr_scale;
    rows.push_back(method_row("finetune", seed, finetune(d.target, pre.phi_pre, arch, c.target_sgd, seed, ft), d));
  }
  if (runs(c, "head_only")) {
    FinetuneOptions ho;
    ho.mode = FinetuneMode::HeadOnly;
    ho.lr_scale = 1.0;
    rows.push_back(method_row("head_only", seed, finetune(d.target, pre.phi_pre, arch, c.target_sgd, seed, ho), d));
  }
  if (runs(c, "l2sp"))
    rows.push_back(method_row(
        "l2sp", seed,
        l2sp_finetune(d.target, {c.l2sp_strength, pre.phi_pre}, arch, c.target_sgd, seed, c.finetune_lr_scale), d));

  if (runs(c, "joint")) {
    // alpha by held-out target cross-entropy
    const Selection sel = select_by_validation(
        d.target, c.alpha_grid, c.cv_fraction, seed,
        [&](const LabeledSet& tr, double alpha) {
          JointConfig jc;
          jc.alpha = alpha;
          return joint_train(d.source, tr, arch, jc, c.source_sgd, seed);
        },
        [&](const ModelParams& p, const LabeledSet& val) {
          return batch_loss(val, p.theta_t, p.phi, arch.act, LossKind::SoftmaxCrossEntropy);
        });
    JointConfig jc;
    jc.alpha = sel.value;
    Row jr = method_row("joint", seed, joint_train(d.source, d.target, arch, jc, c.source_sgd, seed), d);
    jr["alpha"] = sel.value;
    rows.push_back(jr);
  }
  if (!runs(c, "merlin")) return rows;
  const MerlinConfig mc = resolved_merlin(c);
  const MerlinResult mr = train_merlin(SourceTask::empirical(d.source, LossKind::SoftmaxCrossEntropy), d.target,
                                       arch, mc, c.source_sgd, seed);
  Row mrow = method_row("merlin", seed, mr.params, d);
  mrow["rho"] = mc.rho;
  mrow["lambda"] = mc.lambda;
  mrow["ill_conditioned_iters"] = mr.ill_conditioned_iters;
  rows.push_back(mrow);
  return rows;
}

inline double method_mean(const std::vector<Row>& rows, const std::string& method, const std::string& metric) {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r["method"] == method && r.contains(metric)) v.push_back(r[metric].get<double>());
  return mean(v);
}

}  // namespace detail

// Seeds run on up to `jobs` threads; seed s uses cfg.seed + s.
inline Report run_semisynthetic(const SemiSyntheticConfig& cfg, int jobs = 1) {
  validate(cfg);
  const auto per_seed = parallel_map(cfg.seeds, jobs, [&](int s) {
    return detail::semisynthetic_seed(cfg, cfg.seed + static_cast<std::uint64_t>(s));
  });
  Report report;
  report.experiment = "semisynthetic";
  for (const auto& rows : per_seed) report.rows.insert(report.rows.end(), rows.begin(), rows.end());

  const auto& rows = report.rows;
  nlohmann::ordered_json s;
  s["seeds"] = cfg.seeds;
  s["methods"] = summarize_by(rows, "method",
                              {"train_accuracy", "test_accuracy", "variance_ratio", "masked_A", "masked_B"});
  const double b_only = detail::method_mean(rows, "pretrain", "masked_B");
  const double a_only = detail::method_mean(rows, "pretrain", "masked_A");
  const double chance = 1.0 / cfg.spec.classes;
  const double merlin_acc = detail::method_mean(rows, "merlin", "test_accuracy");
  const double merlin_vr = detail::method_mean(rows, "merlin", "variance_ratio");
  nlohmann::ordered_json margins;
  double min_margin = std::numeric_limits<double>::infinity();
  bool leads = true;
  for (const char* m : {"finetune", "joint", "target_only"}) {
    const double gap = merlin_acc - detail::method_mean(rows, m, "test_accuracy");
    margins[m] = gap;
    min_margin = std::isnan(gap) ? gap : std::min(min_margin, gap);
    leads = leads && gap >= 0.05;  // false when a method did not run
  }
  s["pretrain_b_only"] = b_only;
  s["pretrain_a_only"] = a_only;
  s["pretrain_relies_on_b"] = b_only >= 0.9 && a_only <= chance + 0.15;
  s["merlin_margin"] = margins;
  s["merlin_min_margin"] = min_margin;
  s["merlin_leads_by_5_points"] = leads;
  s["merlin_lowest_variance_ratio"] = merlin_vr < detail::method_mean(rows, "finetune", "variance_ratio") &&
                                      merlin_vr < detail::method_mean(rows, "joint", "variance_ratio");
  report.summary = s;
  return report;
}

// One row per (seed, rho, lambda) cell; data and pre-processing shared per seed.
inline Report run_sweep(const SweepConfig& cfg, int jobs = 1) {
  validate(cfg.base);
  require(!cfg.rhos.empty() && !cfg.lambdas.empty(), "sweep grids must be nonempty");
  const auto per_seed = parallel_map(cfg.base.seeds, jobs, [&](int s) {
    const std::uint64_t seed = cfg.base.seed + static_cast<std::uint64_t>(s);
    const detail::CompositeDraw d = detail::draw_composite(cfg.base, seed);
    const SourceTask task = SourceTask::empirical(d.source, LossKind::SoftmaxCrossEntropy);
    std::vector<Row> rows;
    for (double rho : cfg.rhos)
      for (double lambda : cfg.lambdas) {
        MerlinConfig mc = detail::resolved_merlin(cfg.base);
        mc.rho = rho;
        mc.lambda = lambda;
        const MerlinResult mr = train_merlin(task, d.target, d.arch, mc, cfg.base.source_sgd, seed);
        Row r = detail::method_row("merlin", seed, mr.params, d);
        r["rho"] = rho;
        r["lambda"] = lambda;
        r["ill_conditioned_iters"] = mr.ill_conditioned_iters;
        rows.push_back(r);
      }
    return rows;
  });
  Report report;
  report.experiment = "sweep";
  for (const auto& rows : per_seed) report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  nlohmann::ordered_json cells = nlohmann::ordered_json::array();
  for (double rho : cfg.rhos)
    for (double lambda : cfg.lambdas) {
      std::vector<double> acc;
      std::vector<double> vr;
      for (const auto& r : report.rows)
        if (r["rho"].get<double>() == rho && r["lambda"].get<double>() == lambda) {
          acc.push_back(r["test_accuracy"].get<double>());
          vr.push_back(r["variance_ratio"].get<double>());
        }
      nlohmann::ordered_json cell;
      cell["rho"] = rho;
      cell["lambda"] = lambda;
      cell["test_accuracy"] = mean_std(acc);
      cell["variance_ratio"] = mean_std(vr);
      cells.push_back(cell);
    }
  report.summary["seeds"] = cfg.base.seeds;
  report.summary["cells"] = cells;
  return report;
}

}  // namespace merlin
