#pragma once

// JSON experiment configs. Every field is optional and falls back to the
// struct default; unknown keys are rejected so typos do not silently run the
// default experiment.

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "merlin/report.hpp"
#include "merlin/semisynthetic.hpp"
#include "merlin/theory.hpp"

namespace merlin {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Json = nlohmann::ordered_json;

namespace detail {

// Reads fields out of one JSON object and remembers which keys were used.
class FieldReader {
 public:
  FieldReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <typename Fn>
  void with(const char* key, Fn&& fn) {
    used_.insert(key);
    if (j_.contains(key)) fn(j_.at(key), where_ + "." + key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      (void)value;
      if (!used_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> used_;
};

template <typename Fn>
auto converting(const std::string& where, Fn&& fn) {
  try {
    return fn();
  } catch (const ContractError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

}  // namespace detail

// --- to JSON -------------------------------------------------------------------------

inline Json to_json(const SGDConfig& c) {
  Json sched = Json::array();
  for (const auto& [epoch, factor] : c.lr_schedule) sched.push_back({epoch, factor});
  return {{"lr", c.lr},           {"momentum", c.momentum},     {"weight_decay", c.weight_decay},
          {"epochs", c.epochs},   {"batch_size", c.batch_size}, {"lr_schedule", sched}};
}

inline Json to_json(const GdConfig& c) {
  return {{"lr", c.lr},           {"max_steps", c.max_steps}, {"grad_tol", c.grad_tol},
          {"restarts", c.restarts}, {"lr_growth", c.lr_growth}, {"max_lr", c.max_lr}};
}

inline Json to_json(const MerlinConfig& c) {
  return {{"rho", c.rho},
          {"lambda", c.lambda},
          {"inner_steps", c.inner_steps},
          {"inner_lr", c.inner_lr},
          {"inner_weight_decay", c.inner_weight_decay},
          {"split_fraction", c.split_fraction},
          {"outer_iters", c.outer_iters},
          {"inner_solver", to_string(c.inner_solver)},
          {"encoding", c.encoding == LabelEncoding::Scalar ? "scalar" : "multiclass_regression"},
          {"inner_loss", to_string(c.inner_loss)},
          {"regularize_outer", c.regularize_outer},
          {"warm_start", c.warm_start},
          {"ill_conditioned", c.ill_conditioned},
          {"grad_clip", c.grad_clip}};
}

inline Json to_json(const CompositeSpec& s) {
  return {{"classes", s.classes},
          {"d_A", s.d_A},
          {"d_B", s.d_B},
          {"a_noise", s.a_noise},
          {"a_distractors", s.a_distractors},
          {"distractor_std", s.distractor_std},
          {"proto_active", s.proto_active},
          {"proto_low", s.proto_low},
          {"proto_high", s.proto_high},
          {"sig_std", s.sig_std},
          {"clamp", {s.clamp_lo, s.clamp_hi}},
          {"proto_seed", s.proto_seed}};
}

inline Json to_json(const Theorem1Config& c) {
  const auto& f = c.finetune;
  const auto& j = c.joint;
  return {{"seed", c.seed},
          {"run_finetune", c.run_finetune},
          {"run_joint", c.run_joint},
          {"gd", to_json(c.gd)},
          {"cv_gd", to_json(c.cv_gd)},
          {"finetune",
           {{"d", f.d}, {"k", f.k}, {"width", f.width}, {"n_target", f.n_target}, {"lambda", f.lambda},
            {"seeds", f.seeds}, {"restarts", f.restarts}}},
          {"joint",
           {{"d", j.d},
            {"k", j.k},
            {"width", j.width},
            {"n_target", j.n_target},
            {"lambda_grid", j.lambda_grid},
            {"alpha_grid", j.alpha_grid},
            {"cv_fraction", j.cv_fraction},
            {"seeds", j.seeds},
            {"restarts", j.restarts},
            {"cv_restarts", j.cv_restarts},
            {"overfit_population", j.overfit_population},
            {"overfit_train", j.overfit_train}}}};
}

inline Json to_json(const Theorem2Config& c) {
  return {{"seed", c.seed},         {"d", c.d},
          {"k", c.k},               {"width", c.width},
          {"n_target", c.n_target}, {"lambda", c.lambda},
          {"rho", c.rho},           {"seeds", c.seeds},
          {"restarts", c.restarts}, {"outer_iters", c.outer_iters},
          {"lr", c.lr},             {"momentum", c.momentum},
          {"grad_clip", c.grad_clip}, {"eval_splits", c.eval_splits},
          {"optimality_gap", c.optimality_gap}};
}

inline Json to_json(const SemiSyntheticConfig& c) {
  return {{"seed", c.seed},
          {"seeds", c.seeds},
          {"dataset", to_json(c.spec)},
          {"n_source", c.n_source},
          {"n_target", c.n_target},
          {"n_test", c.n_test},
          {"n_masked", c.n_masked},
          {"width", c.width},
          {"source_sgd", to_json(c.source_sgd)},
          {"target_sgd", to_json(c.target_sgd)},
          {"finetune_lr_scale", c.finetune_lr_scale},
          {"alpha_grid", c.alpha_grid},
          {"cv_fraction", c.cv_fraction},
          {"merlin", to_json(c.merlin)},
          {"methods", c.methods},
          {"l2sp_strength", c.l2sp_strength}};
}

inline Json to_json(const SweepConfig& c) {
  Json j = to_json(c.base);
  j["rhos"] = c.rhos;
  j["lambdas"] = c.lambdas;
  return j;
}

// --- from JSON -----------------------------------------------------------------------

inline void read_into(const Json& j, const std::string& where, SGDConfig& c) {
  detail::FieldReader r(j, where);
  r.get("lr", c.lr);
  r.get("momentum", c.momentum);
  r.get("weight_decay", c.weight_decay);
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.with("lr_schedule", [&](const Json& s, const std::string& w) {
    if (!s.is_array()) throw ConfigError(w + ": expected [[epoch, factor], ...]");
    c.lr_schedule.clear();
    for (const auto& e : s) {
      if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number())
        throw ConfigError(w + ": expected [[epoch, factor], ...]");
      c.lr_schedule.emplace_back(e[0].get<int>(), e[1].get<double>());
    }
  });
  r.finish();
  detail::converting(where, [&] { validate(c); return 0; });
}

inline void read_into(const Json& j, const std::string& where, GdConfig& c) {
  detail::FieldReader r(j, where);
  r.get("lr", c.lr);
  r.get("max_steps", c.max_steps);
  r.get("grad_tol", c.grad_tol);
  r.get("restarts", c.restarts);
  r.get("lr_growth", c.lr_growth);
  r.get("max_lr", c.max_lr);
  r.finish();
  if (!(c.lr > 0.0 && c.max_steps > 0 && c.grad_tol > 0.0 && c.restarts >= 1 && c.lr_growth >= 1.0 &&
        c.max_lr >= c.lr))
    throw ConfigError(where + ": inconsistent gradient-descent settings");
}

inline void read_into(const Json& j, const std::string& where, MerlinConfig& c) {
  detail::FieldReader r(j, where);
  r.get("rho", c.rho);
  r.get("lambda", c.lambda);
  r.get("inner_steps", c.inner_steps);
  r.get("inner_lr", c.inner_lr);
  r.get("inner_weight_decay", c.inner_weight_decay);
  r.get("split_fraction", c.split_fraction);
  r.get("outer_iters", c.outer_iters);
  std::string solver = to_string(c.inner_solver);
  std::string encoding = c.encoding == LabelEncoding::Scalar ? "scalar" : "multiclass_regression";
  std::string inner_loss = to_string(c.inner_loss);
  r.get("inner_solver", solver);
  r.get("encoding", encoding);
  r.get("inner_loss", inner_loss);
  r.get("regularize_outer", c.regularize_outer);
  r.get("warm_start", c.warm_start);
  r.get("ill_conditioned", c.ill_conditioned);
  r.get("grad_clip", c.grad_clip);
  r.finish();
  detail::converting(where, [&] {
    c.inner_solver = inner_solver_from_string(solver);
    c.inner_loss = loss_from_string(inner_loss);
    if (encoding == "scalar")
      c.encoding = LabelEncoding::Scalar;
    else if (encoding == "multiclass_regression")
      c.encoding = LabelEncoding::MulticlassRegression;
    else
      throw ContractError("unknown encoding '" + encoding + "'");
    validate(c);
    return 0;
  });
}

inline void read_into(const Json& j, const std::string& where, CompositeSpec& s) {
  detail::FieldReader r(j, where);
  r.get("classes", s.classes);
  r.get("d_A", s.d_A);
  r.get("d_B", s.d_B);
  r.get("a_noise", s.a_noise);
  r.get("a_distractors", s.a_distractors);
  r.get("distractor_std", s.distractor_std);
  r.get("proto_active", s.proto_active);
  r.get("proto_low", s.proto_low);
  r.get("proto_high", s.proto_high);
  r.get("sig_std", s.sig_std);
  std::vector<double> clamp{s.clamp_lo, s.clamp_hi};
  r.get("clamp", clamp);
  r.get("proto_seed", s.proto_seed);
  r.finish();
  if (clamp.size() != 2) throw ConfigError(where + ".clamp: expected [lo, hi]");
  s.clamp_lo = clamp[0];
  s.clamp_hi = clamp[1];
  detail::converting(where, [&] { validate(s); return 0; });
}

inline void read_into(const Json& j, const std::string& where, Theorem1Config& c) {
  detail::FieldReader r(j, where);
  r.get("seed", c.seed);
  r.get("run_finetune", c.run_finetune);
  r.get("run_joint", c.run_joint);
  r.with("gd", [&](const Json& v, const std::string& w) { read_into(v, w, c.gd); });
  r.with("cv_gd", [&](const Json& v, const std::string& w) { read_into(v, w, c.cv_gd); });
  r.with("finetune", [&](const Json& v, const std::string& w) {
    auto& f = c.finetune;
    detail::FieldReader fr(v, w);
    fr.get("d", f.d);
    fr.get("k", f.k);
    fr.get("width", f.width);
    fr.get("n_target", f.n_target);
    fr.get("lambda", f.lambda);
    fr.get("seeds", f.seeds);
    fr.get("restarts", f.restarts);
    fr.finish();
    if (!(2 <= f.k && f.k <= f.d && f.width >= 1 && f.n_target >= 1 && f.lambda > 0.0 && f.seeds >= 1 &&
          f.restarts >= 1))
      throw ConfigError(w + ": inconsistent fine-tuning branch");
  });
  r.with("joint", [&](const Json& v, const std::string& w) {
    auto& jc = c.joint;
    detail::FieldReader jr(v, w);
    jr.get("d", jc.d);
    jr.get("k", jc.k);
    jr.get("width", jc.width);
    jr.get("n_target", jc.n_target);
    jr.get("lambda_grid", jc.lambda_grid);
    jr.get("alpha_grid", jc.alpha_grid);
    jr.get("cv_fraction", jc.cv_fraction);
    jr.get("seeds", jc.seeds);
    jr.get("restarts", jc.restarts);
    jr.get("cv_restarts", jc.cv_restarts);
    jr.get("overfit_population", jc.overfit_population);
    jr.get("overfit_train", jc.overfit_train);
    jr.finish();
    if (!(2 <= jc.k && jc.k <= jc.d && jc.width >= 1 && jc.n_target >= 2 && !jc.lambda_grid.empty() &&
          !jc.alpha_grid.empty() && jc.cv_fraction > 0.0 && jc.cv_fraction < 1.0 && jc.seeds >= 1 &&
          jc.restarts >= 1 && jc.cv_restarts >= 1))
      throw ConfigError(w + ": inconsistent joint branch");
  });
  r.finish();
}

inline void read_into(const Json& j, const std::string& where, Theorem2Config& c) {
  detail::FieldReader r(j, where);
  r.get("seed", c.seed);
  r.get("d", c.d);
  r.get("k", c.k);
  r.get("width", c.width);
  r.get("n_target", c.n_target);
  r.get("lambda", c.lambda);
  r.get("rho", c.rho);
  r.get("seeds", c.seeds);
  r.get("restarts", c.restarts);
  r.get("outer_iters", c.outer_iters);
  r.get("lr", c.lr);
  r.get("momentum", c.momentum);
  r.get("grad_clip", c.grad_clip);
  r.get("eval_splits", c.eval_splits);
  r.get("optimality_gap", c.optimality_gap);
  r.finish();
  if (!(2 <= c.k && c.k <= c.d && c.width >= 1 && c.n_target >= 2 && c.lambda > 0.0 && c.lambda < 0.1 &&
        c.rho > 0.0 && c.seeds >= 1 && c.restarts >= 1 && c.outer_iters >= 1 && c.lr > 0.0 && c.eval_splits >= 1))
    throw ConfigError(where + ": inconsistent theorem2 settings");
}

inline void read_fields(detail::FieldReader& r, const std::string& where, SemiSyntheticConfig& c) {
  r.get("seed", c.seed);
  r.get("seeds", c.seeds);
  r.with("dataset", [&](const Json& v, const std::string& w) { read_into(v, w, c.spec); });
  r.get("n_source", c.n_source);
  r.get("n_target", c.n_target);
  r.get("n_test", c.n_test);
  r.get("n_masked", c.n_masked);
  r.get("width", c.width);
  r.with("source_sgd", [&](const Json& v, const std::string& w) { read_into(v, w, c.source_sgd); });
  r.with("target_sgd", [&](const Json& v, const std::string& w) { read_into(v, w, c.target_sgd); });
  r.get("finetune_lr_scale", c.finetune_lr_scale);
  r.get("alpha_grid", c.alpha_grid);
  r.get("cv_fraction", c.cv_fraction);
  r.with("merlin", [&](const Json& v, const std::string& w) { read_into(v, w, c.merlin); });
  r.get("methods", c.methods);
  r.get("l2sp_strength", c.l2sp_strength);
  detail::converting(where, [&] { validate(c); return 0; });
}

inline void read_into(const Json& j, const std::string& where, SemiSyntheticConfig& c) {
  detail::FieldReader r(j, where);
  read_fields(r, where, c);
  r.finish();
}

inline void read_into(const Json& j, const std::string& where, SweepConfig& c) {
  detail::FieldReader r(j, where);
  read_fields(r, where, c.base);
  r.get("rhos", c.rhos);
  r.get("lambdas", c.lambdas);
  r.finish();
  if (c.rhos.empty() || c.lambdas.empty()) throw ConfigError(where + ": sweep grids must be nonempty");
}

// --- experiment configs ----------------------------------------------------------------

enum class ExperimentKind { Theorem1, Theorem2, SemiSynthetic, Sweep, Custom };

inline std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::Theorem1: return "theorem1";
    case ExperimentKind::Theorem2: return "theorem2";
    case ExperimentKind::SemiSynthetic: return "semisynthetic";
    case ExperimentKind::Sweep: return "sweep";
    case ExperimentKind::Custom: return "custom";
  }
  return "?";
}

inline ExperimentKind experiment_kind_from_string(const std::string& s) {
  for (auto k : {ExperimentKind::Theorem1, ExperimentKind::Theorem2, ExperimentKind::SemiSynthetic,
                 ExperimentKind::Sweep, ExperimentKind::Custom})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown experiment kind '" + s + "'");
}

// "custom" runs the composite pipeline with a caller-chosen method list.
struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::SemiSynthetic;
  std::string name;
  std::string output_dir;
  Theorem1Config theorem1;
  Theorem2Config theorem2;
  SemiSyntheticConfig semisynthetic;
  SweepConfig sweep;

  std::uint64_t& base_seed() {
    switch (kind) {
      case ExperimentKind::Theorem1: return theorem1.seed;
      case ExperimentKind::Theorem2: return theorem2.seed;
      case ExperimentKind::Sweep: return sweep.base.seed;
      default: return semisynthetic.seed;
    }
  }
};

// The resolved settings of the selected experiment; this is what gets hashed.
inline Json resolved_json(const ExperimentConfig& c) {
  Json j;
  j["kind"] = to_string(c.kind);
  switch (c.kind) {
    case ExperimentKind::Theorem1: j["theorem1"] = to_json(c.theorem1); break;
    case ExperimentKind::Theorem2: j["theorem2"] = to_json(c.theorem2); break;
    case ExperimentKind::Sweep: j["sweep"] = to_json(c.sweep); break;
    default: j[to_string(c.kind)] = to_json(c.semisynthetic); break;
  }
  return j;
}

// FNV-1a over the compact dump of the resolved settings, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : resolved_json(c).dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline ExperimentConfig parse_experiment(const Json& j) {
  detail::FieldReader r(j, "config");
  ExperimentConfig c;
  std::string kind;
  r.get("kind", kind);
  if (kind.empty()) throw ConfigError("config: missing 'kind'");
  c.kind = experiment_kind_from_string(kind);
  r.get("name", c.name);
  r.get("output_dir", c.output_dir);
  if (c.name.empty()) c.name = kind;
  const std::string section = to_string(c.kind);
  r.with(section.c_str(), [&](const Json& v, const std::string& w) {
    switch (c.kind) {
      case ExperimentKind::Theorem1: read_into(v, w, c.theorem1); break;
      case ExperimentKind::Theorem2: read_into(v, w, c.theorem2); break;
      case ExperimentKind::Sweep: read_into(v, w, c.sweep); break;
      default: read_into(v, w, c.semisynthetic); break;
    }
  });
  r.finish();
  if (c.kind == ExperimentKind::SemiSynthetic || c.kind == ExperimentKind::Custom)
    detail::converting("config", [&] { validate(c.semisynthetic); return 0; });
  if (c.kind == ExperimentKind::Sweep) detail::converting("config", [&] { validate(c.sweep.base); return 0; });
  return c;
}

inline ExperimentConfig parse_experiment(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return parse_experiment(j);
}

inline ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_experiment(ss.str());
}

// Runs the configured experiment and stamps every row with the config hash.
inline Report run_experiment(const ExperimentConfig& c, int jobs = 1) {
  Report report;
  switch (c.kind) {
    case ExperimentKind::Theorem1: report = run_theorem1(c.theorem1); break;
    case ExperimentKind::Theorem2: report = run_theorem2(c.theorem2); break;
    case ExperimentKind::Sweep: report = run_sweep(c.sweep, jobs); break;
    default: report = run_semisynthetic(c.semisynthetic, jobs); break;
  }
  report.experiment = c.name;
  const std::string hash = config_hash(c);
  for (auto& row : report.rows) {
    Row stamped;
    stamped["config_hash"] = hash;
    for (auto& [key, value] : row.items()) stamped[key] = value;
    row = std::move(stamped);
  }
  report.summary["config_hash"] = hash;
  report.summary["kind"] = to_string(c.kind);
  return report;
}

}  // namespace merlin
