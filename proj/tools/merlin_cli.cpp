// merlin-cli: generate datasets, run experiments, aggregate results and
// reproduce the theory and composite experiments with pass/fail checks.
//
// Exit codes: 0 success, 1 I/O or other failure, 2 usage or config error,
// 3 numeric failure, 4 a reproduce check failed.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>

#include "merlin/io.hpp"

namespace fs = std::filesystem;
using namespace merlin;

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitAssertion = 4;

struct Options {
  std::string config;
  long long seed_offset = 0;
  int jobs = 1;
  std::string out;
  std::string dir;
  std::string target;
};

ExperimentConfig load_with_offset(const Options& o, const std::string& fallback_kind) {
  ExperimentConfig c = o.config.empty() ? parse_experiment(Json{{"kind", fallback_kind}}) : load_experiment(o.config);
  if (!fallback_kind.empty() && to_string(c.kind) != fallback_kind)
    throw ConfigError("config kind '" + to_string(c.kind) + "' does not match '" + fallback_kind + "'");
  if (o.seed_offset < 0) throw ConfigError("--seed-offset must be non-negative");
  c.base_seed() += static_cast<std::uint64_t>(o.seed_offset);
  return c;
}

std::string out_dir(const Options& o, const ExperimentConfig& c) {
  std::string d = !o.out.empty() ? o.out : !c.output_dir.empty() ? c.output_dir : "runs/" + c.name;
  fs::create_directories(d);
  return d;
}

void write_outputs(const Report& r, const ExperimentConfig& c, const std::string& dir) {
  write_report(r, dir + "/results.csv", dir + "/summary.json");
  std::ofstream(dir + "/config.resolved.json") << resolved_json(c).dump(2) << '\n';
}

// --- gen-data ---------------------------------------------------------------------------

int cmd_gen_data(const Options& o) {
  if (o.config.empty()) throw ConfigError("gen-data needs --config");
  const ExperimentConfig c = load_with_offset(o, "");
  const std::string dir = out_dir(o, c);
  Json manifest;
  manifest["config_hash"] = config_hash(c);
  manifest["files"] = Json::array();
  auto emit = [&](const DatasetRecipe& r, const std::string& name) {
    const std::string path = dir + "/" + name + ".csv";
    save_dataset(generate(r), r, path);
    manifest["files"].push_back(name + ".csv");
  };
  auto theory_target = [&](Index d, Index n, std::uint64_t run_seed, const std::string& name) {
    DatasetRecipe r;
    r.generator = "theory_target";
    r.d = d;
    r.n = n;
    r.seed = derive_seed(run_seed, 7);  // the draw the theorem runners use
    emit(r, name);
  };
  switch (c.kind) {
    case ExperimentKind::Theorem1: {
      const auto& t = c.theorem1;
      for (int s = 0; s < t.finetune.seeds && t.run_finetune; ++s)
        theory_target(t.finetune.d, t.finetune.n_target, derive_seed(t.seed, 100 + static_cast<std::uint64_t>(s)),
                      "finetune_target_seed" + std::to_string(s));
      for (int s = 0; s < t.joint.seeds && t.run_joint; ++s)
        theory_target(t.joint.d, t.joint.n_target, derive_seed(t.seed, 5000 + static_cast<std::uint64_t>(s)),
                      "joint_target_seed" + std::to_string(s));
      break;
    }
    case ExperimentKind::Theorem2: {
      const auto& t = c.theorem2;
      for (int s = 0; s < t.seeds; ++s)
        theory_target(t.d, t.n_target, derive_seed(t.seed, 9000 + static_cast<std::uint64_t>(s)),
                      "target_seed" + std::to_string(s));
      break;
    }
    default: {
      const SemiSyntheticConfig& sc = c.kind == ExperimentKind::Sweep ? c.sweep.base : c.semisynthetic;
      for (int s = 0; s < sc.seeds; ++s) {
        const std::uint64_t seed = sc.seed + static_cast<std::uint64_t>(s);
        const std::string tag = "_seed" + std::to_string(seed);
        DatasetRecipe r;
        r.generator = "composite";
        r.spec = sc.spec;
        r.seed = derive_seed(seed, 1);
        r.n = sc.n_source;
        r.variant = Variant::AB;
        emit(r, "source" + tag);
        r.seed = derive_seed(seed, 2);
        r.n = sc.n_target;
        r.variant = Variant::Target;
        emit(r, "target" + tag);
        r.seed = derive_seed(seed, 3);
        r.n = sc.n_test;
        emit(r, "test" + tag);
      }
    }
  }
  std::ofstream(dir + "/manifest.json") << manifest.dump(2) << '\n';
  std::cout << "wrote " << manifest["files"].size() << " datasets to " << dir << '\n';
  return 0;
}

// --- run / reproduce -----------------------------------------------------------------------

void print_summary(const Report& r, const std::string& dir) {
  std::cout << r.experiment << ": " << r.rows.size() << " rows -> " << dir << "/results.csv\n"
            << r.summary.dump(2) << '\n';
}

int cmd_run(const Options& o) {
  if (o.config.empty()) throw ConfigError("run needs --config");
  const ExperimentConfig c = load_with_offset(o, "");
  const std::string dir = out_dir(o, c);
  const Report r = run_experiment(c, o.jobs);
  write_outputs(r, c, dir);
  print_summary(r, dir);
  return 0;
}

struct Check {
  std::string name;
  bool pass;
};

std::vector<Check> reproduce_checks(const ExperimentConfig& c, const Json& s) {
  std::vector<Check> out;
  switch (c.kind) {
    case ExperimentKind::Theorem1: {
      if (c.theorem1.run_finetune) {
        const Json& f = s["finetune"];
        const double frac = f["fraction_off_target"].get<double>();
        const double expected = f["expected_fraction_off_target"].get<double>();
        out.push_back({"finetune: off-target fraction within 0.15 of (k-1)/k", std::abs(frac - expected) <= 0.15});
        out.push_back({"finetune: every off-target seed has target loss >= 10/27 - 0.02",
                       f["off_target_with_loss_above_bound"].get<int>() == f["off_target"].get<int>()});
      }
      if (c.theorem1.run_joint)
        out.push_back({"joint: overfitting in >= 9/10 of seeds", s["joint"]["witness_fraction"].get<double>() >= 0.9});
      break;
    }
    case ExperimentKind::Theorem2:
      out.push_back({"success fraction >= 0.8", s["success_fraction"].get<double>() >= 0.8});
      break;
    default:
      out.push_back({"pre-trained model relies on B (BOnly >= 0.9, AOnly <= chance + 0.15)",
                     s["pretrain_relies_on_b"].get<bool>()});
      out.push_back({"MeRLin leads fine-tune, joint and target-only by >= 5 points",
                     s["merlin_leads_by_5_points"].get<bool>()});
      out.push_back({"MeRLin has the lowest test variance ratio", s["merlin_lowest_variance_ratio"].get<bool>()});
  }
  return out;
}

int cmd_reproduce(const Options& o) {
  const ExperimentConfig c = load_with_offset(o, o.target);
  const std::string dir = out_dir(o, c);
  const Report r = run_experiment(c, o.jobs);
  write_outputs(r, c, dir);
  print_summary(r, dir);
  bool ok = true;
  for (const auto& check : reproduce_checks(c, r.summary)) {
    std::cout << (check.pass ? "PASS " : "FAIL ") << check.name << '\n';
    ok = ok && check.pass;
  }
  return ok ? 0 : kExitAssertion;
}

// --- report ----------------------------------------------------------------------------------

bool parse_number(const std::string& s, double& v) {
  if (s.empty()) return false;
  try {
    std::size_t used = 0;
    v = std::stod(s, &used);
    return used == s.size();
  } catch (const std::exception&) {
    return false;
  }
}

int cmd_report(const Options& o) {
  if (!fs::is_directory(o.dir)) throw ConfigError("report needs a directory of run outputs, got '" + o.dir + "'");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(o.dir))
    if (e.is_regular_file() && e.path().filename() == "results.csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) std::cerr << "no results.csv under " << o.dir << '\n';

  // group -> metric -> values, both in first-seen order
  std::vector<std::string> groups;
  std::vector<std::string> metrics;
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
  int bad = 0;
  for (const auto& path : files) {
    std::ifstream is(path, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    std::vector<std::vector<std::string>> table;
    try {
      table = parse_csv(ss.str());
    } catch (const ContractError& e) {
      std::cerr << path.string() << ": unreadable (" << e.what() << ")\n";
      ++bad;
      continue;
    }
    if (table.empty()) continue;
    const auto& header = table[0];
    std::ptrdiff_t key = -1;
    for (const char* k : {"algorithm", "method", "branch"}) {
      const auto it = std::find(header.begin(), header.end(), k);
      if (it != header.end()) {
        key = it - header.begin();
        break;
      }
    }
    for (std::size_t r = 1; r < table.size(); ++r) {
      const auto& row = table[r];
      if (row.size() != header.size()) {
        std::cerr << path.string() << ": row " << r << " has " << row.size() << " cells, expected " << header.size()
                  << "; skipped\n";
        ++bad;
        continue;
      }
      const std::string g = key >= 0 ? row[static_cast<std::size_t>(key)] : path.parent_path().filename().string();
      if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
      for (std::size_t c = 0; c < header.size(); ++c) {
        if (header[c] == "seed" || header[c] == "config_hash") continue;
        double v = 0.0;
        if (!parse_number(row[c], v)) continue;
        if (std::find(metrics.begin(), metrics.end(), header[c]) == metrics.end()) metrics.push_back(header[c]);
        values[g][header[c]].push_back(v);
      }
    }
  }

  std::vector<Row> out;
  std::cout << std::left << std::setw(16) << "group" << std::setw(28) << "metric" << std::setw(6) << "n"
            << "mean +- std\n";
  for (const auto& g : groups)
    for (const auto& m : metrics) {
      const auto it = values[g].find(m);
      if (it == values[g].end()) continue;
      const auto& v = it->second;
      Row row;
      row["group"] = g;
      row["metric"] = m;
      row["n"] = v.size();
      row["mean"] = mean(v);
      row["std"] = stddev(v);
      out.push_back(row);
      std::cout << std::left << std::setw(16) << g << std::setw(28) << m << std::setw(6) << v.size()
                << std::setprecision(6) << mean(v) << " +- " << stddev(v) << '\n';
    }
  std::ofstream csv(o.dir + "/report.csv", std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write " + o.dir + "/report.csv");
  write_csv(csv, out);
  if (bad > 0) std::cerr << bad << " unreadable rows or files skipped\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MeRLin workbench: datasets, experiments and reports"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", o.config, "experiment config (JSON)");
    if (config_required) opt->required();
    sub->add_option("--seed-offset", o.seed_offset, "added to the config's base seed");
    sub->add_option("--jobs", o.jobs, "worker threads for per-seed runs")->check(CLI::PositiveNumber);
    sub->add_option("--out", o.out, "output directory");
  };
  auto* gen = app.add_subcommand("gen-data", "write the datasets an experiment uses (CSV + JSON sidecar)");
  common(gen, true);
  auto* run = app.add_subcommand("run", "run an experiment and write results.csv and summary.json");
  common(run, true);
  auto* report = app.add_subcommand("report", "aggregate results.csv files under a directory");
  report->add_option("dir", o.dir, "directory of run outputs")->required();
  auto* repro = app.add_subcommand("reproduce", "run a reference experiment and check its claims");
  repro->add_option("experiment", o.target, "theorem1 | theorem2 | semisynthetic")
      ->required()
      ->check(CLI::IsMember({"theorem1", "theorem2", "semisynthetic"}));
  common(repro, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  try {
    if (*gen) return cmd_gen_data(o);
    if (*run) return cmd_run(o);
    if (*report) return cmd_report(o);
    return cmd_reproduce(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ContractError& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitOther;
  }
}
