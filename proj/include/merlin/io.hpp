#pragma once

// Datasets as CSV (x0..x{d-1},label) with a JSON sidecar that is enough to
// regenerate them bit for bit, and models as a flat little-endian binary with
// JSON metadata.

#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include "merlin/config.hpp"

namespace merlin {

// What a generator needs to reproduce a set exactly.
struct DatasetRecipe {
  std::string generator;  // theory_source | theory_target | composite
  Index n = 0;
  std::uint64_t seed = 0;
  Index k = 0;  // theory_source only
  Index d = 0;  // theory generators
  CompositeSpec spec;
  Variant variant = Variant::AB;
};

inline Json to_json(const DatasetRecipe& r) {
  Json j;
  j["generator"] = r.generator;
  j["n"] = r.n;
  j["seed"] = r.seed;
  if (r.generator == "composite") {
    j["variant"] = to_string(r.variant);
    j["spec"] = to_json(r.spec);
  } else {
    if (r.generator == "theory_source") j["k"] = r.k;
    j["d"] = r.d;
  }
  return j;
}

inline DatasetRecipe recipe_from_json(const Json& j) {
  detail::FieldReader r(j, "sidecar");
  DatasetRecipe out;
  r.get("generator", out.generator);
  r.get("n", out.n);
  r.get("seed", out.seed);
  r.get("k", out.k);
  r.get("d", out.d);
  std::string variant = "AB";
  r.get("variant", variant);
  r.with("spec", [&](const Json& v, const std::string& w) { read_into(v, w, out.spec); });
  // written by save_dataset alongside the recipe
  Index rows = 0, dim = 0;
  int classes = 0;
  r.get("rows", rows);
  r.get("dim", dim);
  r.get("num_classes", classes);
  r.finish();
  out.variant = detail::converting("sidecar.variant", [&] { return variant_from_string(variant); });
  if (out.n <= 0) throw ConfigError("sidecar: n must be positive");
  return out;
}

inline LabeledSet generate(const DatasetRecipe& r) {
  if (r.generator == "theory_source") return sample_theory_source({r.k, r.d}, r.n, r.seed);
  if (r.generator == "theory_target") return sample_theory_target({r.d}, r.n, r.seed);
  if (r.generator == "composite") return generate_composite(r.spec, r.n, r.seed, r.variant);
  throw ConfigError("unknown generator '" + r.generator + "'");
}

inline void save_dataset(const LabeledSet& set, const DatasetRecipe& recipe, const std::string& csv_path) {
  std::ofstream os(csv_path, std::ios::binary);
  if (!os) throw ContractError("cannot open " + csv_path + " for writing");
  for (Index c = 0; c < set.dim(); ++c) os << 'x' << c << ',';
  os << "label\r\n";
  for (Index i = 0; i < set.size(); ++i) {
    for (Index c = 0; c < set.dim(); ++c) os << format_double(set.X(i, c)) << ',';
    os << format_double(set.y(i)) << "\r\n";
  }
  Json side = to_json(recipe);
  side["rows"] = set.size();
  side["dim"] = set.dim();
  side["num_classes"] = set.num_classes;
  std::ofstream js(csv_path + ".json");
  if (!js) throw ContractError("cannot open " + csv_path + ".json for writing");
  js << side.dump(2) << '\n';
}

inline Json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read " + path);
  try {
    return Json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline LabeledSet load_dataset(const std::string& csv_path) {
  const Json side = read_json_file(csv_path + ".json");
  std::ifstream is(csv_path, std::ios::binary);
  if (!is) throw ContractError("cannot read " + csv_path);
  std::stringstream ss;
  ss << is.rdbuf();
  const auto table = parse_csv(ss.str());
  require(table.size() >= 2, csv_path + ": no data rows");
  const Index d = static_cast<Index>(table[0].size()) - 1;
  LabeledSet set;
  set.X.resize(static_cast<Index>(table.size()) - 1, d);
  set.y.resize(set.X.rows());
  for (std::size_t r = 1; r < table.size(); ++r) {
    require(static_cast<Index>(table[r].size()) == d + 1, csv_path + ": ragged row");
    for (Index c = 0; c < d; ++c) set.X(static_cast<Index>(r) - 1, c) = std::stod(table[r][static_cast<std::size_t>(c)]);
    set.y(static_cast<Index>(r) - 1) = std::stod(table[r].back());
  }
  set.num_classes = side.value("num_classes", 0);
  set.meta.generator = side.value("generator", "");
  set.meta.seed = side.value("seed", std::uint64_t{0});
  validate(set);
  return set;
}

// --- models -----------------------------------------------------------------------------

namespace detail {

inline constexpr char kModelMagic[8] = {'M', 'R', 'L', 'N', 'P', 'A', 'R', '1'};

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw ContractError("model file truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_matrix(std::ostream& os, const Matrix& m) {
  write_u64(os, static_cast<std::uint64_t>(m.rows()));
  write_u64(os, static_cast<std::uint64_t>(m.cols()));
  for (Index c = 0; c < m.cols(); ++c)
    for (Index r = 0; r < m.rows(); ++r) write_u64(os, std::bit_cast<std::uint64_t>(m(r, c)));
}

inline Matrix read_matrix(std::istream& is) {
  const auto rows = read_u64(is);
  const auto cols = read_u64(is);
  require(rows < (1u << 24) && cols < (1u << 24), "model file has implausible shape");
  Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
  for (Index c = 0; c < m.cols(); ++c)
    for (Index r = 0; r < m.rows(); ++r) m(r, c) = std::bit_cast<double>(read_u64(is));
  return m;
}

}  // namespace detail

// Binary layout: 8-byte magic, then phi, theta_s, theta_t, each as
// u64 rows, u64 cols, rows*cols doubles in column-major order.
inline void save_model(const ModelParams& p, const Json& metadata, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractError("cannot open " + path + " for writing");
  os.write(detail::kModelMagic, sizeof detail::kModelMagic);
  detail::write_matrix(os, p.phi);
  detail::write_matrix(os, p.theta_s);
  detail::write_matrix(os, p.theta_t);
  Json meta = metadata;
  meta["d"] = p.phi.rows();
  meta["m"] = p.phi.cols();
  std::ofstream js(path + ".json");
  if (!js) throw ContractError("cannot open " + path + ".json for writing");
  js << meta.dump(2) << '\n';
}

inline ModelParams load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractError("cannot read " + path);
  char magic[sizeof detail::kModelMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, detail::kModelMagic, sizeof magic) != 0)
    throw ContractError(path + ": not a model file");
  ModelParams p;
  p.phi = detail::read_matrix(is);
  p.theta_s = detail::read_matrix(is);
  p.theta_t = detail::read_matrix(is);
  check_congruent(p);
  return p;
}

}  // namespace merlin
