#pragma once

// Experiment reports: rows of named values written as RFC-4180 CSV plus a
// JSON summary.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "merlin/types.hpp"

namespace merlin {

using Row = nlohmann::ordered_json;

struct Report {
  std::string experiment;
  std::vector<Row> rows;
  nlohmann::ordered_json summary;
};

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string csv_cell(const nlohmann::ordered_json& v) {
  if (v.is_null()) return "";
  if (v.is_string()) return csv_escape(v.get<std::string>());
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_float()) return format_double(v.get<double>());
  if (v.is_number()) return v.dump();
  return csv_escape(v.dump());
}

// Columns are the union of keys in first-seen order; missing cells are empty.
inline std::vector<std::string> csv_columns(const std::vector<Row>& rows) {
  std::vector<std::string> cols;
  for (const auto& r : rows)
    for (const auto& [k, v] : r.items()) {
      (void)v;
      if (std::find(cols.begin(), cols.end(), k) == cols.end()) cols.push_back(k);
    }
  return cols;
}

inline void write_csv(std::ostream& os, const std::vector<Row>& rows) {
  const auto cols = csv_columns(rows);
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << csv_escape(cols[i]);
  os << "\r\n";
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (i) os << ',';
      if (r.contains(cols[i])) os << csv_cell(r[cols[i]]);
    }
    os << "\r\n";
  }
}

// Minimal RFC-4180 reader, used for round trips and by `report`.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> out;
  std::vector<std::string> row;
  std::string cell;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          cell += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cell += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(cell));
      cell.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(cell));
      cell.clear();
      out.push_back(std::move(row));
      row.clear();
      any = false;
    } else {
      cell += c;
      any = true;
    }
  }
  if (quoted) throw ContractError("unterminated quoted CSV field");
  if (any || !row.empty()) {
    row.push_back(std::move(cell));
    out.push_back(std::move(row));
  }
  return out;
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Sample standard deviation (n - 1); zero for a single value.
inline double stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline nlohmann::ordered_json mean_std(const std::vector<double>& v) {
  nlohmann::ordered_json j;
  j["mean"] = mean(v);
  j["std"] = stddev(v);
  j["n"] = v.size();
  return j;
}

// Groups rows by the string value of `key` and reports mean and std of each
// numeric column per group.
inline nlohmann::ordered_json summarize_by(const std::vector<Row>& rows, const std::string& key,
                                           const std::vector<std::string>& metrics) {
  std::map<std::string, std::map<std::string, std::vector<double>>> groups;
  std::vector<std::string> order;
  for (const auto& r : rows) {
    if (!r.contains(key)) continue;
    const std::string g = r[key].is_string() ? r[key].get<std::string>() : r[key].dump();
    if (!groups.count(g)) order.push_back(g);
    auto& bucket = groups[g];
    for (const auto& m : metrics)
      if (r.contains(m) && r[m].is_number()) bucket[m].push_back(r[m].get<double>());
  }
  nlohmann::ordered_json out;
  for (const auto& g : order) {
    nlohmann::ordered_json entry;
    for (const auto& m : metrics)
      if (groups[g].count(m)) entry[m] = mean_std(groups[g][m]);
    out[g] = entry;
  }
  return out;
}

inline void write_report(const Report& r, const std::string& csv_path, const std::string& json_path) {
  std::ofstream csv(csv_path, std::ios::binary);
  if (!csv) throw ContractError("cannot open " + csv_path + " for writing");
  write_csv(csv, r.rows);
  std::ofstream js(json_path);
  if (!js) throw ContractError("cannot open " + json_path + " for writing");
  nlohmann::ordered_json out;
  out["experiment"] = r.experiment;
  out["summary"] = r.summary;
  js << out.dump(2) << '\n';
}

}  // namespace merlin
