#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace merlin {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// Raised when a caller breaks an operation's preconditions (shapes, ranges).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when a computation produces non-finite values or a singular system.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

inline void require_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) throw NumericError(what + ": non-finite value");
}

struct DatasetMeta {
  std::string generator;
  std::uint64_t seed = 0;
};

// Rows of X are examples. For classification `y` holds class indices stored
// as doubles and num_classes > 0; for regression num_classes == 0.
struct LabeledSet {
  Matrix X;
  Vector y;
  int num_classes = 0;
  DatasetMeta meta;

  Index size() const { return X.rows(); }
  Index dim() const { return X.cols(); }
  bool is_classification() const { return num_classes > 0; }

  int label(Index i) const { return static_cast<int>(y(i)); }

  LabeledSet subset(const std::vector<Index>& rows) const {
    LabeledSet out;
    out.X.resize(static_cast<Index>(rows.size()), X.cols());
    out.y.resize(static_cast<Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out.X.row(static_cast<Index>(r)) = X.row(rows[r]);
      out.y(static_cast<Index>(r)) = y(rows[r]);
    }
    out.num_classes = num_classes;
    out.meta = meta;
    return out;
  }
};

inline void validate(const LabeledSet& set) {
  require(set.size() > 0, "labeled set must be nonempty");
  require(set.y.size() == set.X.rows(), "label count must match row count");
  require_finite(set.X, "labeled set features");
  if (set.is_classification()) {
    for (Index i = 0; i < set.size(); ++i) {
      const double v = set.y(i);
      require(v >= 0 && v < set.num_classes && v == static_cast<int>(v),
              "class label out of range");
    }
  }
}

}  // namespace merlin
