#pragma once

// Representation diagnostics: class-separation ratio, feature/label
// correlation, masked-variant accuracy and feature export.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "merlin/data.hpp"
#include "merlin/netcore.hpp"
#include "merlin/report.hpp"
#include "merlin/types.hpp"

namespace merlin {

struct FeatureBatch {
  Matrix H;            // n x m, rows are h(x_i)
  std::vector<int> labels;
  int classes = 0;

  static FeatureBatch from(const LabeledSet& set, const Matrix& phi, Activation act) {
    require(set.is_classification(), "feature batch needs class labels");
    FeatureBatch b;
    b.H = features(set.X, phi, act);
    b.classes = set.num_classes;
    b.labels.reserve(static_cast<std::size_t>(set.size()));
    for (Index i = 0; i < set.size(); ++i) b.labels.push_back(set.label(i));
    return b;
  }
};

// (C/N) sum_ij |h_ij - mu_i|^2 / sum_i |mu_i - mu|^2, mu the mean of class means.
inline double variance_ratio(const FeatureBatch& b) {
  const Index n = b.H.rows();
  require(static_cast<Index>(b.labels.size()) == n, "one label per feature row");
  require(b.classes >= 2, "variance ratio needs at least two classes");
  require(b.H.allFinite(), "features must be finite");
  Matrix means = Matrix::Zero(b.classes, b.H.cols());
  std::vector<Index> counts(static_cast<std::size_t>(b.classes), 0);
  for (Index i = 0; i < n; ++i) {
    const int c = b.labels[static_cast<std::size_t>(i)];
    require(c >= 0 && c < b.classes, "label out of range");
    means.row(c) += b.H.row(i);
    ++counts[static_cast<std::size_t>(c)];
  }
  for (int c = 0; c < b.classes; ++c) {
    require(counts[static_cast<std::size_t>(c)] > 0, "every class must be present");
    means.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }
  double intra = 0.0;
  for (Index i = 0; i < n; ++i) intra += (b.H.row(i) - means.row(b.labels[static_cast<std::size_t>(i)])).squaredNorm();
  const Vector mu = means.colwise().mean().transpose();
  double inter = 0.0;
  for (int c = 0; c < b.classes; ++c) inter += (means.row(c).transpose() - mu).squaredNorm();
  if (inter <= 0.0) throw NumericError("class means coincide; inter-class variance is zero");
  return static_cast<double>(b.classes) / static_cast<double>(n) * intra / inter;
}

// sum_c y_c^T (H H^T + eps I)^{-1} y_c over the columns of Y.
inline double feature_label_correlation(const Matrix& H, const Matrix& Y, double eps = 1e-8) {
  require(H.rows() == Y.rows(), "features and labels must have the same row count");
  require(eps >= 0.0, "regularizer must be non-negative");
  Matrix K = H * H.transpose();
  K.diagonal().array() += eps;
  Eigen::LDLT<Matrix> ldlt(K);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.rcond() < 1e-15)
    throw NumericError("regularized Gram matrix is singular");
  const double v = (Y.transpose() * ldlt.solve(Y)).trace();
  if (!std::isfinite(v)) throw NumericError("correlation is not finite");
  return v;
}

inline double feature_label_correlation(const LabeledSet& set, const Matrix& phi, Activation act,
                                        double eps = 1e-8) {
  require(set.is_classification(), "correlation uses class labels");
  return feature_label_correlation(features(set.X, phi, act), encode_labels(set.y, set.num_classes), eps);
}

// Accuracy of one head on a fresh sample of a composite variant.
inline double masked_eval(const ModelParams& model, const Matrix& head, Activation act, const CompositeSpec& spec,
                          Variant variant, Index n, std::uint64_t seed) {
  require(model.phi.rows() == spec.dim(), "model input width does not match the composite spec");
  const LabeledSet s = generate_composite(spec, n, seed, variant);
  return accuracy(s, head, model.phi, act);
}

// n x (m + 1) CSV: header f0..f{m-1},label, 17 significant digits.
inline void export_features(const Matrix& phi, Activation act, const LabeledSet& set, const std::string& path) {
  const Matrix H = features(set.X, phi, act);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractError("cannot open " + path + " for writing");
  for (Index j = 0; j < H.cols(); ++j) os << 'f' << j << ',';
  os << "label\r\n";
  for (Index i = 0; i < H.rows(); ++i) {
    for (Index j = 0; j < H.cols(); ++j) os << format_double(H(i, j)) << ',';
    os << format_double(set.y(i)) << "\r\n";
  }
  if (!os) throw ContractError("write to " + path + " failed");
}

struct FeatureTable {
  Matrix H;
  Vector labels;
};

inline FeatureTable read_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractError("cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  const auto rows = parse_csv(ss.str());
  require(!rows.empty() && !rows[0].empty() && rows[0].back() == "label", "feature CSV needs a label column");
  const auto m = static_cast<Index>(rows[0].size()) - 1;
  FeatureTable t;
  t.H.resize(static_cast<Index>(rows.size()) - 1, m);
  t.labels.resize(static_cast<Index>(rows.size()) - 1);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    require(static_cast<Index>(rows[r].size()) == m + 1, "ragged feature CSV row");
    for (Index j = 0; j < m; ++j) t.H(static_cast<Index>(r) - 1, j) = std::stod(rows[r][static_cast<std::size_t>(j)]);
    t.labels(static_cast<Index>(r) - 1) = std::stod(rows[r].back());
  }
  return t;
}

}  // namespace merlin
