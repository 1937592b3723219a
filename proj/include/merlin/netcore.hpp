#pragma once

// Two-layer predictor f(x) = theta^T sigma(phi^T x) with exact gradients.
//
// Shapes: phi is d x m (column i is neuron weight w_i), a head is m x C.
// Batches are row-major in the sense that X is n x d, H = sigma(X phi) is
// n x m and predictions P = H theta are n x C.

#include <algorithm>
#include <cmath>
#include <string>

#include "merlin/rng.hpp"
#include "merlin/types.hpp"

namespace merlin {

enum class Activation { Quadratic, ReLU, Identity };
enum class LossKind { SquaredError, SoftmaxCrossEntropy };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Quadratic: return "quadratic";
    case Activation::ReLU: return "relu";
    case Activation::Identity: return "identity";
  }
  return "?";
}

inline std::string to_string(LossKind l) {
  return l == LossKind::SquaredError ? "squared_error" : "softmax_cross_entropy";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "quadratic") return Activation::Quadratic;
  if (s == "relu") return Activation::ReLU;
  if (s == "identity") return Activation::Identity;
  throw ContractError("unknown activation '" + s + "'");
}

inline LossKind loss_from_string(const std::string& s) {
  if (s == "squared_error" || s == "mse") return LossKind::SquaredError;
  if (s == "softmax_cross_entropy" || s == "cross_entropy") return LossKind::SoftmaxCrossEntropy;
  throw ContractError("unknown loss '" + s + "'");
}

struct ModelParams {
  Matrix phi;
  Matrix theta_s;
  Matrix theta_t;

  Index input_dim() const { return phi.rows(); }
  Index width() const { return phi.cols(); }
};

struct Gradients {
  Matrix d_phi;
  Matrix d_theta_s;
  Matrix d_theta_t;

  static Gradients zeros_like(const ModelParams& p) {
    return {Matrix::Zero(p.phi.rows(), p.phi.cols()),
            Matrix::Zero(p.theta_s.rows(), p.theta_s.cols()),
            Matrix::Zero(p.theta_t.rows(), p.theta_t.cols())};
  }

  double squared_norm() const {
    return d_phi.squaredNorm() + d_theta_s.squaredNorm() + d_theta_t.squaredNorm();
  }
};

inline void check_congruent(const ModelParams& p) {
  require(p.theta_s.size() == 0 || p.theta_s.rows() == p.phi.cols(),
          "source head rows must equal feature width");
  require(p.theta_t.size() == 0 || p.theta_t.rows() == p.phi.cols(),
          "target head rows must equal feature width");
}

// --- activations -----------------------------------------------------------

inline double activate(double z, Activation act) {
  switch (act) {
    case Activation::Quadratic: return z * z;
    case Activation::ReLU: return z > 0.0 ? z : 0.0;
    case Activation::Identity: return z;
  }
  return z;
}

inline double activate_derivative(double z, Activation act) {
  switch (act) {
    case Activation::Quadratic: return 2.0 * z;
    case Activation::ReLU: return z > 0.0 ? 1.0 : 0.0;
    case Activation::Identity: return 1.0;
  }
  return 1.0;
}

inline Matrix apply_activation(const Matrix& z, Activation act) {
  return z.unaryExpr([act](double v) { return activate(v, act); });
}

inline Matrix activation_derivative(const Matrix& z, Activation act) {
  return z.unaryExpr([act](double v) { return activate_derivative(v, act); });
}

// --- forward -----------------------------------------------------------------

inline Vector features(const Vector& x, const Matrix& phi, Activation act) {
  require(x.size() == phi.rows(), "input dimension does not match feature extractor rows");
  Vector z = phi.transpose() * x;
  return apply_activation(z, act);
}

inline Matrix features(const Matrix& X, const Matrix& phi, Activation act) {
  require(X.cols() == phi.rows(), "input dimension does not match feature extractor rows");
  return apply_activation(X * phi, act);
}

inline Vector predict(const Vector& x, const Matrix& theta, const Matrix& phi, Activation act) {
  require(theta.rows() == phi.cols(), "head rows must equal feature width");
  return theta.transpose() * features(x, phi, act);
}

inline Matrix predict(const Matrix& X, const Matrix& theta, const Matrix& phi, Activation act) {
  require(theta.rows() == phi.cols(), "head rows must equal feature width");
  return features(X, phi, act) * theta;
}

// Back-propagates dL/dH through H = sigma(X phi) to dL/dphi.
inline Matrix feature_backprop(const Matrix& X, const Matrix& Z, const Matrix& dH, Activation act) {
  if (act == Activation::Identity) return X.transpose() * dH;
  return X.transpose() * dH.cwiseProduct(activation_derivative(Z, act));
}

// --- losses ------------------------------------------------------------------

// Regression encoding for classes: -0.1 everywhere, +0.9 at the true class.
inline Matrix encode_labels(const Vector& labels, int num_classes) {
  require(num_classes >= 1, "class count must be positive");
  Matrix Y = Matrix::Constant(labels.size(), num_classes, -0.1);
  for (Index i = 0; i < labels.size(); ++i) {
    const double c = labels(i);
    require(c >= 0 && c < num_classes && c == std::floor(c), "label out of range for encoding");
    Y(i, static_cast<Index>(c)) += 1.0;
  }
  return Y;
}

// Regression targets for squared error against a head with `outputs` columns.
inline Matrix regression_targets(const LabeledSet& set, Index outputs) {
  if (set.is_classification() && outputs > 1) {
    require(outputs == set.num_classes, "head width must equal class count");
    return encode_labels(set.y, set.num_classes);
  }
  require(outputs == 1, "scalar regression needs a single-output head");
  return set.y;
}

struct LossValue {
  double value = 0.0;
  Matrix d_pred;  // dL/dP, already divided by n
};

// Mean per-example loss of predictions P (n x C) against the set's labels.
inline LossValue evaluate_loss(const Matrix& P, const LabeledSet& set, LossKind loss) {
  const auto n = static_cast<double>(P.rows());
  LossValue out;
  if (loss == LossKind::SquaredError) {
    const Matrix R = P - regression_targets(set, P.cols());
    out.value = R.squaredNorm() / n;
    out.d_pred = (2.0 / n) * R;
    return out;
  }
  require(set.is_classification() && set.num_classes == P.cols(),
          "cross entropy needs a head with one column per class");
  out.d_pred.resize(P.rows(), P.cols());
  double total = 0.0;
  for (Index i = 0; i < P.rows(); ++i) {
    const double shift = P.row(i).maxCoeff();
    Eigen::RowVectorXd e = (P.row(i).array() - shift).exp();
    const double z = e.sum();
    const int c = set.label(i);
    total += std::log(z) - (P(i, c) - shift);
    out.d_pred.row(i) = e / z;
    out.d_pred(i, c) -= 1.0;
  }
  out.value = total / n;
  out.d_pred /= n;
  return out;
}

inline double batch_loss(const LabeledSet& set, const Matrix& theta, const Matrix& phi, Activation act,
                         LossKind loss) {
  require(set.size() > 0, "batch loss on an empty set");
  return evaluate_loss(predict(set.X, theta, phi, act), set, loss).value;
}

struct HeadGradient {
  double value = 0.0;
  Matrix d_theta;
  Matrix d_phi;
};

// Loss of one head on a set together with its gradient in (theta, phi).
inline HeadGradient loss_and_grad(const LabeledSet& set, const Matrix& theta, const Matrix& phi,
                                  Activation act, LossKind loss, bool want_phi = true) {
  require(set.size() > 0, "gradient on an empty set");
  require(set.dim() == phi.rows(), "input dimension does not match feature extractor rows");
  require(theta.rows() == phi.cols(), "head rows must equal feature width");
  const Matrix Z = set.X * phi;
  const Matrix H = apply_activation(Z, act);
  const LossValue lv = evaluate_loss(H * theta, set, loss);
  HeadGradient g;
  g.value = lv.value;
  g.d_theta = H.transpose() * lv.d_pred;
  if (want_phi) g.d_phi = feature_backprop(set.X, Z, lv.d_pred * theta.transpose(), act);
  return g;
}

enum class HeadRole { Source, Target };

struct GradMask {
  bool phi = true;
  bool theta_s = true;
  bool theta_t = true;
};

// Gradient of batch_loss(set, head, phi) with respect to the requested blocks;
// blocks not requested, and the head not in use, come back as zeros.
inline Gradients grads(const LabeledSet& set, const ModelParams& params, HeadRole head, Activation act,
                       LossKind loss, GradMask which = {}) {
  check_congruent(params);
  Gradients out = Gradients::zeros_like(params);
  const Matrix& theta = head == HeadRole::Source ? params.theta_s : params.theta_t;
  const HeadGradient g = loss_and_grad(set, theta, params.phi, act, loss, which.phi);
  if (which.phi) out.d_phi = g.d_phi;
  if (head == HeadRole::Source && which.theta_s) out.d_theta_s = g.d_theta;
  if (head == HeadRole::Target && which.theta_t) out.d_theta_t = g.d_theta;
  return out;
}

// --- initialization and SGD --------------------------------------------------

struct Architecture {
  Index input_dim = 0;
  Index width = 0;
  Activation act = Activation::Quadratic;
  Index source_outputs = 1;
  Index target_outputs = 1;
  LossKind source_loss = LossKind::SquaredError;
  LossKind target_loss = LossKind::SquaredError;
};

// phi ~ N(0, 1/d) entrywise, both heads zero.
inline ModelParams init_params(const Architecture& arch, std::uint64_t seed) {
  require(arch.input_dim > 0 && arch.width > 0, "architecture dimensions must be positive");
  Rng rng(seed);
  ModelParams p;
  const double scale = 1.0 / std::sqrt(static_cast<double>(arch.input_dim));
  p.phi.resize(arch.input_dim, arch.width);
  for (Index j = 0; j < p.phi.cols(); ++j)
    for (Index i = 0; i < p.phi.rows(); ++i) p.phi(i, j) = scale * rng.normal();
  p.theta_s = Matrix::Zero(arch.width, arch.source_outputs);
  p.theta_t = Matrix::Zero(arch.width, arch.target_outputs);
  return p;
}

// Momentum SGD: v <- mu v + g; p <- p - lr v - lr wd p (decay decoupled from
// the momentum buffer).
class SgdState {
 public:
  SgdState() = default;
  explicit SgdState(const ModelParams& like) : velocity_(Gradients::zeros_like(like)) {}

  void step(ModelParams& p, const Gradients& g, double lr, double momentum, double weight_decay) {
    require(lr > 0.0, "learning rate must be positive");
    if (velocity_.d_phi.size() != p.phi.size() || velocity_.d_theta_s.size() != p.theta_s.size() ||
        velocity_.d_theta_t.size() != p.theta_t.size())
      velocity_ = Gradients::zeros_like(p);
    update(p.phi, velocity_.d_phi, g.d_phi, lr, momentum, weight_decay);
    update(p.theta_s, velocity_.d_theta_s, g.d_theta_s, lr, momentum, weight_decay);
    update(p.theta_t, velocity_.d_theta_t, g.d_theta_t, lr, momentum, weight_decay);
  }

 private:
  static void update(Matrix& w, Matrix& v, const Matrix& g, double lr, double mu, double wd) {
    if (w.size() == 0) return;
    require(g.rows() == w.rows() && g.cols() == w.cols(), "gradient shape mismatch");
    v = mu * v + g;
    if (wd != 0.0) w *= (1.0 - lr * wd);
    w -= lr * v;
  }

  Gradients velocity_;
};

inline ModelParams sgd_step(const ModelParams& params, const Gradients& g, SgdState& state, double lr,
                            double momentum = 0.0, double weight_decay = 0.0) {
  ModelParams out = params;
  state.step(out, g, lr, momentum, weight_decay);
  return out;
}

// --- classification helpers --------------------------------------------------

inline Vector argmax_rows(const Matrix& P) {
  Vector out(P.rows());
  for (Index i = 0; i < P.rows(); ++i) {
    Index best = 0;
    P.row(i).maxCoeff(&best);
    out(i) = static_cast<double>(best);
  }
  return out;
}

inline double accuracy(const Matrix& P, const LabeledSet& set) {
  require(set.is_classification(), "accuracy needs class labels");
  const Vector pred = argmax_rows(P);
  Index hits = 0;
  for (Index i = 0; i < set.size(); ++i) hits += pred(i) == set.y(i) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(set.size());
}

inline double accuracy(const LabeledSet& set, const Matrix& theta, const Matrix& phi, Activation act) {
  return accuracy(predict(set.X, theta, phi, act), set);
}

}  // namespace merlin
