#pragma once

// Exact population squared loss of a quadratic network on the two-block
// theory distributions.
//
// With quadratic activation the predictor is x^T A x, A = sum_i theta_i w_i w_i^T.
// Each label branch b (prob pi_b, label y_b) draws independent symmetric
// coordinates with second moment s_i and fourth moment q_i, so
//   E[(x^T A x)^2] = (sum_i s_i A_ii)^2 + sum_i (q_i - 3 s_i^2) A_ii^2
//                    + 2 sum_{i,j} s_i s_j A_ij^2
// and the branch loss is E[f^2] - 2 y_b E[f] + y_b^2 with E[f] = sum_i s_i A_ii.
// The low-rank path evaluates the last term as theta^T (K o K) theta with
// K = W^T diag(s) W, which is O(d m^2) instead of O(d^2).

#include <array>
#include <cmath>
#include <cstdint>

#include "merlin/data.hpp"
#include "merlin/netcore.hpp"
#include "merlin/rng.hpp"
#include "merlin/types.hpp"

namespace merlin {

// Source(k, d) for k >= 2, Target(d) is k == 1.
struct TheoryDist {
  Index k = 1;
  Index d = 2;

  static TheoryDist source(Index k, Index d) {
    require(k >= 2 && k <= d, "source distribution needs 2 <= k <= d");
    return {k, d};
  }
  static TheoryDist target(Index d) {
    require(d >= 2, "target distribution needs d >= 2");
    return {1, d};
  }
  bool is_target() const { return k == 1; }
};

struct MomentBranch {
  double prob = 0.0;
  double label = 0.0;
  Vector second;  // E[x_i^2]
  Vector fourth;  // E[x_i^4]
};

inline std::array<MomentBranch, 2> moment_branches(const TheoryDist& dist) {
  std::array<MomentBranch, 2> b;
  b[0].prob = 1.0 / 3.0;
  b[0].label = 0.0;
  b[1].prob = 2.0 / 3.0;
  b[1].label = 1.0;
  for (auto& br : b) {
    br.second = Vector::Constant(dist.d, 2.0 / 3.0);
    br.fourth = Vector::Constant(dist.d, 2.0 / 3.0);
  }
  b[0].second.head(dist.k).setZero();
  b[0].fourth.head(dist.k).setZero();
  b[1].second.head(dist.k).setOnes();
  b[1].fourth.head(dist.k).setOnes();
  return b;
}

// Population loss as a function of the symmetric matrix A.
inline double population_loss(const Matrix& A, const TheoryDist& dist) {
  require(A.rows() == dist.d && A.cols() == dist.d, "quadratic form must be d x d");
  double total = 0.0;
  for (const auto& br : moment_branches(dist)) {
    const Vector diag = A.diagonal();
    const double mean_f = br.second.dot(diag);
    double off = 0.0;
    for (Index j = 0; j < dist.d; ++j)
      for (Index i = 0; i < dist.d; ++i)
        if (i != j) off += br.second(i) * br.second(j) * A(i, j) * A(i, j);
    double diag_term = 0.0;
    for (Index i = 0; i < dist.d; ++i)
      diag_term += (br.fourth(i) - br.second(i) * br.second(i)) * diag(i) * diag(i);
    const double mean_f2 = mean_f * mean_f + diag_term + 2.0 * off;
    total += br.prob * (mean_f2 - 2.0 * br.label * mean_f + br.label * br.label);
  }
  return total;
}

// A = sum_i theta_i w_i w_i^T for a scalar head.
inline Matrix quadratic_form(const Matrix& theta, const Matrix& phi) {
  require(theta.cols() == 1 && theta.rows() == phi.cols(), "quadratic form needs a scalar head");
  return phi * theta.col(0).asDiagonal() * phi.transpose();
}

struct PopulationGrad {
  double value = 0.0;
  Matrix d_theta;
  Matrix d_phi;
};

// Exact loss of the quadratic network (theta, phi) with its gradient.
inline PopulationGrad population_loss_grad(const Matrix& theta, const Matrix& phi, const TheoryDist& dist,
                                           bool want_grad = true) {
  require(phi.rows() == dist.d, "feature extractor rows must equal d");
  require(theta.cols() == 1 && theta.rows() == phi.cols(), "population loss needs a scalar head");
  const Vector t = theta.col(0);
  const Matrix W2 = phi.cwiseProduct(phi);
  const Vector a = W2 * t;  // A_ii

  PopulationGrad out;
  Vector u = Vector::Zero(dist.d);  // dL/dA_ii from the diagonal terms
  Vector g_theta = Vector::Zero(phi.cols());
  Matrix g_phi = Matrix::Zero(phi.rows(), phi.cols());
  for (const auto& br : moment_branches(dist)) {
    const double mean_f = br.second.dot(a);
    const Vector coef = br.fourth - 3.0 * br.second.cwiseProduct(br.second);
    const Matrix SW = br.second.asDiagonal() * phi;
    const Matrix K = phi.transpose() * SW;
    const Matrix KK = K.cwiseProduct(K);
    const double mean_f2 = mean_f * mean_f + coef.dot(a.cwiseProduct(a)) + 2.0 * t.dot(KK * t);
    out.value += br.prob * (mean_f2 - 2.0 * br.label * mean_f + br.label * br.label);
    if (!want_grad) continue;
    u += br.prob * (2.0 * (mean_f - br.label) * br.second + 2.0 * coef.cwiseProduct(a));
    g_theta += br.prob * 4.0 * (KK * t);
    g_phi += br.prob * 8.0 * SW * (t * t.transpose()).cwiseProduct(K);
  }
  if (want_grad) {
    g_theta += W2.transpose() * u;
    g_phi += 2.0 * u.asDiagonal() * phi * t.asDiagonal();
    out.d_theta = g_theta;
    out.d_phi = g_phi;
  }
  return out;
}

inline double population_loss(const Matrix& theta, const Matrix& phi, const TheoryDist& dist) {
  return population_loss_grad(theta, phi, dist, false).value;
}

inline double population_loss(const Matrix& theta, const Matrix& phi, const TheoryDist& dist,
                              Activation act) {
  if (act != Activation::Quadratic)
    throw ContractError("exact population loss is only defined for quadratic activation");
  return population_loss(theta, phi, dist);
}

struct MonteCarloEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
};

// Sample-mean estimate of the population loss, streaming in chunks.
inline MonteCarloEstimate mc_population_loss(const Matrix& theta, const Matrix& phi, const TheoryDist& dist,
                                             Index n, std::uint64_t seed) {
  require(n >= 1, "Monte Carlo sample count must be positive");
  constexpr Index kChunk = 8192;
  double sum = 0.0;
  double sum_sq = 0.0;
  Index done = 0;
  std::uint64_t chunk_id = 0;
  while (done < n) {
    const Index take = std::min(kChunk, n - done);
    const std::uint64_t s = derive_seed(seed, chunk_id++);
    const LabeledSet batch = dist.is_target() ? sample_theory_target({dist.d}, take, s)
                                              : sample_theory_source({dist.k, dist.d}, take, s);
    const Vector pred = predict(batch.X, theta, phi, Activation::Quadratic).col(0);
    const Vector sq = (pred - batch.y).array().square();
    sum += sq.sum();
    sum_sq += sq.squaredNorm();
    done += take;
  }
  const auto nn = static_cast<double>(n);
  MonteCarloEstimate out;
  out.estimate = sum / nn;
  const double var = n > 1 ? std::max(0.0, (sum_sq - nn * out.estimate * out.estimate) / (nn - 1.0)) : 0.0;
  out.std_error = std::sqrt(var / nn);
  return out;
}

}  // namespace merlin
