#pragma once

// Gauss-Hermite product rules for integrating over standard normal random
// coefficients.

#include "blpmle/core.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <numbers>

namespace blpmle {

/// Tensor-product Gauss-Hermite rule for weight exp(-|x|^2).
///
/// `nodes` and `weights` are the raw rule; `normalizer` is pi^(-K/2). A standard
/// normal draw is sqrt(2) * node and its probability weight is normalizer * weight;
/// `draws` and `probabilities` cache those transformed values.
struct QuadratureRule {
  Matrix nodes;     // n_nodes x K
  Vector weights;   // n_nodes
  double normalizer = 1.0;
  Matrix draws;
  Vector probabilities;

  Index size() const { return weights.size(); }
  Index dimension() const { return nodes.cols(); }
};

/// One-dimensional rule: nodes ascending, weights for exp(-x^2).
inline std::pair<Vector, Vector> gauss_hermite_1d(int n) {
  if (n < 1) throw ConfigError("gauss_hermite_1d: need at least one node");
  Vector x(n), w(n);
  if (n == 1) {
    x[0] = 0.0;
    w[0] = std::sqrt(std::numbers::pi);
    return {x, w};
  }
  // Golub-Welsch start, then Newton polish on the orthonormal recurrence.
  Matrix jacobi = Matrix::Zero(n, n);
  for (int k = 1; k < n; ++k) jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(k / 2.0);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(jacobi);
  x = eig.eigenvalues();

  const double p0 = std::pow(std::numbers::pi, -0.25);
  auto orthonormal = [&](double t, Vector& p) {
    p.resize(n + 1);
    p[0] = p0;
    p[1] = std::sqrt(2.0) * t * p0;
    for (int k = 1; k < n; ++k)
      p[k + 1] = t * std::sqrt(2.0 / (k + 1)) * p[k] - std::sqrt(static_cast<double>(k) / (k + 1)) * p[k - 1];
  };
  Vector p;
  for (int i = 0; i < n; ++i) {
    double t = x[i];
    for (int it = 0; it < 4; ++it) {
      orthonormal(t, p);
      const double deriv = std::sqrt(2.0 * n) * p[n - 1];
      t -= p[n] / deriv;
    }
    x[i] = t;
    orthonormal(t, p);
    w[i] = 1.0 / p.head(n).squaredNorm();
  }
  // Exact symmetry about zero.
  for (int i = 0; i < n / 2; ++i) {
    const double xi = 0.5 * (x[n - 1 - i] - x[i]);
    const double wi = 0.5 * (w[n - 1 - i] + w[i]);
    x[i] = -xi;
    x[n - 1 - i] = xi;
    w[i] = w[n - 1 - i] = wi;
  }
  if (n % 2 == 1) x[n / 2] = 0.0;
  return {x, w};
}

/// Product rule with `level` nodes per dimension over `k_rc` dimensions.
/// Node ordering is lexicographic with the last dimension varying fastest.
inline QuadratureRule build_quadrature(int level, int k_rc, std::int64_t max_nodes = 1'000'000) {
  if (level < 1) throw ConfigError("quadrature level must be >= 1");
  if (k_rc < 1) throw ConfigError("quadrature dimension must be >= 1");
  std::int64_t count = 1;
  for (int d = 0; d < k_rc; ++d) {
    count *= level;
    if (count > max_nodes)
      throw ConfigError("quadrature with " + std::to_string(level) + "^" + std::to_string(k_rc) +
                        " nodes exceeds the cap of " + std::to_string(max_nodes));
  }
  const auto [x1, w1] = gauss_hermite_1d(level);

  QuadratureRule rule;
  const auto n = static_cast<Index>(count);
  rule.nodes.resize(n, k_rc);
  rule.weights.resize(n);
  std::vector<int> digit(static_cast<std::size_t>(k_rc), 0);
  for (Index i = 0; i < n; ++i) {
    double w = 1.0;
    for (int d = 0; d < k_rc; ++d) {
      rule.nodes(i, d) = x1[digit[static_cast<std::size_t>(d)]];
      w *= w1[digit[static_cast<std::size_t>(d)]];
    }
    rule.weights[i] = w;
    for (int d = k_rc - 1; d >= 0; --d) {
      if (++digit[static_cast<std::size_t>(d)] < level) break;
      digit[static_cast<std::size_t>(d)] = 0;
    }
  }
  rule.normalizer = std::pow(std::numbers::pi, -0.5 * k_rc);
  rule.draws = std::sqrt(2.0) * rule.nodes;
  rule.probabilities = rule.normalizer * rule.weights;
  return rule;
}

}  // namespace blpmle
