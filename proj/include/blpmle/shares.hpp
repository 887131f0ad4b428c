#pragma once

// Mixed-logit market shares and their analytic first and second derivatives.

#include "blpmle/core.hpp"
#include "blpmle/quadrature.hpp"

#include <optional>

namespace blpmle {

/// Random-coefficient layout together with the quadrature rule integrating it.
struct ShareModel {
  std::vector<RandomCoefficient> random_coefficients;
  QuadratureRule quadrature;

  Index k_rc() const { return static_cast<Index>(random_coefficients.size()); }

  /// Position in sigma of the price random coefficient, if any.
  std::optional<Index> price_coefficient() const {
    for (std::size_t k = 0; k < random_coefficients.size(); ++k)
      if (random_coefficients[k].kind == RandomCoefficient::Kind::price) return static_cast<Index>(k);
    return std::nullopt;
  }
};

inline ShareModel make_share_model(std::vector<RandomCoefficient> layout, int level) {
  int prices = 0;
  for (const auto& rc : layout) prices += rc.kind == RandomCoefficient::Kind::price;
  if (prices > 1) throw ConfigError("at most one random coefficient may sit on price");
  if (layout.empty()) throw ConfigError("random-coefficient layout is empty");
  ShareModel m;
  m.quadrature = build_quadrature(level, static_cast<int>(layout.size()));
  m.random_coefficients = std::move(layout);
  return m;
}

/// The simulation design: random coefficients on demand column 1 and on price.
inline ShareModel default_share_model(int level = 7) {
  return make_share_model({RandomCoefficient::on_characteristic(1), RandomCoefficient::on_price()}, level);
}

inline void check_share_inputs(const Matrix& X, const ThetaNonlinear& theta, const ShareModel& model) {
  if (theta.sigma.size() != model.k_rc())
    throw ConfigError("sigma has " + std::to_string(theta.sigma.size()) + " entries, layout has " +
                      std::to_string(model.k_rc()));
  if (model.quadrature.dimension() != model.k_rc()) throw ConfigError("quadrature dimension does not match layout");
  for (const auto& rc : model.random_coefficients)
    if (rc.kind == RandomCoefficient::Kind::characteristic && (rc.column < 0 || rc.column >= X.cols()))
      throw ConfigError("random coefficient on missing demand column " + std::to_string(rc.column));
}

/// Per-node (per simulated consumer type) logit shares.
struct NodeShares {
  Matrix s;              // N x n_nodes
  Vector probabilities;  // n_nodes, sums to one
  Vector price_slope;    // n_nodes, dV/dp = alpha + sigma_price * v_price

  Index n_products() const { return s.rows(); }
  Index n_nodes() const { return s.cols(); }
};

/// Evaluates per-node shares with utility delta_j + sum_k z_jk sigma_k v_ik, where
/// z is the demand column or the price carrying coefficient k. Each node's logit is
/// stabilized by subtracting max(0, max_j V_j).
inline NodeShares node_shares(const Vector& delta, const Matrix& X, const Vector& prices, const ThetaNonlinear& theta,
                              const ShareModel& model) {
  check_share_inputs(X, theta, model);
  const Index n = delta.size();
  const auto& quad = model.quadrature;
  const Index nodes = quad.size();

  Matrix z(n, model.k_rc());
  for (Index k = 0; k < model.k_rc(); ++k) {
    const auto& rc = model.random_coefficients[static_cast<std::size_t>(k)];
    z.col(k) = rc.kind == RandomCoefficient::Kind::price ? prices : Vector(X.col(rc.column));
    z.col(k) *= theta.sigma[k];
  }

  NodeShares out;
  out.s.noalias() = z * quad.draws.transpose();
  out.s.colwise() += delta;
  for (Index i = 0; i < nodes; ++i) {
    auto col = out.s.col(i);
    const double shift = std::max(0.0, col.maxCoeff());
    col = (col.array() - shift).exp();
    const double denom = std::exp(-shift) + col.sum();
    col /= denom;
  }
  out.probabilities = quad.probabilities;
  out.price_slope = Vector::Constant(nodes, theta.alpha);
  if (const auto kp = model.price_coefficient()) out.price_slope += theta.sigma[*kp] * quad.draws.col(*kp);
  return out;
}

inline NodeShares node_shares(const Vector& delta, const MarketData& market, const ThetaNonlinear& theta,
                              const ShareModel& model) {
  return node_shares(delta, market.demand_chars, market.prices, theta, model);
}

inline Vector aggregate_shares(const NodeShares& ns) { return ns.s * ns.probabilities; }

inline Vector compute_shares(const Vector& delta, const MarketData& market, const ThetaNonlinear& theta,
                             const ShareModel& model) {
  return aggregate_shares(node_shares(delta, market, theta, model));
}

/// J_sp(j,k) = ds_k/dp_j and J_sdelta(j,k) = ds_k/ddelta_j. Both are symmetric.
struct ShareJacobians {
  Matrix J_sp;
  Matrix J_sdelta;
};

/// sum_i c_i (diag(s_i) - s_i s_i') for per-node coefficients c.
inline Matrix weighted_logit_jacobian(const NodeShares& ns, const Vector& coef) {
  Matrix weighted = ns.s * coef.asDiagonal();
  Matrix jac = -weighted * ns.s.transpose();
  jac.diagonal() += weighted.rowwise().sum();
  return jac;
}

inline ShareJacobians share_first_derivatives(const NodeShares& ns) {
  const Vector wp = ns.probabilities.cwiseProduct(ns.price_slope);
  return {weighted_logit_jacobian(ns, wp), weighted_logit_jacobian(ns, ns.probabilities)};
}

inline ShareJacobians share_first_derivatives(const Vector& delta, const MarketData& market,
                                              const ThetaNonlinear& theta, const ShareModel& model) {
  return share_first_derivatives(node_shares(delta, market, theta, model));
}

/// Dense N x N x N tensor indexed (k, j, l).
class Tensor3 {
 public:
  Tensor3() = default;
  explicit Tensor3(Index n) : n_(n), data_(static_cast<std::size_t>(n * n * n), 0.0) {}
  Index dim() const { return n_; }
  double& operator()(Index k, Index j, Index l) { return data_[offset(k, j, l)]; }
  double operator()(Index k, Index j, Index l) const { return data_[offset(k, j, l)]; }

 private:
  std::size_t offset(Index k, Index j, Index l) const { return static_cast<std::size_t>((k * n_ + j) * n_ + l); }
  Index n_ = 0;
  std::vector<double> data_;
};

/// H_spp(k,j,l) = d2 s_k / dp_j dp_l and H_spdelta(k,j,l) = d2 s_k / dp_j ddelta_l.
struct ShareHessians {
  Tensor3 H_spp;
  Tensor3 H_spdelta;
};

inline ShareHessians share_hessians(const NodeShares& ns) {
  const Index n = ns.n_products();
  ShareHessians h{Tensor3(n), Tensor3(n)};
  for (Index i = 0; i < ns.n_nodes(); ++i) {
    const double a = ns.price_slope[i];
    const double wpp = ns.probabilities[i] * a * a;
    const double wpd = ns.probabilities[i] * a;
    const auto s = ns.s.col(i);
    for (Index k = 0; k < n; ++k)
      for (Index j = 0; j < n; ++j)
        for (Index l = 0; l < n; ++l) {
          double b = 2.0 * s[k] * (s[j] * s[l]);
          if (k == j && j == l) b += s[k];
          if (k == j) b -= s[k] * s[l];
          if (j == l) b -= s[k] * s[j];
          if (k == l) b -= s[k] * s[j];
          h.H_spp(k, j, l) += wpp * b;
          h.H_spdelta(k, j, l) += wpd * b;
        }
  }
  return h;
}

inline ShareHessians share_hessians(const Vector& delta, const MarketData& market, const ThetaNonlinear& theta,
                                    const ShareModel& model) {
  return share_hessians(node_shares(delta, market, theta, model));
}

enum class HessianKind { price_price, price_delta };

/// Firm-restricted contraction Xi(j,l) = sum_{k in F(j)} markup_k * H(k,j,l) evaluated
/// node by node in O(N^2) without forming the tensor.
inline Matrix firm_hessian_contraction(const NodeShares& ns, const Matrix& ownership, const Vector& markups,
                                       HessianKind kind) {
  Vector coef = ns.probabilities.cwiseProduct(ns.price_slope);
  if (kind == HessianKind::price_price) coef = coef.cwiseProduct(ns.price_slope);

  const Matrix ms = markups.asDiagonal() * ns.s;  // m_k s_ki
  const Matrix q = ownership * ms;                 // sum_{k in F(j)} m_k s_ki
  const Matrix sq = ns.s.cwiseProduct(q);
  const Matrix s_c = ns.s * coef.asDiagonal();

  Matrix xi = 2.0 * sq * s_c.transpose();
  xi.noalias() -= ms * s_c.transpose();
  xi -= ownership.cwiseProduct(s_c * ms.transpose());
  xi.diagonal() += (ms - sq) * coef;
  return xi;
}

}  // namespace blpmle
