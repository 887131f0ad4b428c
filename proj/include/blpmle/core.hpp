#pragma once

// Core data model shared by every estimator: markets, parameter partitions and
// the error hierarchy.

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace blpmle {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration (bad flag values, oversized quadrature, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data violating a schema or a model invariant.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A numerical routine failed: nonconvergence, singular system, NaN iterate.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what,
                          double residual = std::numeric_limits<double>::quiet_NaN())
      : Error(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

/// Six significant digits, for messages.
inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

/// One market's observables. `ownership` is derived from `firm_ids`.
struct MarketData {
  std::int64_t market_id = 0;
  Matrix demand_chars;  // N x K_d, intercept included, price excluded
  Matrix cost_chars;    // N x K_s, intercept included
  Vector prices;
  Vector shares;
  std::vector<std::int64_t> firm_ids;
  Matrix ownership;

  Index n_products() const { return prices.size(); }
};

inline Matrix ownership_from_firms(const std::vector<std::int64_t>& firm_ids) {
  const auto n = static_cast<Index>(firm_ids.size());
  Matrix own(n, n);
  for (Index j = 0; j < n; ++j)
    for (Index k = 0; k < n; ++k)
      own(j, k) = firm_ids[static_cast<std::size_t>(j)] == firm_ids[static_cast<std::size_t>(k)] ? 1.0 : 0.0;
  return own;
}

inline void validate_market(const MarketData& m) {
  const Index n = m.n_products();
  const std::string where = "market " + std::to_string(m.market_id) + ": ";
  if (n < 1) throw DataError(where + "no products");
  if (m.shares.size() != n || m.demand_chars.rows() != n || m.cost_chars.rows() != n ||
      static_cast<Index>(m.firm_ids.size()) != n)
    throw DataError(where + "inconsistent row counts");
  if (m.ownership.rows() != n || m.ownership.cols() != n)
    throw DataError(where + "ownership matrix has wrong shape");
  double total = 0.0;
  for (Index j = 0; j < n; ++j) {
    const double s = m.shares[j];
    if (!(s > 0.0 && s < 1.0)) throw DataError(where + "share outside (0,1) at product " + std::to_string(j));
    if (!(m.prices[j] > 0.0) || !std::isfinite(m.prices[j]))
      throw DataError(where + "non-positive price at product " + std::to_string(j));
    total += s;
  }
  if (!(total < 1.0)) throw DataError(where + "inside shares sum to >= 1");
  if (!m.demand_chars.allFinite() || !m.cost_chars.allFinite())
    throw DataError(where + "non-finite characteristics");
  for (Index j = 0; j < n; ++j)
    for (Index k = 0; k < n; ++k) {
      const bool same = m.firm_ids[static_cast<std::size_t>(j)] == m.firm_ids[static_cast<std::size_t>(k)];
      if (m.ownership(j, k) != (same ? 1.0 : 0.0))
        throw DataError(where + "ownership matrix disagrees with firm ids");
    }
}

inline MarketData make_market(std::int64_t id, Matrix demand_chars, Matrix cost_chars, Vector prices,
                              Vector shares, std::vector<std::int64_t> firm_ids) {
  MarketData m;
  m.market_id = id;
  m.demand_chars = std::move(demand_chars);
  m.cost_chars = std::move(cost_chars);
  m.prices = std::move(prices);
  m.shares = std::move(shares);
  m.ownership = ownership_from_firms(firm_ids);
  m.firm_ids = std::move(firm_ids);
  validate_market(m);
  return m;
}

/// Markets estimated jointly.
struct Dataset {
  std::vector<MarketData> markets;

  std::size_t n_markets() const { return markets.size(); }
  Index n_observations() const {
    Index n = 0;
    for (const auto& m : markets) n += m.n_products();
    return n;
  }
};

/// Where a random coefficient attaches: a demand characteristic column or price.
struct RandomCoefficient {
  enum class Kind { characteristic, price };
  Kind kind = Kind::characteristic;
  Index column = 0;

  static RandomCoefficient on_characteristic(Index col) { return {Kind::characteristic, col}; }
  static RandomCoefficient on_price() { return {Kind::price, 0}; }
};

/// Nonlinear parameters. `alpha` is the signed price coefficient: mean utility is
/// delta = X beta + alpha p + xi, so a downward-sloping demand has alpha < 0.
struct ThetaNonlinear {
  double alpha = 0.0;
  Vector sigma;

  Index size() const { return 1 + sigma.size(); }

  Vector pack() const {
    Vector v(size());
    v[0] = alpha;
    v.tail(sigma.size()) = sigma;
    return v;
  }
  static ThetaNonlinear unpack(const Vector& v) {
    ThetaNonlinear t;
    t.alpha = v[0];
    t.sigma = v.tail(v.size() - 1);
    return t;
  }
};

struct LinearParams {
  Vector beta;
  Vector gamma;
};

/// 2x2 covariance of (xi, u).
struct CovMatrix {
  double sigma_xi_sq = 1.0;
  double sigma_u_sq = 1.0;
  double sigma_xi_u = 0.0;

  double determinant() const { return sigma_xi_sq * sigma_u_sq - sigma_xi_u * sigma_xi_u; }
  bool positive_definite() const { return sigma_xi_sq > 0.0 && sigma_u_sq > 0.0 && determinant() > 0.0; }
  double correlation() const { return sigma_xi_u / std::sqrt(sigma_xi_sq * sigma_u_sq); }
  Eigen::Matrix2d matrix() const {
    Eigen::Matrix2d m;
    m << sigma_xi_sq, sigma_xi_u, sigma_xi_u, sigma_u_sq;
    return m;
  }
};

/// Functional form assumed for marginal cost at estimation time.
enum class SupplyForm { linear, log_linear };

/// Ownership used when recovering costs: the observed firm structure or
/// single-product firms.
enum class OwnershipMode { firms, identity };

inline Matrix estimation_ownership(const MarketData& m, OwnershipMode mode) {
  if (mode == OwnershipMode::identity) return Matrix::Identity(m.n_products(), m.n_products());
  return m.ownership;
}

}  // namespace blpmle
