#pragma once

// Bertrand first-order conditions and the implicit-function-theorem Jacobian of
// the map (delta, c) -> (s, p) entering the likelihood.
//
// Throughout, "delta" in a derivative means mean utility holding price fixed in
// the sense that prices move utilities only through dV/dp = alpha + sigma_p v.

#include "blpmle/shares.hpp"

#include <Eigen/LU>

namespace blpmle {

/// FOC vector F = s + (O o J_sp)(p - c); zero at a Bertrand-Nash equilibrium.
inline Vector foc_residual(const NodeShares& ns, const Matrix& ownership, const Vector& markups) {
  const Matrix jsp = share_first_derivatives(ns).J_sp;
  return aggregate_shares(ns) + ownership.cwiseProduct(jsp) * markups;
}

struct FocBlocks {
  Matrix J_sp;
  Matrix J_sdelta;
  Matrix J_Fp;
  Matrix J_Fdelta;
  Matrix J_Fc;
};

/// Partial derivatives of the FOCs:
///   J_Fp     = J_sp + O o J_sp + Xi_pp
///   J_Fdelta = J_sdelta + Xi_pdelta
///   J_Fc     = -O o J_sp
/// with Xi the firm-restricted Hessian contractions weighted by markups.
inline FocBlocks foc_derivative_blocks(const NodeShares& ns, const Matrix& ownership, const Vector& markups) {
  auto [jsp, jsd] = share_first_derivatives(ns);
  FocBlocks b;
  const Matrix o_jsp = ownership.cwiseProduct(jsp);
  b.J_Fp = jsp + o_jsp + firm_hessian_contraction(ns, ownership, markups, HessianKind::price_price);
  b.J_Fdelta = jsd + firm_hessian_contraction(ns, ownership, markups, HessianKind::price_delta);
  b.J_Fc = -o_jsp;
  b.J_sp = std::move(jsp);
  b.J_sdelta = std::move(jsd);
  return b;
}

inline FocBlocks foc_derivative_blocks(const MarketData& market, const ThetaNonlinear& theta, const ShareModel& model,
                                       const Vector& delta, const Vector& costs, const Matrix& ownership) {
  return foc_derivative_blocks(node_shares(delta, market, theta, model), ownership, market.prices - costs);
}

struct PriceDerivatives {
  Matrix dp_ddelta;
  Matrix dp_dc;
};

/// [dp/ddelta | dp/dc] = -(J_Fp)^{-1} [J_Fdelta | J_Fc], one factorization.
inline PriceDerivatives price_total_derivatives(const FocBlocks& b) {
  const Index n = b.J_Fp.rows();
  Eigen::PartialPivLU<Matrix> lu(b.J_Fp);
  if (!(lu.rcond() > 1e-14)) throw NumericalError("singular FOC price Jacobian: pricing system not locally identified");
  Matrix rhs(n, 2 * n);
  rhs << b.J_Fdelta, b.J_Fc;
  const Matrix sol = -lu.solve(rhs);
  return {sol.leftCols(n), sol.rightCols(n)};
}

struct MarketJacobian {
  Matrix J_Fp, J_Fdelta, J_Fc;
  Matrix dp_ddelta, dp_dc;
  Matrix ds_ddelta, ds_dc;
  double logabsdet = 0.0;
  int sign = 1;

  /// [[ds/ddelta, ds/dc], [dp/ddelta, dp/dc]]
  Matrix stacked() const {
    const Index n = ds_ddelta.rows();
    Matrix j(2 * n, 2 * n);
    j << ds_ddelta, ds_dc, dp_ddelta, dp_dc;
    return j;
  }
};

inline double log_abs_determinant(const Matrix& m, int* sign = nullptr) {
  Eigen::PartialPivLU<Matrix> lu(m);
  const Matrix& u = lu.matrixLU();
  double logdet = 0.0;
  int sgn = static_cast<int>(lu.permutationP().determinant());
  for (Index i = 0; i < u.rows(); ++i) {
    const double d = u(i, i);
    if (d == 0.0 || !std::isfinite(d)) throw NumericalError("exactly singular matrix in log-determinant");
    logdet += std::log(std::abs(d));
    if (d < 0.0) sgn = -sgn;
  }
  if (sign) *sign = sgn;
  return logdet;
}

inline MarketJacobian assemble_market_jacobian(const NodeShares& ns, const Matrix& ownership, const Vector& markups) {
  FocBlocks b = foc_derivative_blocks(ns, ownership, markups);
  PriceDerivatives pd = price_total_derivatives(b);
  MarketJacobian mj;
  mj.ds_ddelta = b.J_sdelta + b.J_sp * pd.dp_ddelta;
  mj.ds_dc = b.J_sp * pd.dp_dc;
  mj.dp_ddelta = std::move(pd.dp_ddelta);
  mj.dp_dc = std::move(pd.dp_dc);
  mj.J_Fp = std::move(b.J_Fp);
  mj.J_Fdelta = std::move(b.J_Fdelta);
  mj.J_Fc = std::move(b.J_Fc);
  mj.logabsdet = log_abs_determinant(mj.stacked(), &mj.sign);
  return mj;
}

inline MarketJacobian assemble_market_jacobian(const MarketData& market, const ThetaNonlinear& theta,
                                               const ShareModel& model, const Vector& delta, const Vector& costs,
                                               const Matrix& ownership) {
  try {
    return assemble_market_jacobian(node_shares(delta, market, theta, model), ownership, market.prices - costs);
  } catch (const NumericalError& e) {
    throw NumericalError("market " + std::to_string(market.market_id) + ": " + e.what());
  }
}

}  // namespace blpmle
