#pragma once

// Share inversion (mean utilities from observed shares) and marginal-cost recovery
// from the Bertrand first-order conditions.

#include "blpmle/shares.hpp"

#include <Eigen/LU>

namespace blpmle {

enum class Acceleration { squarem, plain };

struct InversionSettings {
  double tol = 1e-13;
  int max_iters = 1000;  // contraction-map evaluations
  Acceleration acceleration = Acceleration::squarem;
};

/// Residual history (max-abs log-share error at every evaluated iterate).
struct InversionTrace {
  std::vector<double> residuals;
  int evaluations = 0;
};

namespace detail {

struct ContractionStep {
  Vector next;
  double residual;
};

inline ContractionStep contraction(const Vector& delta, const Vector& log_obs, const MarketData& market,
                                   const ThetaNonlinear& theta, const ShareModel& model) {
  const Vector s = compute_shares(delta, market, theta, model);
  const Vector diff = log_obs - s.array().log().matrix();
  const double r = diff.allFinite() ? diff.cwiseAbs().maxCoeff() : std::numeric_limits<double>::infinity();
  return {delta + diff, r};
}

}  // namespace detail

/// Mean utilities rationalizing the observed shares at theta.
///
/// Fixed-point map delta <- delta + log s_obs - log s(delta). With SQUAREM the
/// squared-norm step length (S3) is used, clamped to [-step_max, -1]; an
/// extrapolated point whose residual exceeds the pre-step residual is replaced by
/// the plain two-step iterate. Converged when the log-share residual (which equals
/// the next plain change in delta) is at most tol.
inline Vector invert_shares(const MarketData& market, const ThetaNonlinear& theta, const ShareModel& model,
                            const InversionSettings& settings = {}, const Vector* warm_start = nullptr,
                            InversionTrace* trace = nullptr) {
  if (!(settings.tol > 0.0)) throw ConfigError("inversion tolerance must be positive");
  const Vector log_obs = market.shares.array().log().matrix();
  Vector x;
  if (warm_start && warm_start->size() == market.n_products() && warm_start->allFinite()) {
    x = *warm_start;
  } else {
    const double log_outside = std::log1p(-market.shares.sum());
    x = log_obs.array() - log_outside;
  }

  int evals = 0;
  auto step = [&](const Vector& at) {
    ++evals;
    auto out = detail::contraction(at, log_obs, market, theta, model);
    if (trace) trace->residuals.push_back(out.residual);
    return out;
  };
  auto finish = [&](Vector v) {
    if (trace) trace->evaluations = evals;
    return v;
  };
  const std::string where = "share inversion in market " + std::to_string(market.market_id);

  auto f0 = step(x);
  if (!f0.next.allFinite()) throw NumericalError(where + ": non-finite iterate", f0.residual);
  double step_max = 1.0;
  while (true) {
    if (f0.residual <= settings.tol) return finish(x);
    if (evals >= settings.max_iters)
      throw NumericalError(where + ": no convergence after " + std::to_string(evals) + " evaluations (residual " +
                               format_number(f0.residual) + ")",
                           f0.residual);
    if (settings.acceleration == Acceleration::plain) {
      x = f0.next;
      f0 = step(x);
      if (!f0.next.allFinite()) throw NumericalError(where + ": non-finite iterate", f0.residual);
      continue;
    }

    const Vector& x1 = f0.next;
    auto f1 = step(x1);
    if (!f1.next.allFinite()) throw NumericalError(where + ": non-finite iterate", f1.residual);
    if (f1.residual <= settings.tol) return finish(x1);
    const Vector r = x1 - x;
    const Vector v = f1.next - x1 - r;
    const double vn = v.norm();
    if (vn == 0.0) {
      x = f1.next;
      f0 = step(x);
      continue;
    }
    double alpha = -r.norm() / vn;
    alpha = std::clamp(alpha, -step_max, -1.0);
    const Vector xs = x - 2.0 * alpha * r + alpha * alpha * v;
    auto fs = step(xs);
    if (std::isfinite(fs.residual) && fs.residual <= f0.residual && fs.next.allFinite()) {
      if (alpha == -step_max) step_max *= 4.0;
      if (fs.residual <= settings.tol) return finish(xs);
      x = fs.next;
    } else {
      x = f1.next;
    }
    f0 = step(x);
    if (!f0.next.allFinite()) throw NumericalError(where + ": non-finite iterate", f0.residual);
  }
}

/// Marginal costs implied by the Bertrand first-order conditions
/// s + (O o J_sp)(p - c) = 0, i.e. c = p + (O o J_sp)^{-1} s with J_sp(j,k) = ds_k/dp_j
/// (negative diagonal), using observed shares and J_sp at (delta, theta).
inline Vector recover_costs(const MarketData& market, const ThetaNonlinear& theta, const ShareModel& model,
                            const Vector& delta, const Matrix& ownership) {
  const auto ns = node_shares(delta, market, theta, model);
  const Matrix jsp = share_first_derivatives(ns).J_sp;
  const Matrix system = ownership.cwiseProduct(jsp);
  Eigen::PartialPivLU<Matrix> lu(system);
  if (!(lu.rcond() > 1e-14))
    throw NumericalError("cost recovery in market " + std::to_string(market.market_id) +
                         ": singular ownership-weighted share Jacobian");
  return market.prices + lu.solve(market.shares);
}

}  // namespace blpmle
