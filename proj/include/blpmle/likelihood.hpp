#pragma once

// Full-information maximum likelihood under Bertrand-Nash pricing.
//
// For a candidate theta = (alpha, sigma) every market is inverted to mean
// utilities, costs are recovered from the FOCs and the change-of-variables
// Jacobian of (delta, c) -> (s, p) is assembled. The linear parameters and the
// residual covariance are then concentrated out, leaving
//
//   l(theta) = -(N/2) log|Sigma*(theta)| - sum_t log|det J_t(theta)|.

#include "blpmle/equilibrium.hpp"
#include "blpmle/inversion.hpp"
#include "blpmle/jacobian.hpp"
#include "blpmle/optimize.hpp"

#include <Eigen/Eigenvalues>

#include <map>
#include <sstream>

namespace blpmle {

struct EstimationSettings {
  SupplyForm supply_form = SupplyForm::linear;
  OwnershipMode ownership = OwnershipMode::firms;
  InversionSettings inversion;
  // Under log-linear supply the density of (s, p) strictly carries an extra
  // factor prod 1/c_j from d log c / dc. Off by default: the likelihood then uses
  // the (delta, c) -> (s, p) Jacobian only, with log c replacing c in the residual.
  bool log_cost_jacobian = false;
};

/// Stacked design across markets (ascending market order).
struct StackedData {
  Matrix X;
  Matrix W;
  Vector prices;
  std::vector<Index> offsets;  // first row of each market

  explicit StackedData(const Dataset& d) {
    const Index n = d.n_observations();
    if (d.markets.empty()) throw DataError("dataset has no markets");
    X.resize(n, d.markets.front().demand_chars.cols());
    W.resize(n, d.markets.front().cost_chars.cols());
    prices.resize(n);
    Index row = 0;
    for (const auto& m : d.markets) {
      if (m.demand_chars.cols() != X.cols() || m.cost_chars.cols() != W.cols())
        throw DataError("market " + std::to_string(m.market_id) + ": characteristic count differs across markets");
      offsets.push_back(row);
      X.middleRows(row, m.n_products()) = m.demand_chars;
      W.middleRows(row, m.n_products()) = m.cost_chars;
      prices.segment(row, m.n_products()) = m.prices;
      row += m.n_products();
    }
  }
};

// ---------------------------------------------------------------------------
// Concentrating out (beta, gamma, Sigma)

struct AlsSettings {
  double tol = 1e-12;
  int max_iters = 20000;
};

struct LinearConcentration {
  LinearParams linear;
  CovMatrix sigma;               // residual covariance normalized by N
  int iterations = 0;
  std::vector<double> objective;  // xi'xi u'u - (xi'u)^2 after every half-step
};

namespace detail {

inline Vector ols(const Matrix& A, const Vector& y) {
  Eigen::ColPivHouseholderQR<Matrix> qr(A);
  if (qr.rank() < A.cols()) throw NumericalError("rank-deficient regressor matrix");
  return qr.solve(y);
}

inline double det_objective(const Vector& xi, const Vector& u) {
  const double xu = xi.dot(u);
  return xi.squaredNorm() * u.squaredNorm() - xu * xu;
}

/// argmin_b det objective over the coefficient of `lhs` on `A`, holding the other
/// equation's residual `other` fixed: regression of lhs on A after partialling out `other`.
inline Vector als_half_step(const Matrix& A, const Vector& lhs, const Vector& other) {
  const double oo = other.squaredNorm();
  const Vector Ao = A.transpose() * other;
  Matrix normal = A.transpose() * A * oo - Ao * Ao.transpose();
  const Vector rhs = A.transpose() * lhs * oo - Ao * other.dot(lhs);
  Eigen::LDLT<Matrix> ldlt(normal);
  if (ldlt.info() != Eigen::Success || !(ldlt.rcond() > 1e-15))
    throw NumericalError("ALS normal matrix is singular");
  return ldlt.solve(rhs);
}

}  // namespace detail

/// Minimizes det of the residual cross-product matrix of
///   y = X beta + xi,  z = W gamma + u
/// by alternating the two closed-form conditional minimizers, starting from OLS.
/// `y` is mean utility net of alpha * p and `z` the (possibly logged) cost.
inline LinearConcentration concentrate_linear(const Vector& y, const Vector& z, const Matrix& X, const Matrix& W,
                                              const AlsSettings& settings = {}) {
  LinearConcentration out;
  Vector beta = detail::ols(X, y);
  Vector gamma = detail::ols(W, z);
  Vector xi = y - X * beta;
  Vector u = z - W * gamma;
  out.objective.push_back(detail::det_objective(xi, u));
  Vector prev_beta = beta, prev_gamma = gamma;
  for (int it = 1; it <= settings.max_iters; ++it) {
    prev_beta = beta;
    prev_gamma = gamma;
    beta = detail::als_half_step(X, y, u);
    xi = y - X * beta;
    out.objective.push_back(detail::det_objective(xi, u));
    gamma = detail::als_half_step(W, z, xi);
    u = z - W * gamma;
    out.objective.push_back(detail::det_objective(xi, u));
    out.iterations = it;
    const double change = std::max(
        ((beta - prev_beta).array().abs() / (1.0 + beta.array().abs())).maxCoeff(),
        ((gamma - prev_gamma).array().abs() / (1.0 + gamma.array().abs())).maxCoeff());
    if (!std::isfinite(change)) throw NumericalError("ALS produced non-finite parameters");
    if (change <= settings.tol) {
      const double n = static_cast<double>(y.size());
      out.linear = {beta, gamma};
      out.sigma = {xi.squaredNorm() / n, u.squaredNorm() / n, xi.dot(u) / n};
      return out;
    }
  }
  std::ostringstream msg;
  msg << "ALS did not converge in " << settings.max_iters << " iterations; last beta " << beta.transpose()
      << " (previous " << prev_beta.transpose() << "), last gamma " << gamma.transpose() << " (previous "
      << prev_gamma.transpose() << ")";
  throw NumericalError(msg.str());
}

/// Gradients of the determinant objective in beta and gamma (zero at the ALS fixed point).
inline std::pair<Vector, Vector> determinant_gradients(const Vector& y, const Vector& z, const Matrix& X,
                                                       const Matrix& W, const LinearParams& lin) {
  const Vector xi = y - X * lin.beta;
  const Vector u = z - W * lin.gamma;
  const double xu = xi.dot(u);
  Vector gb = -2.0 * X.transpose() * xi * u.squaredNorm() + 2.0 * xu * X.transpose() * u;
  Vector gg = -2.0 * W.transpose() * u * xi.squaredNorm() + 2.0 * xu * W.transpose() * xi;
  return {gb, gg};
}

// ---------------------------------------------------------------------------
// Per-theta market solutions

struct MarketSolution {
  Vector delta;
  Vector costs;
  double logabsdet = 0.0;  // log|det J_t| (+ sum log c with log_cost_jacobian)
  int sign = 1;
};

struct ThetaSolution {
  std::vector<MarketSolution> markets;
};

/// Supply-side dependent variable: c, or log c under a log-linear cost function.
inline Vector supply_outcome(const Vector& costs, SupplyForm form) {
  if (form == SupplyForm::linear) return costs;
  if (!(costs.array() > 0.0).all()) throw NumericalError("non-positive recovered cost under log-linear supply");
  return costs.array().log().matrix();
}

inline MarketSolution solve_market(const MarketData& market, const ThetaNonlinear& theta, const ShareModel& model,
                                   const EstimationSettings& settings, const Vector* warm_delta = nullptr,
                                   bool with_jacobian = true) {
  MarketSolution sol;
  sol.delta = invert_shares(market, theta, model, settings.inversion, warm_delta);
  const Matrix own = estimation_ownership(market, settings.ownership);
  sol.costs = recover_costs(market, theta, model, sol.delta, own);
  if (settings.supply_form == SupplyForm::log_linear && !(sol.costs.array() > 0.0).all())
    throw NumericalError("market " + std::to_string(market.market_id) +
                         ": non-positive recovered cost under log-linear supply");
  if (with_jacobian) {
    const auto mj = assemble_market_jacobian(market, theta, model, sol.delta, sol.costs, own);
    sol.logabsdet = mj.logabsdet;
    sol.sign = mj.sign;
    if (settings.supply_form == SupplyForm::log_linear && settings.log_cost_jacobian)
      sol.logabsdet += sol.costs.array().log().sum();
  }
  return sol;
}

inline ThetaSolution solve_markets(const ThetaNonlinear& theta, const Dataset& data, const ShareModel& model,
                                   const EstimationSettings& settings, const ThetaSolution* warm = nullptr,
                                   bool with_jacobian = true) {
  ThetaSolution out;
  out.markets.reserve(data.n_markets());
  for (std::size_t t = 0; t < data.n_markets(); ++t) {
    const Vector* w = (warm && warm->markets.size() == data.n_markets()) ? &warm->markets[t].delta : nullptr;
    out.markets.push_back(solve_market(data.markets[t], theta, model, settings, w, with_jacobian));
  }
  return out;
}

/// Stacked demand regressand delta - alpha p and supply outcome.
inline std::pair<Vector, Vector> stacked_outcomes(const ThetaSolution& sol, const StackedData& st, double alpha,
                                                  SupplyForm form) {
  const Index n = st.prices.size();
  Vector y(n), z(n);
  for (std::size_t t = 0; t < sol.markets.size(); ++t) {
    const auto& m = sol.markets[t];
    y.segment(st.offsets[t], m.delta.size()) = m.delta;
    z.segment(st.offsets[t], m.costs.size()) = supply_outcome(m.costs, form);
  }
  y -= alpha * st.prices;
  return {y, z};
}

// ---------------------------------------------------------------------------
// Likelihood values

struct LikelihoodValue {
  double loglik = 0.0;
  double covariance_term = 0.0;  // (N/2) log|Sigma*|
  double jacobian_term = 0.0;    // sum_t log|det J_t|
  LinearConcentration linear;
};

inline LikelihoodValue likelihood_from_solution(const ThetaSolution& sol, const StackedData& st,
                                                const ThetaNonlinear& theta, SupplyForm form,
                                                const AlsSettings& als = {}) {
  auto [y, z] = stacked_outcomes(sol, st, theta.alpha, form);
  LikelihoodValue v;
  v.linear = concentrate_linear(y, z, st.X, st.W, als);
  const double det = v.linear.sigma.determinant();
  if (!(det > 0.0)) throw NumericalError("concentrated covariance is singular");
  v.covariance_term = 0.5 * static_cast<double>(y.size()) * std::log(det);
  for (const auto& m : sol.markets) v.jacobian_term += m.logabsdet;
  v.loglik = -(v.covariance_term + v.jacobian_term);
  return v;
}

inline LikelihoodValue concentrated_likelihood(const ThetaNonlinear& theta, const Dataset& data,
                                               const ShareModel& model, const EstimationSettings& settings = {},
                                               ThetaSolution* cache = nullptr) {
  const StackedData st(data);
  ThetaSolution sol = solve_markets(theta, data, model, settings, cache);
  auto v = likelihood_from_solution(sol, st, theta, settings.supply_form);
  if (cache) *cache = std::move(sol);
  return v;
}

inline double concentrated_loglik(const ThetaNonlinear& theta, const Dataset& data, const ShareModel& model,
                                  const EstimationSettings& settings = {}) {
  return concentrated_likelihood(theta, data, model, settings).loglik;
}

/// Market contribution of the unconcentrated log-likelihood at (theta, beta, gamma, Sigma).
inline double market_loglik(const MarketData& market, const MarketSolution& sol, const ThetaNonlinear& theta,
                            const LinearParams& lin, const CovMatrix& sigma, SupplyForm form) {
  const double det = sigma.determinant();
  if (!(det > 0.0) || !(sigma.sigma_xi_sq > 0.0)) return -std::numeric_limits<double>::infinity();
  const Vector xi = sol.delta - market.demand_chars * lin.beta - theta.alpha * market.prices;
  const Vector u = supply_outcome(sol.costs, form) - market.cost_chars * lin.gamma;
  const double quad = (sigma.sigma_u_sq * xi.squaredNorm() - 2.0 * sigma.sigma_xi_u * xi.dot(u) +
                       sigma.sigma_xi_sq * u.squaredNorm()) /
                      det;
  return -0.5 * static_cast<double>(market.n_products()) * std::log(det) - 0.5 * quad - sol.logabsdet;
}

inline double unconcentrated_loglik(const ThetaNonlinear& theta, const LinearParams& lin, const CovMatrix& sigma,
                                    const Dataset& data, const ShareModel& model,
                                    const EstimationSettings& settings = {}) {
  const ThetaSolution sol = solve_markets(theta, data, model, settings);
  double total = 0.0;
  for (std::size_t t = 0; t < data.n_markets(); ++t)
    total += market_loglik(data.markets[t], sol.markets[t], theta, lin, sigma, settings.supply_form);
  return total;
}

// ---------------------------------------------------------------------------
// Standard errors

/// Ordering of the full parameter stack used for standard errors.
struct ParameterLayout {
  Index k_theta = 0;
  Index k_beta = 0;
  Index k_gamma = 0;
  bool include_sigma = true;

  Index size() const { return k_theta + k_beta + k_gamma + (include_sigma ? 3 : 0); }

  std::vector<std::string> names() const {
    std::vector<std::string> n{"alpha"};
    for (Index k = 1; k < k_theta; ++k) n.push_back("sigma" + std::to_string(k - 1));
    for (Index k = 0; k < k_beta; ++k) n.push_back("beta" + std::to_string(k));
    for (Index k = 0; k < k_gamma; ++k) n.push_back("gamma" + std::to_string(k));
    if (include_sigma) {
      n.emplace_back("sigma_xi_sq");
      n.emplace_back("sigma_u_sq");
      n.emplace_back("sigma_xi_u");
    }
    return n;
  }

  Vector pack(const ThetaNonlinear& th, const LinearParams& lin, const CovMatrix& cov) const {
    Vector v(size());
    v.head(k_theta) = th.pack();
    v.segment(k_theta, k_beta) = lin.beta;
    v.segment(k_theta + k_beta, k_gamma) = lin.gamma;
    if (include_sigma) v.tail(3) << cov.sigma_xi_sq, cov.sigma_u_sq, cov.sigma_xi_u;
    return v;
  }
  void unpack(const Vector& v, ThetaNonlinear& th, LinearParams& lin, CovMatrix& cov) const {
    th = ThetaNonlinear::unpack(v.head(k_theta));
    lin.beta = v.segment(k_theta, k_beta);
    lin.gamma = v.segment(k_theta + k_beta, k_gamma);
    if (include_sigma) cov = {v[size() - 3], v[size() - 2], v[size() - 1]};
  }
};

struct StandardErrors {
  std::vector<std::string> names;
  Vector values;
  bool available = false;
  double min_eigenvalue = std::numeric_limits<double>::quiet_NaN();
  Matrix information;  // per-market average information
  std::string diagnostic;
};

/// Second derivatives by central differences with step rel_step * max(|x_k|, 1).
/// Each off-diagonal entry is computed once, so the result is exactly symmetric.
inline Matrix fd_hessian(const Objective& f, const Vector& x, double rel_step) {
  const Index n = x.size();
  Matrix h(n, n);
  const double f0 = f(x);
  Vector step(n);
  for (Index k = 0; k < n; ++k) step[k] = fd_step(x[k], rel_step);
  Vector fp(n), fm(n);
  for (Index i = 0; i < n; ++i) {
    Vector xp = x, xm = x;
    xp[i] += step[i];
    xm[i] -= step[i];
    fp[i] = f(xp);
    fm[i] = f(xm);
    h(i, i) = (fp[i] - 2.0 * f0 + fm[i]) / (step[i] * step[i]);
  }
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) {
      Vector x_pp = x, x_pm = x, x_mp = x, x_mm = x;
      x_pp[i] += step[i], x_pp[j] += step[j];
      x_pm[i] += step[i], x_pm[j] -= step[j];
      x_mp[i] -= step[i], x_mp[j] += step[j];
      x_mm[i] -= step[i], x_mm[j] -= step[j];
      h(i, j) = h(j, i) = (f(x_pp) - f(x_pm) - f(x_mp) + f(x_mm)) / (4.0 * step[i] * step[j]);
    }
  return h;
}

/// Standard errors from the information matrix I = -(1/T) d2/dTheta2 sum_t l_t,
/// SE_k = sqrt([I^{-1}]_kk / T), differentiating the unconcentrated likelihood in
/// the full stack (theta, beta, gamma, Sigma entries).
inline StandardErrors standard_errors_from_hessian(const Matrix& hessian, std::size_t n_markets,
                                                   std::vector<std::string> names) {
  StandardErrors se;
  se.names = std::move(names);
  const double T = static_cast<double>(n_markets);
  se.information = -0.5 * (hessian + hessian.transpose()) / T;
  se.values = Vector::Constant(hessian.rows(), std::numeric_limits<double>::quiet_NaN());
  if (!se.information.allFinite()) {
    se.diagnostic = "information matrix has non-finite entries";
    return se;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(se.information);
  se.min_eigenvalue = eig.eigenvalues().minCoeff();
  if (!(se.min_eigenvalue > 0.0)) {
    se.diagnostic = "information matrix not positive definite (smallest eigenvalue " +
                    std::to_string(se.min_eigenvalue) + ")";
    return se;
  }
  const Matrix inv = eig.eigenvectors() * eig.eigenvalues().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
  se.values = (inv.diagonal() / T).cwiseSqrt();
  se.available = true;
  return se;
}

inline StandardErrors fisher_standard_errors(const ThetaNonlinear& theta_hat, const LinearParams& linear_hat,
                                             const CovMatrix& sigma_hat, const Dataset& data, const ShareModel& model,
                                             const EstimationSettings& settings = {}, double rel_step = 1e-4) {
  ParameterLayout layout{theta_hat.size(), linear_hat.beta.size(), linear_hat.gamma.size(), true};
  std::map<std::vector<double>, ThetaSolution> cache;
  ThetaSolution center = solve_markets(theta_hat, data, model, settings);
  auto solution_for = [&](const ThetaNonlinear& th) -> const ThetaSolution& {
    const Vector key_v = th.pack();
    std::vector<double> key(key_v.data(), key_v.data() + key_v.size());
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, solve_markets(th, data, model, settings, &center)).first;
    return it->second;
  };
  Objective total = [&](const Vector& v) {
    ThetaNonlinear th;
    LinearParams lin;
    CovMatrix cov;
    layout.unpack(v, th, lin, cov);
    const ThetaSolution& sol = solution_for(th);
    double sum = 0.0;
    for (std::size_t t = 0; t < data.n_markets(); ++t)
      sum += market_loglik(data.markets[t], sol.markets[t], th, lin, cov, settings.supply_form);
    return sum;
  };
  const Vector x = layout.pack(theta_hat, linear_hat, sigma_hat);
  Matrix h;
  try {
    h = fd_hessian(total, x, rel_step);
  } catch (const Error& e) {
    StandardErrors se;
    se.names = layout.names();
    se.values = Vector::Constant(x.size(), std::numeric_limits<double>::quiet_NaN());
    se.diagnostic = std::string("likelihood evaluation failed during differentiation: ") + e.what();
    return se;
  }
  return standard_errors_from_hessian(h, data.n_markets(), layout.names());
}

// ---------------------------------------------------------------------------
// Estimation

/// Starting values: each coordinate uniform on center +- spread * max(|center|, floor),
/// projected onto the bounds.
struct StartSampler {
  double spread = 0.5;
  double floor = 0.05;

  std::vector<Vector> draw(const Vector& center, int count, std::uint64_t seed, const Bounds& bounds) const {
    std::vector<Vector> starts;
    for (int s = 0; s < count; ++s) {
      Engine eng = substream(seed, {0x5747u, static_cast<std::uint64_t>(s)});
      Vector v(center.size());
      for (Index k = 0; k < center.size(); ++k) {
        const double half = spread * std::max(std::abs(center[k]), floor);
        std::uniform_real_distribution<double> d(center[k] - half, center[k] + half);
        v[k] = d(eng);
      }
      starts.push_back(bounds.project(v));
    }
    return starts;
  }
};

struct StartRecord {
  Vector initial;
  Vector final_point;
  double objective = 0.0;
  bool converged = false;
  int evaluations = 0;
  std::string message;
};

struct EvaluationLog {
  int failures = 0;
  std::string last_failure;
};

struct MleConfig {
  EstimationSettings estimation;
  ThetaNonlinear center;
  int n_starts = 3;
  StartSampler sampler;
  std::vector<ThetaNonlinear> extra_starts;
  std::uint64_t seed = 0;
  OptimizerSettings optimizer;
  bool compute_standard_errors = true;
  double hessian_rel_step = 1e-4;
};

struct MleResult {
  ThetaNonlinear theta_hat;
  LinearParams linear_hat;
  CovMatrix sigma_hat;
  double loglik = 0.0;
  double covariance_term = 0.0;
  double jacobian_term = 0.0;
  StandardErrors standard_errors;
  std::vector<StartRecord> starts;
  bool converged = false;
  EvaluationLog evaluation_log;
};

/// Lower bound 0 on every sigma; alpha unrestricted.
inline Bounds theta_bounds(Index k_theta) {
  Bounds b = Bounds::unbounded(k_theta);
  b.lower.tail(k_theta - 1).setZero();
  return b;
}

/// Maximizes the concentrated likelihood from several starts and keeps the best.
inline MleResult mle_estimate(const Dataset& data, const ShareModel& model, const MleConfig& config) {
  const StackedData st(data);
  const double n_obs = static_cast<double>(data.n_observations());
  const Index k = config.center.size();
  const Bounds bounds = theta_bounds(k);

  MleResult result;
  ThetaSolution warm;
  bool have_warm = false;
  Objective objective = [&](const Vector& v) {
    const ThetaNonlinear th = ThetaNonlinear::unpack(v);
    try {
      ThetaSolution sol = solve_markets(th, data, model, config.estimation, have_warm ? &warm : nullptr);
      const double ll = likelihood_from_solution(sol, st, th, config.estimation.supply_form).loglik;
      warm = std::move(sol);
      have_warm = true;
      return -ll / n_obs;
    } catch (const Error& e) {
      ++result.evaluation_log.failures;
      result.evaluation_log.last_failure = e.what();
      return 1e10;
    }
  };

  std::vector<Vector> starts = config.sampler.draw(config.center.pack(), config.n_starts, config.seed, bounds);
  for (const auto& extra : config.extra_starts) starts.push_back(bounds.project(extra.pack()));
  if (starts.empty()) throw ConfigError("MLE needs at least one starting value");

  double best = std::numeric_limits<double>::infinity();
  Vector best_x;
  for (const auto& x0 : starts) {
    have_warm = false;
    const auto opt = minimize_box(objective, x0, bounds, config.optimizer);
    StartRecord rec{x0, opt.x, -opt.f * n_obs, opt.converged, opt.evaluations, opt.message};
    if (opt.f < 1e10 && opt.f < best) {
      best = opt.f;
      best_x = opt.x;
      result.converged = opt.converged;
    }
    result.starts.push_back(std::move(rec));
  }
  if (best_x.size() == 0) {
    std::ostringstream msg;
    msg << "MLE failed from all " << starts.size() << " starts; last failure: " << result.evaluation_log.last_failure;
    throw NumericalError(msg.str());
  }

  result.theta_hat = ThetaNonlinear::unpack(best_x);
  const auto value = concentrated_likelihood(result.theta_hat, data, model, config.estimation);
  result.loglik = value.loglik;
  result.covariance_term = value.covariance_term;
  result.jacobian_term = value.jacobian_term;
  result.linear_hat = value.linear.linear;
  result.sigma_hat = value.linear.sigma;
  if (config.compute_standard_errors)
    result.standard_errors = fisher_standard_errors(result.theta_hat, result.linear_hat, result.sigma_hat, data,
                                                    model, config.estimation, config.hessian_rel_step);
  return result;
}

}  // namespace blpmle
