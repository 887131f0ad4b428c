#pragma once

// Two-step GMM with demand and supply moments
//   E[Z_d' xi] = 0,  E[Z_s' u] = 0,
// xi = delta - alpha p - X beta and u = c - W gamma (log c under log-linear supply).
// The linear parameters are solved in closed form at every theta.

#include "blpmle/likelihood.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <sstream>

namespace blpmle {

enum class InstrumentKind { differentiation_local, blp_sums, predicted_price };

inline const char* to_string(InstrumentKind k) {
  switch (k) {
    case InstrumentKind::differentiation_local:
      return "differentiation_local";
    case InstrumentKind::blp_sums:
      return "blp_sums";
    case InstrumentKind::predicted_price:
      return "predicted_price";
  }
  return "?";
}

inline InstrumentKind instrument_kind_from_string(const std::string& s) {
  if (s == "differentiation_local") return InstrumentKind::differentiation_local;
  if (s == "blp_sums") return InstrumentKind::blp_sums;
  if (s == "predicted_price") return InstrumentKind::predicted_price;
  throw ConfigError("unknown instrument kind '" + s + "'");
}

struct InstrumentSet {
  Matrix Z_demand;
  Matrix Z_supply;
  std::vector<std::string> names;  // columns of Z_demand (Z_supply uses the same set)
  std::vector<std::string> dropped;
  std::vector<double> bandwidths;
  Vector predicted_price;  // only for the predicted_price kind
  InstrumentKind kind = InstrumentKind::differentiation_local;
};

namespace detail {

/// Greedy column selection: keeps a column when it raises the numerical rank of
/// the (column-scaled) kept block.
inline Matrix drop_collinear(const std::vector<Vector>& cols, const std::vector<std::string>& names,
                             std::vector<std::string>& kept, std::vector<std::string>& dropped) {
  std::vector<Vector> keep;
  for (std::size_t c = 0; c < cols.size(); ++c) {
    const double scale = cols[c].cwiseAbs().maxCoeff();
    if (!(scale > 0.0)) {
      dropped.push_back(names[c]);
      continue;
    }
    Matrix trial(cols[c].size(), static_cast<Index>(keep.size()) + 1);
    for (std::size_t k = 0; k < keep.size(); ++k) trial.col(static_cast<Index>(k)) = keep[k];
    trial.col(trial.cols() - 1) = cols[c] / scale;
    Eigen::ColPivHouseholderQR<Matrix> qr(trial);
    qr.setThreshold(1e-10);
    if (qr.rank() == trial.cols()) {
      keep.push_back(cols[c] / scale);
      kept.push_back(names[c]);
    } else {
      dropped.push_back(names[c]);
    }
  }
  Matrix Z(cols.empty() ? 0 : cols.front().size(), static_cast<Index>(keep.size()));
  // Scaling of columns does not change the GMM estimates with the weights used here,
  // but the unscaled values are what users expect to see.
  for (std::size_t k = 0, c = 0; c < cols.size(); ++c) {
    if (k < kept.size() && names[c] == kept[k]) Z.col(static_cast<Index>(k++)) = cols[c];
  }
  return Z;
}

/// Sample standard deviation of all within-market pairwise differences of v.
inline double pairwise_difference_sd(const Dataset& d, const StackedData& st, const Vector& v) {
  double sum = 0.0, sq = 0.0;
  double count = 0.0;
  for (std::size_t t = 0; t < d.n_markets(); ++t) {
    const Index off = st.offsets[t], n = d.markets[t].n_products();
    for (Index j = 0; j < n; ++j)
      for (Index k = 0; k < n; ++k) {
        if (j == k) continue;
        const double diff = v[off + j] - v[off + k];
        sum += diff;
        sq += diff * diff;
        count += 1.0;
      }
  }
  if (count < 2.0) return 0.0;
  const double mean = sum / count;
  return std::sqrt(std::max(0.0, (sq - count * mean * mean) / (count - 1.0)));
}

/// Counts of rival and own-firm products (excluding the product itself) within
/// `bandwidth` of each product's value of v.
inline std::pair<Vector, Vector> local_counts(const Dataset& d, const StackedData& st, const Vector& v,
                                              double bandwidth) {
  Vector rival = Vector::Zero(v.size()), own = Vector::Zero(v.size());
  for (std::size_t t = 0; t < d.n_markets(); ++t) {
    const auto& m = d.markets[t];
    const Index off = st.offsets[t], n = m.n_products();
    for (Index j = 0; j < n; ++j)
      for (Index k = 0; k < n; ++k) {
        if (j == k || std::abs(v[off + j] - v[off + k]) > bandwidth) continue;
        if (m.firm_ids[static_cast<std::size_t>(j)] == m.firm_ids[static_cast<std::size_t>(k)])
          own[off + j] += 1.0;
        else
          rival[off + j] += 1.0;
      }
  }
  return {rival, own};
}

/// Sums of v over rival and over own-firm products (excluding the product itself).
inline std::pair<Vector, Vector> characteristic_sums(const Dataset& d, const StackedData& st, const Vector& v) {
  Vector rival = Vector::Zero(v.size()), own = Vector::Zero(v.size());
  for (std::size_t t = 0; t < d.n_markets(); ++t) {
    const auto& m = d.markets[t];
    const Index off = st.offsets[t], n = m.n_products();
    for (Index j = 0; j < n; ++j)
      for (Index k = 0; k < n; ++k) {
        if (j == k) continue;
        if (m.firm_ids[static_cast<std::size_t>(j)] == m.firm_ids[static_cast<std::size_t>(k)])
          own[off + j] += v[off + k];
        else
          rival[off + j] += v[off + k];
      }
  }
  return {rival, own};
}

}  // namespace detail

/// Exogenous block [X, W] followed by the requested excluded instruments; the same
/// set serves the demand and the supply moments. Collinear columns are dropped and
/// reported in `dropped`.
inline InstrumentSet build_instruments(const Dataset& data, const ShareModel& model, InstrumentKind kind) {
  const StackedData st(data);
  InstrumentSet out;
  out.kind = kind;
  std::vector<Vector> cols;
  std::vector<std::string> names;
  for (Index k = 0; k < st.X.cols(); ++k) {
    cols.emplace_back(st.X.col(k));
    names.push_back("x" + std::to_string(k));
  }
  for (Index k = 0; k < st.W.cols(); ++k) {
    cols.emplace_back(st.W.col(k));
    names.push_back("w" + std::to_string(k));
  }
  const std::size_t n_exog = cols.size();

  auto add_local = [&](const Vector& v, const std::string& label) {
    const double h = detail::pairwise_difference_sd(data, st, v);
    out.bandwidths.push_back(h);
    auto [rival, own] = detail::local_counts(data, st, v, h);
    cols.push_back(rival);
    names.push_back("local_rival_" + label);
    cols.push_back(own);
    names.push_back("local_own_" + label);
  };

  if (kind == InstrumentKind::blp_sums) {
    for (std::size_t c = 0; c < n_exog; ++c) {
      auto [rival, own] = detail::characteristic_sums(data, st, cols[c]);
      cols.push_back(rival);
      names.push_back("sum_rival_" + names[c]);
      cols.push_back(own);
      names.push_back("sum_own_" + names[c]);
    }
  } else {
    for (const auto& rc : model.random_coefficients)
      if (rc.kind == RandomCoefficient::Kind::characteristic)
        add_local(st.X.col(rc.column), "x" + std::to_string(rc.column));
    if (kind == InstrumentKind::predicted_price) {
      std::vector<std::string> kept, dropped;
      const Matrix Afull = detail::drop_collinear(cols, names, kept, dropped);
      out.predicted_price = Afull * detail::ols(Afull, st.prices);
      add_local(out.predicted_price, "phat");
    }
  }
  std::vector<std::string> kept;
  out.Z_demand = detail::drop_collinear(cols, names, kept, out.dropped);
  out.Z_supply = out.Z_demand;
  out.names = std::move(kept);
  return out;
}

// ---------------------------------------------------------------------------

struct MomentSystem {
  Matrix M;  // L x K, derivative of -gbar in (beta, gamma)
  Vector m;  // L, gbar at beta = gamma = 0
};

/// Stacked moment pieces at fixed outcomes: gbar(kappa) = m - M kappa with
/// kappa = (beta, gamma), both normalized by N.
inline MomentSystem moment_system(const Vector& y, const Vector& z, const Matrix& X, const Matrix& W,
                                  const InstrumentSet& Z) {
  const double n = static_cast<double>(y.size());
  const Index Ld = Z.Z_demand.cols(), Ls = Z.Z_supply.cols();
  MomentSystem s;
  s.M = Matrix::Zero(Ld + Ls, X.cols() + W.cols());
  s.M.topLeftCorner(Ld, X.cols()) = Z.Z_demand.transpose() * X / n;
  s.M.bottomRightCorner(Ls, W.cols()) = Z.Z_supply.transpose() * W / n;
  s.m.resize(Ld + Ls);
  s.m.head(Ld) = Z.Z_demand.transpose() * y / n;
  s.m.tail(Ls) = Z.Z_supply.transpose() * z / n;
  return s;
}

/// Closed-form IV-GMM solution (M' Psi M)^{-1} M' Psi m.
inline LinearParams iv_linear_solve(const Vector& y, const Vector& z, const Matrix& X, const Matrix& W,
                                    const InstrumentSet& Z, const Matrix& psi) {
  const auto sys = moment_system(y, z, X, W, Z);
  const Matrix normal = sys.M.transpose() * psi * sys.M;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (normal + normal.transpose()));
  const Vector& ev = eig.eigenvalues();
  if (eig.info() != Eigen::Success || !(ev.minCoeff() > 1e-12 * ev.cwiseAbs().maxCoeff()))
    throw NumericalError("IV normal matrix is singular");
  const Vector kappa = normal.ldlt().solve(sys.M.transpose() * psi * sys.m);
  return {kappa.head(X.cols()), kappa.tail(W.cols())};
}

/// Per-observation moment contributions g_i (N x L).
inline Matrix moment_contributions(const Vector& xi, const Vector& u, const InstrumentSet& Z) {
  Matrix g(xi.size(), Z.Z_demand.cols() + Z.Z_supply.cols());
  g.leftCols(Z.Z_demand.cols()) = Z.Z_demand.array().colwise() * xi.array();
  g.rightCols(Z.Z_supply.cols()) = Z.Z_supply.array().colwise() * u.array();
  return g;
}

/// First-step weight: block diagonal with (Z'Z/N)^{-1} per equation.
inline Matrix two_sls_weight(const InstrumentSet& Z) {
  const double n = static_cast<double>(Z.Z_demand.rows());
  const Index Ld = Z.Z_demand.cols(), Ls = Z.Z_supply.cols();
  Matrix psi = Matrix::Zero(Ld + Ls, Ld + Ls);
  psi.topLeftCorner(Ld, Ld) = (Z.Z_demand.transpose() * Z.Z_demand / n).inverse();
  psi.bottomRightCorner(Ls, Ls) = (Z.Z_supply.transpose() * Z.Z_supply / n).inverse();
  return psi;
}

struct RobustWeight {
  Matrix psi;
  Matrix S;             // (1/N) sum g_i g_i', uncentered
  double ridge = 0.0;   // added to S when it was not numerically PD
};

inline RobustWeight robust_weight(const Matrix& g) {
  RobustWeight w;
  const double n = static_cast<double>(g.rows());
  w.S = g.transpose() * g / n;
  Matrix S = w.S;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(S);
  const double top = eig.eigenvalues().maxCoeff();
  if (!(eig.eigenvalues().minCoeff() > 1e-12 * top)) {
    w.ridge = 1e-10 * S.trace();
    S.diagonal().array() += w.ridge;
    eig.compute(S);
  }
  if (!(eig.eigenvalues().minCoeff() > 0.0)) throw NumericalError("robust weighting matrix is not positive definite");
  w.psi = eig.eigenvectors() * eig.eigenvalues().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
  return w;
}

inline double condition_number(const Matrix& sym) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  const double lo = eig.eigenvalues().cwiseAbs().minCoeff();
  return lo > 0.0 ? eig.eigenvalues().cwiseAbs().maxCoeff() / lo : std::numeric_limits<double>::infinity();
}

struct GmmEvaluation {
  double objective = 0.0;  // gbar' Psi gbar
  Vector gbar;
  LinearParams linear;
  Vector xi;
  Vector u;
};

/// Inverts, recovers costs, concentrates (beta, gamma) and evaluates gbar' Psi gbar.
inline GmmEvaluation gmm_evaluate(const ThetaNonlinear& theta, const Dataset& data, const InstrumentSet& Z,
                                  const Matrix& psi, const ShareModel& model, const EstimationSettings& settings = {},
                                  ThetaSolution* warm = nullptr) {
  const StackedData st(data);
  ThetaSolution sol = solve_markets(theta, data, model, settings, warm, false);
  auto [y, z] = stacked_outcomes(sol, st, theta.alpha, settings.supply_form);
  GmmEvaluation ev;
  // A zero weight leaves (beta, gamma) unidentified and the objective identically 0;
  // report the OLS fits in that case.
  if (psi.isZero(0.0))
    ev.linear = {detail::ols(st.X, y), detail::ols(st.W, z)};
  else
    ev.linear = iv_linear_solve(y, z, st.X, st.W, Z, psi);
  ev.xi = y - st.X * ev.linear.beta;
  ev.u = z - st.W * ev.linear.gamma;
  const double n = static_cast<double>(y.size());
  ev.gbar.resize(Z.Z_demand.cols() + Z.Z_supply.cols());
  ev.gbar.head(Z.Z_demand.cols()) = Z.Z_demand.transpose() * ev.xi / n;
  ev.gbar.tail(Z.Z_supply.cols()) = Z.Z_supply.transpose() * ev.u / n;
  ev.objective = ev.gbar.dot(psi * ev.gbar);
  if (warm) *warm = std::move(sol);
  return ev;
}

inline double gmm_objective(const ThetaNonlinear& theta, const Dataset& data, const InstrumentSet& Z,
                            const Matrix& psi, const ShareModel& model, const EstimationSettings& settings = {}) {
  return gmm_evaluate(theta, data, Z, psi, model, settings).objective;
}

// ---------------------------------------------------------------------------

struct GmmConfig {
  EstimationSettings estimation;
  ThetaNonlinear center;
  int n_starts = 3;
  StartSampler sampler;
  std::vector<ThetaNonlinear> extra_starts;
  std::uint64_t seed = 0;
  OptimizerSettings optimizer;
  bool compute_standard_errors = true;
  double jacobian_rel_step = 1e-5;
  double infeasible_se = 1e3;
};

struct GmmStandardErrors {
  std::vector<std::string> names;  // alpha, sigma..., beta..., gamma...
  Vector values;
  std::vector<bool> infeasible;    // SE > threshold or not finite
  bool available = false;
  std::string diagnostic;
};

struct GmmResult {
  ThetaNonlinear theta_hat;
  LinearParams linear_hat;
  double objective = 0.0;       // step-2 gbar' Psi gbar at the estimate
  ThetaNonlinear theta_step1;
  double objective_step1 = 0.0;
  Matrix weight_step1;
  Matrix weight_step2;
  double condition_step1 = 0.0;
  double condition_step2 = 0.0;
  double ridge = 0.0;
  GmmStandardErrors standard_errors;
  std::vector<StartRecord> starts;  // step-1 starts followed by the step-2 run
  bool converged = false;
  EvaluationLog evaluation_log;
};

namespace detail {

struct GmmRun {
  Vector x;
  double f;
  bool converged;
};

}  // namespace detail

/// Sandwich covariance of (theta, beta, gamma):
/// (G'Psi G)^{-1} G'Psi S Psi G (G'Psi G)^{-1} / N, with G = d gbar / d(theta, kappa)
/// (theta part by central differences) and S the uncentered moment covariance.
inline GmmStandardErrors gmm_standard_errors(const ThetaNonlinear& theta, const LinearParams& lin,
                                             const Dataset& data, const InstrumentSet& Z, const Matrix& psi,
                                             const ShareModel& model, const EstimationSettings& settings,
                                             double rel_step, double infeasible_se) {
  const StackedData st(data);
  const double n = static_cast<double>(data.n_observations());
  const Index kt = theta.size(), kb = lin.beta.size(), kg = lin.gamma.size();
  GmmStandardErrors se;
  se.names = ParameterLayout{kt, kb, kg, false}.names();
  se.values = Vector::Constant(kt + kb + kg, std::numeric_limits<double>::quiet_NaN());
  se.infeasible.assign(static_cast<std::size_t>(kt + kb + kg), true);

  ThetaSolution center = solve_markets(theta, data, model, settings, nullptr, false);
  auto moments_at = [&](const ThetaNonlinear& th) {
    ThetaSolution sol = solve_markets(th, data, model, settings, &center, false);
    auto [y, z] = stacked_outcomes(sol, st, th.alpha, settings.supply_form);
    const auto sys = moment_system(y, z, st.X, st.W, Z);
    Vector kappa(kb + kg);
    kappa << lin.beta, lin.gamma;
    return std::pair<Vector, MomentSystem>{sys.m - sys.M * kappa, sys};
  };

  Matrix G;
  Matrix S;
  try {
    auto [g0, sys] = moments_at(theta);
    G.resize(g0.size(), kt + kb + kg);
    G.rightCols(kb + kg) = -sys.M;
    const Vector x = theta.pack();
    for (Index k = 0; k < kt; ++k) {
      const double h = fd_step(x[k], rel_step);
      Vector xp = x, xm = x;
      xp[k] += h;
      xm[k] -= h;
      // Central also at sigma = 0: the quadrature rule is symmetric, so the moments
      // are even in each sigma and defined on both sides.
      G.col(k) = (moments_at(ThetaNonlinear::unpack(xp)).first - moments_at(ThetaNonlinear::unpack(xm)).first) /
                 (2.0 * h);
    }
    auto [y, z] = stacked_outcomes(center, st, theta.alpha, settings.supply_form);
    const Matrix g = moment_contributions(y - st.X * lin.beta, z - st.W * lin.gamma, Z);
    S = g.transpose() * g / n;
  } catch (const Error& e) {
    se.diagnostic = std::string("moment evaluation failed: ") + e.what();
    return se;
  }
  const Matrix bread = G.transpose() * psi * G;
  Eigen::FullPivLU<Matrix> lu(bread);
  if (!lu.isInvertible()) {
    se.diagnostic = "G' Psi G is singular";
    return se;
  }
  const Matrix binv = lu.inverse();
  const Matrix cov = binv * (G.transpose() * psi * S * psi * G) * binv / n;
  for (Index k = 0; k < cov.rows(); ++k) {
    const double v = cov(k, k);
    se.values[k] = v >= 0.0 ? std::sqrt(v) : std::numeric_limits<double>::quiet_NaN();
    se.infeasible[static_cast<std::size_t>(k)] = !(se.values[k] <= infeasible_se);
  }
  se.available = true;
  return se;
}

/// Step 1 under the 2SLS weight from several starts, then step 2 under the robust
/// weight evaluated at the step-1 estimate, started from it.
inline GmmResult two_step_estimate(const Dataset& data, const InstrumentSet& Z, const ShareModel& model,
                                   const GmmConfig& config) {
  const double n_obs = static_cast<double>(data.n_observations());
  const Index k = config.center.size();
  const Bounds bounds = theta_bounds(k);
  GmmResult result;

  ThetaSolution warm;
  auto make_objective = [&](const Matrix& psi) -> Objective {
    return [&, psi](const Vector& v) {
      const ThetaNonlinear th = ThetaNonlinear::unpack(v);
      try {
        return gmm_evaluate(th, data, Z, psi, model, config.estimation, &warm).objective * n_obs;
      } catch (const Error& e) {
        ++result.evaluation_log.failures;
        result.evaluation_log.last_failure = e.what();
        warm = {};
        return 1e10;
      }
    };
  };
  auto run = [&](const Objective& f, const Vector& x0) {
    warm = {};
    const auto opt = minimize_box(f, x0, bounds, config.optimizer);
    result.starts.push_back({x0, opt.x, opt.f / n_obs, opt.converged, opt.evaluations, opt.message});
    return detail::GmmRun{opt.x, opt.f, opt.converged};
  };

  result.weight_step1 = two_sls_weight(Z);
  result.condition_step1 = condition_number(result.weight_step1);
  const Objective f1 = make_objective(result.weight_step1);
  std::vector<Vector> starts = config.sampler.draw(config.center.pack(), config.n_starts, config.seed, bounds);
  for (const auto& extra : config.extra_starts) starts.push_back(bounds.project(extra.pack()));
  if (starts.empty()) throw ConfigError("GMM needs at least one starting value");
  detail::GmmRun best{Vector(), std::numeric_limits<double>::infinity(), false};
  for (const auto& x0 : starts) {
    auto r = run(f1, x0);
    if (r.f < 1e10 && r.f < best.f) best = r;
  }
  if (best.x.size() == 0) {
    std::ostringstream msg;
    msg << "GMM step 1 failed from all " << starts.size() << " starts; last failure: "
        << result.evaluation_log.last_failure;
    throw NumericalError(msg.str());
  }
  result.theta_step1 = ThetaNonlinear::unpack(best.x);
  result.objective_step1 = best.f / n_obs;

  const auto ev1 = gmm_evaluate(result.theta_step1, data, Z, result.weight_step1, model, config.estimation);
  const RobustWeight rw = robust_weight(moment_contributions(ev1.xi, ev1.u, Z));
  result.weight_step2 = rw.psi;
  result.ridge = rw.ridge;
  result.condition_step2 = condition_number(rw.psi);

  const Objective f2 = make_objective(rw.psi);
  auto r2 = run(f2, best.x);
  if (!(r2.f < 1e10)) throw NumericalError("GMM step 2 failed: " + result.evaluation_log.last_failure);
  result.theta_hat = ThetaNonlinear::unpack(r2.x);
  result.converged = r2.converged;
  const auto ev2 = gmm_evaluate(result.theta_hat, data, Z, rw.psi, model, config.estimation);
  result.objective = ev2.objective;
  result.linear_hat = ev2.linear;
  if (config.compute_standard_errors)
    result.standard_errors = gmm_standard_errors(result.theta_hat, result.linear_hat, data, Z, rw.psi, model,
                                                 config.estimation, config.jacobian_rel_step, config.infeasible_se);
  return result;
}

}  // namespace blpmle
