#pragma once

// Monte Carlo harness: replications per scenario for MLE and GMM, aggregate
// metrics (bias, RMSE, mean SE, coverage), own-price elasticities and the
// likelihood decomposition sweep.

#include "blpmle/gmm.hpp"

#include <atomic>
#include <chrono>
#include <functional>
#include <mutex>
#include <ostream>
#include <thread>

namespace blpmle {

enum class Estimator { mle, gmm };

inline const char* to_string(Estimator e) { return e == Estimator::mle ? "mle" : "gmm"; }

inline Estimator estimator_from_string(const std::string& s) {
  if (s == "mle") return Estimator::mle;
  if (s == "gmm") return Estimator::gmm;
  throw ConfigError("unknown estimator '" + s + "'");
}

// ---------------------------------------------------------------------------
// Elasticities

/// e_jj = (ds_j/dp_j) p_j / s_j at mean utilities `delta` and observed prices.
inline Vector own_price_elasticities(const MarketData& market, const ThetaNonlinear& theta, const Vector& delta,
                                     const ShareModel& model) {
  const auto ns = node_shares(delta, market, theta, model);
  const Vector s = aggregate_shares(ns);
  if (!(s.array() > 0.0).all())
    throw NumericalError("market " + std::to_string(market.market_id) + ": zero model share in elasticity");
  const Matrix jsp = share_first_derivatives(ns).J_sp;
  return jsp.diagonal().cwiseProduct(market.prices).cwiseQuotient(s);
}

/// Same, with delta = X beta + alpha p + xi.
inline Vector own_price_elasticities(const MarketData& market, const ThetaNonlinear& theta, const Vector& beta,
                                     const Vector& xi, const ShareModel& model) {
  return own_price_elasticities(market, theta, market.demand_chars * beta + theta.alpha * market.prices + xi, model);
}

struct ElasticityBias {
  double mean_bias = 0.0;
  double mean_abs_bias = 0.0;
  Index products = 0;
};

/// Product-level elasticity errors at theta_hat relative to theta_true, both at the
/// mean utilities that rationalize the observed shares.
inline ElasticityBias elasticity_bias(const Dataset& data, const ThetaNonlinear& theta_hat,
                                      const ThetaNonlinear& theta_true, const ShareModel& model,
                                      const InversionSettings& inversion = {}) {
  ElasticityBias out;
  for (const auto& m : data.markets) {
    const Vector e_hat = own_price_elasticities(m, theta_hat, invert_shares(m, theta_hat, model, inversion), model);
    const Vector e_true = own_price_elasticities(m, theta_true, invert_shares(m, theta_true, model, inversion), model);
    const Vector d = e_hat - e_true;
    out.mean_bias += d.sum();
    out.mean_abs_bias += d.cwiseAbs().sum();
    out.products += m.n_products();
  }
  if (out.products > 0) {
    out.mean_bias /= static_cast<double>(out.products);
    out.mean_abs_bias /= static_cast<double>(out.products);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Replications

struct MonteCarloOptions {
  std::vector<Estimator> estimators{Estimator::mle, Estimator::gmm};
  int n_starts = 3;
  StartSampler sampler;
  InstrumentKind instruments = InstrumentKind::predicted_price;
  bool standard_errors = true;
  bool elasticities = true;
  int threads = 1;
  OptimizerSettings optimizer;
  InversionSettings inversion;
  double infeasible_se = 1e3;
  std::function<void(int done, int total)> progress;
};

struct ReplicationRecord {
  int index = 0;
  std::uint64_t seed = 0;
  Estimator estimator = Estimator::mle;
  bool ok = false;
  std::string error;
  Vector theta_hat;  // alpha, sigma...
  Vector se;         // same layout, NaN when unavailable
  std::vector<bool> se_flagged;
  bool converged = false;
  double objective = 0.0;  // log-likelihood (MLE) or gbar' Psi gbar (GMM)
  ElasticityBias elasticity;
  double seconds = 0.0;
};

struct ParameterAggregate {
  Estimator estimator = Estimator::mle;
  std::string parameter;
  double truth = 0.0;
  int n = 0;                 // successful replications
  double mean_bias = 0.0;
  double rmse = 0.0;
  double variance = 0.0;     // population variance of the estimates
  int n_se = 0;              // replications with a usable SE
  double mean_se = std::numeric_limits<double>::quiet_NaN();
  double coverage = std::numeric_limits<double>::quiet_NaN();
  double se_drop_rate = 0.0;
  double coverage_all = std::numeric_limits<double>::quiet_NaN();  // flagged rows count as misses
};

struct EstimatorSummary {
  Estimator estimator = Estimator::mle;
  int attempted = 0;
  int failed = 0;
  double failure_rate = 0.0;
  double elasticity_mean_bias = std::numeric_limits<double>::quiet_NaN();
  double elasticity_mean_abs_bias = std::numeric_limits<double>::quiet_NaN();
};

struct SimulationReport {
  ScenarioConfig config;
  int n_sims = 0;
  std::uint64_t master_seed = 0;
  MonteCarloOptions options;
  std::vector<std::string> parameter_names;
  std::vector<ReplicationRecord> records;  // replication-major, estimators in option order
  std::vector<ParameterAggregate> aggregates;
  std::vector<EstimatorSummary> summaries;
};

inline std::vector<std::string> theta_names(const ShareModel& model) {
  std::vector<std::string> names{"alpha"};
  for (const auto& rc : model.random_coefficients)
    names.push_back(rc.kind == RandomCoefficient::Kind::price ? "sigma_price"
                                                              : "sigma_x" + std::to_string(rc.column));
  return names;
}

/// Recomputes aggregates from records. Sums run in replication order.
inline void aggregate_report(SimulationReport& report) {
  report.aggregates.clear();
  report.summaries.clear();
  const Vector truth = report.config.true_nonlinear.pack();
  for (Estimator est : report.options.estimators) {
    EstimatorSummary sum;
    sum.estimator = est;
    double eb = 0.0, eab = 0.0;
    int ne = 0;
    for (const auto& r : report.records) {
      if (r.estimator != est) continue;
      ++sum.attempted;
      if (!r.ok) {
        ++sum.failed;
        continue;
      }
      if (r.elasticity.products > 0) {
        eb += r.elasticity.mean_bias;
        eab += r.elasticity.mean_abs_bias;
        ++ne;
      }
    }
    sum.failure_rate = sum.attempted ? static_cast<double>(sum.failed) / sum.attempted : 0.0;
    if (ne > 0) {
      sum.elasticity_mean_bias = eb / ne;
      sum.elasticity_mean_abs_bias = eab / ne;
    }
    report.summaries.push_back(sum);

    for (Index k = 0; k < truth.size(); ++k) {
      ParameterAggregate a;
      a.estimator = est;
      a.parameter = report.parameter_names[static_cast<std::size_t>(k)];
      a.truth = truth[k];
      double bias = 0.0, sq = 0.0, se_sum = 0.0;
      int covered = 0;
      for (const auto& r : report.records) {
        if (r.estimator != est || !r.ok) continue;
        const double e = r.theta_hat[k] - truth[k];
        ++a.n;
        bias += e;
        sq += e * e;
        if (!r.se_flagged[static_cast<std::size_t>(k)]) {
          ++a.n_se;
          se_sum += r.se[k];
          covered += std::abs(e) <= 1.96 * r.se[k];
        }
      }
      if (a.n > 0) {
        a.mean_bias = bias / a.n;
        a.rmse = std::sqrt(sq / a.n);
        a.variance = sq / a.n - a.mean_bias * a.mean_bias;
        a.se_drop_rate = 1.0 - static_cast<double>(a.n_se) / a.n;
        a.coverage_all = static_cast<double>(covered) / a.n;
      }
      if (a.n_se > 0) {
        a.mean_se = se_sum / a.n_se;
        a.coverage = static_cast<double>(covered) / a.n_se;
      }
      report.aggregates.push_back(a);
    }
  }
}

inline const ParameterAggregate* find_aggregate(const SimulationReport& r, Estimator est, const std::string& param) {
  for (const auto& a : r.aggregates)
    if (a.estimator == est && a.parameter == param) return &a;
  return nullptr;
}

/// One replication: draw, then estimate with every requested estimator from
/// starts drawn around the truth.
inline std::vector<ReplicationRecord> run_replication(const ScenarioConfig& base, int index,
                                                      std::uint64_t master_seed, const MonteCarloOptions& opt) {
  ScenarioConfig cfg = base;
  cfg.seed = replication_seed(master_seed, base.name, static_cast<std::uint64_t>(index));
  const ShareModel model = scenario_share_model(cfg);
  const Index k = cfg.true_nonlinear.size();
  std::vector<ReplicationRecord> out;
  for (Estimator est : opt.estimators) {
    ReplicationRecord r;
    r.index = index;
    r.seed = cfg.seed;
    r.estimator = est;
    r.theta_hat = Vector::Constant(k, std::numeric_limits<double>::quiet_NaN());
    r.se = r.theta_hat;
    r.se_flagged.assign(static_cast<std::size_t>(k), true);
    out.push_back(r);
  }

  SyntheticDataset ds;
  try {
    ds = draw_scenario(cfg);
  } catch (const Error& e) {
    for (auto& r : out) r.error = std::string("data generation: ") + e.what();
    return out;
  }

  EstimationSettings es;
  es.supply_form = cfg.estimation_supply_form;
  es.ownership = cfg.estimation_ownership;
  es.inversion = opt.inversion;

  for (auto& r : out) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      if (r.estimator == Estimator::mle) {
        MleConfig mc;
        mc.estimation = es;
        mc.center = cfg.true_nonlinear;
        mc.n_starts = opt.n_starts;
        mc.sampler = opt.sampler;
        mc.seed = derive_seed(cfg.seed, {fnv1a("mle")});
        mc.optimizer = opt.optimizer;
        mc.compute_standard_errors = opt.standard_errors;
        const auto res = mle_estimate(ds.data, model, mc);
        r.theta_hat = res.theta_hat.pack();
        r.converged = res.converged;
        r.objective = res.loglik;
        if (opt.standard_errors && res.standard_errors.available) {
          r.se = res.standard_errors.values.head(k);
          for (Index j = 0; j < k; ++j) r.se_flagged[static_cast<std::size_t>(j)] = !(r.se[j] <= opt.infeasible_se);
        }
      } else {
        const InstrumentSet Z = build_instruments(ds.data, model, opt.instruments);
        GmmConfig gc;
        gc.estimation = es;
        gc.center = cfg.true_nonlinear;
        gc.n_starts = opt.n_starts;
        gc.sampler = opt.sampler;
        gc.seed = derive_seed(cfg.seed, {fnv1a("gmm")});
        gc.optimizer = opt.optimizer;
        gc.compute_standard_errors = opt.standard_errors;
        gc.infeasible_se = opt.infeasible_se;
        const auto res = two_step_estimate(ds.data, Z, model, gc);
        r.theta_hat = res.theta_hat.pack();
        r.converged = res.converged;
        r.objective = res.objective;
        if (opt.standard_errors && res.standard_errors.available) {
          r.se = res.standard_errors.values.head(k);
          for (Index j = 0; j < k; ++j)
            r.se_flagged[static_cast<std::size_t>(j)] = res.standard_errors.infeasible[static_cast<std::size_t>(j)];
        }
      }
      r.ok = true;
      if (opt.elasticities) {
        try {
          r.elasticity = elasticity_bias(ds.data, ThetaNonlinear::unpack(r.theta_hat), cfg.true_nonlinear, model,
                                         opt.inversion);
        } catch (const Error&) {
          r.elasticity = {};
        }
      }
    } catch (const Error& e) {
      r.ok = false;
      r.error = e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return out;
}

/// Runs n_sims replications (replication i uses replication_seed(master, name, i)).
/// Worker threads fill fixed slots, so the report does not depend on scheduling.
inline SimulationReport run_scenario(const ScenarioConfig& config, int n_sims, std::uint64_t master_seed,
                                     const MonteCarloOptions& options = {}) {
  if (n_sims < 0) throw ConfigError("number of simulations must be nonnegative");
  if (options.estimators.empty()) throw ConfigError("no estimator requested");
  SimulationReport report;
  report.config = config;
  report.n_sims = n_sims;
  report.master_seed = master_seed;
  report.options = options;
  report.parameter_names = theta_names(scenario_share_model(config));

  std::vector<std::vector<ReplicationRecord>> slots(static_cast<std::size_t>(n_sims));
  std::atomic<int> next{0};
  std::atomic<int> done{0};
  std::mutex progress_mutex;
  auto worker = [&] {
    for (int i = next++; i < n_sims; i = next++) {
      slots[static_cast<std::size_t>(i)] = run_replication(config, i, master_seed, options);
      const int d = ++done;
      if (options.progress) {
        std::lock_guard<std::mutex> lock(progress_mutex);
        options.progress(d, n_sims);
      }
    }
  };
  const int threads = std::max(1, std::min(options.threads, std::max(n_sims, 1)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& s : slots)
    for (auto& r : s) report.records.push_back(std::move(r));
  aggregate_report(report);
  return report;
}

// ---------------------------------------------------------------------------
// Likelihood decomposition

struct SweepRow {
  double value = 0.0;
  bool ok = false;
  double covariance_term = std::numeric_limits<double>::quiet_NaN();  // (N/2) log|Sigma*|
  double jacobian_term = std::numeric_limits<double>::quiet_NaN();    // sum_t log|det J_t|
  double loglik = std::numeric_limits<double>::quiet_NaN();
  double gmm_objective = std::numeric_limits<double>::quiet_NaN();    // 2SLS-weighted
  std::string error;
};

/// Evaluates both likelihood parts, the total and the first-step GMM objective
/// while sigma[sigma_index] moves over `grid` and the rest of theta stays at `theta`.
inline std::vector<SweepRow> likelihood_decomposition_sweep(const Dataset& data, const ShareModel& model,
                                                            const ThetaNonlinear& theta,
                                                            const std::vector<double>& grid,
                                                            const EstimationSettings& settings = {},
                                                            Index sigma_index = 0,
                                                            InstrumentKind instruments = InstrumentKind::predicted_price) {
  if (sigma_index < 0 || sigma_index >= theta.sigma.size()) throw ConfigError("sweep index out of range");
  const InstrumentSet Z = build_instruments(data, model, instruments);
  const Matrix psi = two_sls_weight(Z);
  std::vector<SweepRow> rows;
  for (double v : grid) {
    SweepRow row;
    row.value = v;
    ThetaNonlinear th = theta;
    th.sigma[sigma_index] = v;
    try {
      const auto lv = concentrated_likelihood(th, data, model, settings);
      row.covariance_term = lv.covariance_term;
      row.jacobian_term = lv.jacobian_term;
      row.loglik = lv.loglik;
      row.gmm_objective = gmm_objective(th, data, Z, psi, model, settings);
      row.ok = true;
    } catch (const Error& e) {
      row.error = e.what();
    }
    rows.push_back(row);
  }
  return rows;
}

struct SweepExtrema {
  double covariance_argmin = std::numeric_limits<double>::quiet_NaN();
  double loglik_argmax = std::numeric_limits<double>::quiet_NaN();
};

inline SweepExtrema sweep_extrema(const std::vector<SweepRow>& rows) {
  SweepExtrema e;
  double best_cov = std::numeric_limits<double>::infinity(), best_ll = -std::numeric_limits<double>::infinity();
  for (const auto& r : rows) {
    if (!r.ok) continue;
    if (r.covariance_term < best_cov) best_cov = r.covariance_term, e.covariance_argmin = r.value;
    if (r.loglik > best_ll) best_ll = r.loglik, e.loglik_argmax = r.value;
  }
  return e;
}

}  // namespace blpmle
