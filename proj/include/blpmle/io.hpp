#pragma once

// Dataset CSV, JSON metadata/results and the Monte Carlo report tables.
//
// Every file written here starts with a provenance record: CSV files carry it as
// a single "# provenance: {...}" comment line, JSON files under "provenance".

#include "blpmle/montecarlo.hpp"

#include <json.hpp>

#include <fstream>
#include <map>
#include <sstream>

#ifndef BLPMLE_BUILD_ID
#define BLPMLE_BUILD_ID "unknown"
#endif

namespace blpmle {

using json = nlohmann::ordered_json;

inline std::string build_id() { return BLPMLE_BUILD_ID; }

/// Round-trip formatting for doubles.
inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline json vector_json(const Vector& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) {
    if (std::isfinite(v[i]))
      a.push_back(v[i]);
    else
      a.push_back(nullptr);
  }
  return a;
}

inline Vector json_vector(const json& a) {
  Vector v(static_cast<Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    v[static_cast<Index>(i)] = a[i].is_null() ? std::numeric_limits<double>::quiet_NaN() : a[i].get<double>();
  return v;
}

inline json theta_json(const ThetaNonlinear& t) { return {{"alpha", t.alpha}, {"sigma", vector_json(t.sigma)}}; }
inline json linear_json(const LinearParams& l) { return {{"beta", vector_json(l.beta)}, {"gamma", vector_json(l.gamma)}}; }
inline json cov_json(const CovMatrix& c) {
  return {{"sigma_xi_sq", c.sigma_xi_sq}, {"sigma_u_sq", c.sigma_u_sq}, {"sigma_xi_u", c.sigma_xi_u}};
}

inline const char* to_string(SupplyForm f) { return f == SupplyForm::linear ? "linear" : "log_linear"; }
inline const char* to_string(OwnershipMode m) { return m == OwnershipMode::firms ? "firms" : "identity"; }
inline const char* to_string(ErrorFamily f) { return f == ErrorFamily::normal ? "normal" : "laplace_copula"; }

inline json scenario_json(const ScenarioConfig& c) {
  return {{"name", c.name},
          {"n_markets", c.n_markets},
          {"firm_count_choices", c.firm_count_choices},
          {"products_per_firm_choices", c.products_per_firm_choices},
          {"error_family", to_string(c.error_family)},
          {"sigma_true", cov_json(c.sigma_true)},
          {"true_linear", linear_json(c.true_linear)},
          {"true_nonlinear", theta_json(c.true_nonlinear)},
          {"estimation_supply_form", to_string(c.estimation_supply_form)},
          {"estimation_ownership", to_string(c.estimation_ownership)},
          {"quadrature_level", c.quadrature_level},
          {"seed", c.seed}};
}

inline json estimation_json(const EstimationSettings& s) {
  return {{"supply_form", to_string(s.supply_form)},
          {"ownership", to_string(s.ownership)},
          {"log_cost_jacobian", s.log_cost_jacobian},
          {"inversion",
           {{"tol", s.inversion.tol},
            {"max_iters", s.inversion.max_iters},
            {"acceleration", s.inversion.acceleration == Acceleration::squarem ? "squarem_s3" : "plain"}}}};
}

inline json optimizer_json(const OptimizerSettings& o) {
  return {{"max_iters", o.max_iters}, {"gtol", o.gtol}, {"ftol", o.ftol}, {"fd_rel_step", o.fd_rel_step}};
}

inline json provenance_json(const json& config) {
  return {{"program", "blpmle"}, {"build", build_id()}, {"config", config}};
}

inline void write_provenance_line(std::ostream& os, const json& config) {
  os << "# provenance: " << provenance_json(config).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Dataset CSV

inline void write_dataset_csv(std::ostream& os, const Dataset& d, const json& config = json::object()) {
  if (d.markets.empty()) throw DataError("cannot write an empty dataset");
  const Index kd = d.markets.front().demand_chars.cols(), ks = d.markets.front().cost_chars.cols();
  write_provenance_line(os, config);
  os << "market_id,firm_id,shares,prices";
  for (Index k = 0; k < kd; ++k) os << ",x" << k;
  for (Index k = 0; k < ks; ++k) os << ",w" << k;
  os << '\n';
  for (const auto& m : d.markets)
    for (Index j = 0; j < m.n_products(); ++j) {
      os << m.market_id << ',' << m.firm_ids[static_cast<std::size_t>(j)] << ',' << fmt(m.shares[j]) << ','
         << fmt(m.prices[j]);
      for (Index k = 0; k < kd; ++k) os << ',' << fmt(m.demand_chars(j, k));
      for (Index k = 0; k < ks; ++k) os << ',' << fmt(m.cost_chars(j, k));
      os << '\n';
    }
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  }
  return out;
}

inline double parse_double(const std::string& s, std::size_t row, const std::string& column) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("row " + std::to_string(row) + ", column '" + column + "': cannot parse '" + s + "' as a number");
  }
}

inline std::int64_t parse_int(const std::string& s, std::size_t row, const std::string& column) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("row " + std::to_string(row) + ", column '" + column + "': cannot parse '" + s +
                    "' as an integer");
  }
}

}  // namespace detail

/// Reads the dataset CSV. Lines starting with '#' are skipped; row numbers in
/// errors count physical lines from 1. Markets are ordered by id, products keep
/// their file order.
inline Dataset read_dataset_csv(std::istream& is) {
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    header = detail::split_csv_line(line);
    break;
  }
  if (header.empty()) throw DataError("dataset has no header row");

  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* req : {"market_id", "firm_id", "shares", "prices"})
    if (!col.count(req)) throw DataError(std::string("missing required column '") + req + "'");
  std::vector<std::size_t> xcols, wcols;
  for (std::size_t k = 0; col.count("x" + std::to_string(k)); ++k) xcols.push_back(col["x" + std::to_string(k)]);
  for (std::size_t k = 0; col.count("w" + std::to_string(k)); ++k) wcols.push_back(col["w" + std::to_string(k)]);
  if (xcols.empty()) throw DataError("missing required column 'x0'");
  if (wcols.empty()) throw DataError("missing required column 'w0'");

  struct Rows {
    std::vector<std::int64_t> firms;
    std::vector<double> s, p;
    std::vector<std::vector<double>> x, w;
    std::size_t first_row = 0;
  };
  std::map<std::int64_t, Rows> markets;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != header.size())
      throw DataError("row " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                      " fields, found " + std::to_string(f.size()));
    const auto id = detail::parse_int(f[col["market_id"]], lineno, "market_id");
    auto& r = markets[id];
    if (r.firms.empty()) r.first_row = lineno;
    r.firms.push_back(detail::parse_int(f[col["firm_id"]], lineno, "firm_id"));
    r.s.push_back(detail::parse_double(f[col["shares"]], lineno, "shares"));
    r.p.push_back(detail::parse_double(f[col["prices"]], lineno, "prices"));
    std::vector<double> x, w;
    for (std::size_t k = 0; k < xcols.size(); ++k)
      x.push_back(detail::parse_double(f[xcols[k]], lineno, "x" + std::to_string(k)));
    for (std::size_t k = 0; k < wcols.size(); ++k)
      w.push_back(detail::parse_double(f[wcols[k]], lineno, "w" + std::to_string(k)));
    r.x.push_back(std::move(x));
    r.w.push_back(std::move(w));
  }
  if (markets.empty()) throw DataError("dataset has no data rows");

  Dataset d;
  for (auto& [id, r] : markets) {
    const auto n = static_cast<Index>(r.s.size());
    Matrix X(n, static_cast<Index>(xcols.size())), W(n, static_cast<Index>(wcols.size()));
    for (Index j = 0; j < n; ++j) {
      for (Index k = 0; k < X.cols(); ++k) X(j, k) = r.x[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)];
      for (Index k = 0; k < W.cols(); ++k) W(j, k) = r.w[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)];
    }
    try {
      d.markets.push_back(make_market(id, X, W, Eigen::Map<Vector>(r.p.data(), n),
                                      Eigen::Map<Vector>(r.s.data(), n), r.firms));
    } catch (const DataError& e) {
      throw DataError(std::string(e.what()) + " (market starts at row " + std::to_string(r.first_row) + ")");
    }
  }
  return d;
}

inline Dataset read_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  try {
    return read_dataset_csv(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

/// Sidecar metadata for a synthetic dataset.
inline json dataset_metadata_json(const SyntheticDataset& ds, const ScenarioConfig& cfg, const json& config) {
  json costs = json::array(), xi = json::array(), u = json::array();
  for (std::size_t t = 0; t < ds.true_costs.size(); ++t) {
    costs.push_back(vector_json(ds.true_costs[t]));
    xi.push_back(vector_json(ds.true_xi[t]));
    u.push_back(vector_json(ds.true_u[t]));
  }
  return {{"provenance", provenance_json(config)},
          {"scenario", scenario_json(cfg)},
          {"seed", ds.seed},
          {"true_theta", theta_json(ds.true_theta)},
          {"true_linear", linear_json(ds.true_linear)},
          {"true_cov", cov_json(ds.true_cov)},
          {"n_markets", ds.data.n_markets()},
          {"n_observations", ds.data.n_observations()},
          {"true_costs", costs},
          {"true_xi", xi},
          {"true_u", u}};
}

// ---------------------------------------------------------------------------
// Results

inline json starts_json(const std::vector<StartRecord>& starts) {
  json a = json::array();
  for (const auto& s : starts)
    a.push_back({{"initial", vector_json(s.initial)},
                 {"final", vector_json(s.final_point)},
                 {"objective", s.objective},
                 {"converged", s.converged},
                 {"evaluations", s.evaluations},
                 {"message", s.message}});
  return a;
}

inline json mle_result_json(const MleResult& r) {
  json se = json::object();
  for (std::size_t k = 0; k < r.standard_errors.names.size(); ++k) {
    const double v = r.standard_errors.values[static_cast<Index>(k)];
    se[r.standard_errors.names[k]] = std::isfinite(v) ? json(v) : json(nullptr);
  }
  return {{"estimator", "mle"},
          {"theta", theta_json(r.theta_hat)},
          {"linear", linear_json(r.linear_hat)},
          {"sigma", cov_json(r.sigma_hat)},
          {"loglik", r.loglik},
          {"covariance_term", r.covariance_term},
          {"jacobian_term", r.jacobian_term},
          {"standard_errors", se},
          {"standard_errors_available", r.standard_errors.available},
          {"information_min_eigenvalue",
           std::isfinite(r.standard_errors.min_eigenvalue) ? json(r.standard_errors.min_eigenvalue) : json(nullptr)},
          {"standard_error_diagnostic", r.standard_errors.diagnostic},
          {"converged", r.converged},
          {"evaluation_failures", r.evaluation_log.failures},
          {"last_evaluation_failure", r.evaluation_log.last_failure},
          {"starts", starts_json(r.starts)}};
}

inline json gmm_result_json(const GmmResult& r, const InstrumentSet& Z) {
  json se = json::object(), flags = json::object();
  for (std::size_t k = 0; k < r.standard_errors.names.size(); ++k) {
    const double v = r.standard_errors.values[static_cast<Index>(k)];
    se[r.standard_errors.names[k]] = std::isfinite(v) ? json(v) : json(nullptr);
    flags[r.standard_errors.names[k]] = static_cast<bool>(r.standard_errors.infeasible[k]);
  }
  return {{"estimator", "gmm"},
          {"theta", theta_json(r.theta_hat)},
          {"linear", linear_json(r.linear_hat)},
          {"objective", r.objective},
          {"theta_step1", theta_json(r.theta_step1)},
          {"objective_step1", r.objective_step1},
          {"weight_condition_step1", r.condition_step1},
          {"weight_condition_step2", r.condition_step2},
          {"weight_ridge", r.ridge},
          {"standard_errors", se},
          {"standard_errors_infeasible", flags},
          {"standard_error_diagnostic", r.standard_errors.diagnostic},
          {"instruments",
           {{"kind", to_string(Z.kind)}, {"columns", Z.names}, {"dropped", Z.dropped}, {"bandwidths", Z.bandwidths}}},
          {"converged", r.converged},
          {"evaluation_failures", r.evaluation_log.failures},
          {"starts", starts_json(r.starts)}};
}

// ---------------------------------------------------------------------------
// Monte Carlo tables

inline void write_replications_csv(std::ostream& os, const SimulationReport& r, const json& config) {
  write_provenance_line(os, config);
  os << "scenario,replication,seed,estimator,ok,converged,objective";
  for (const auto& n : r.parameter_names) os << ',' << n;
  for (const auto& n : r.parameter_names) os << ",se_" << n;
  for (const auto& n : r.parameter_names) os << ",flag_" << n;
  os << ",seconds,error\n";
  for (const auto& rec : r.records) {
    os << r.config.name << ',' << rec.index << ',' << rec.seed << ',' << to_string(rec.estimator) << ','
       << (rec.ok ? 1 : 0) << ',' << (rec.converged ? 1 : 0) << ',' << fmt(rec.objective);
    for (Index k = 0; k < rec.theta_hat.size(); ++k) os << ',' << fmt(rec.theta_hat[k]);
    for (Index k = 0; k < rec.se.size(); ++k) os << ',' << fmt(rec.se[k]);
    for (bool f : rec.se_flagged) os << ',' << (f ? 1 : 0);
    std::string err = rec.error;
    for (auto& ch : err)
      if (ch == ',' || ch == '\n' || ch == '"') ch = ';';
    os << ',' << fmt(rec.seconds) << ',' << err << '\n';
  }
}

inline void write_aggregate_csv(std::ostream& os, const SimulationReport& r, const json& config) {
  write_provenance_line(os, config);
  os << "scenario,estimator,parameter,truth,n,mean_bias,rmse,variance,mean_se,coverage,n_se,se_drop_rate,"
        "coverage_all,failure_rate\n";
  for (const auto& a : r.aggregates) {
    double failure = 0.0;
    for (const auto& s : r.summaries)
      if (s.estimator == a.estimator) failure = s.failure_rate;
    os << r.config.name << ',' << to_string(a.estimator) << ',' << a.parameter << ',' << fmt(a.truth) << ',' << a.n
       << ',' << fmt(a.mean_bias) << ',' << fmt(a.rmse) << ',' << fmt(a.variance) << ',' << fmt(a.mean_se) << ','
       << fmt(a.coverage) << ',' << a.n_se << ',' << fmt(a.se_drop_rate) << ',' << fmt(a.coverage_all) << ','
       << fmt(failure) << '\n';
  }
}

/// Per-replication elasticity errors (histogram input) plus summary rows.
inline void write_elasticities_csv(std::ostream& os, const SimulationReport& r, const json& config) {
  write_provenance_line(os, config);
  os << "scenario,replication,estimator,mean_bias,mean_abs_bias,products\n";
  for (const auto& rec : r.records) {
    if (!rec.ok || rec.elasticity.products == 0) continue;
    os << r.config.name << ',' << rec.index << ',' << to_string(rec.estimator) << ','
       << fmt(rec.elasticity.mean_bias) << ',' << fmt(rec.elasticity.mean_abs_bias) << ','
       << rec.elasticity.products << '\n';
  }
  for (const auto& s : r.summaries)
    os << r.config.name << ",average," << to_string(s.estimator) << ',' << fmt(s.elasticity_mean_bias) << ','
       << fmt(s.elasticity_mean_abs_bias) << ",\n";
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows, const json& config) {
  write_provenance_line(os, config);
  os << "sigma,covariance_term,jacobian_term,loglik,gmm_objective,ok,error\n";
  for (const auto& row : rows) {
    std::string err = row.error;
    for (auto& ch : err)
      if (ch == ',' || ch == '\n') ch = ';';
    os << fmt(row.value) << ',' << fmt(row.covariance_term) << ',' << fmt(row.jacobian_term) << ','
       << fmt(row.loglik) << ',' << fmt(row.gmm_objective) << ',' << (row.ok ? 1 : 0) << ',' << err << '\n';
  }
}

}  // namespace blpmle
