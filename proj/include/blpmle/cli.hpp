#pragma once

// Command-line front end: simulate, estimate, montecarlo, decompose.
//
// Exit codes: 0 success, 1 usage/configuration, 2 data or I/O, 3 numerical failure.

#include "blpmle/io.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

namespace blpmle {

enum ExitCode : int { exit_ok = 0, exit_usage = 1, exit_data = 2, exit_numerical = 3 };

struct RunConfig {
  std::string command;
  std::string scenario = "no_cov";
  std::string data_path;
  std::string estimator = "mle";  // mle | gmm | both
  std::string instruments = "predicted_price";
  std::string random_coefficients = "x1,price";
  std::vector<double> center{-1.0, 3.0, 0.2};
  std::string supply_form = "scenario";  // scenario | linear | log_linear
  std::string ownership = "scenario";    // scenario | firms | identity
  bool log_cost_jacobian = false;
  int quadrature_level = 7;
  int n_markets = 20;
  double inversion_tol = 1e-13;
  int inversion_max_iters = 1000;
  double pricing_tol = 1e-13;
  double optimizer_gtol = 1e-5;
  int optimizer_max_iters = 200;
  double fd_step = 1e-6;
  double hessian_step = 1e-4;
  int n_starts = 3;
  int n_sims = 100;
  std::uint64_t seed = 1;
  std::string output_dir = ".";
  int threads = 1;
  bool standard_errors = true;
  double grid_min = 2.0;
  double grid_max = 4.0;
  int grid_points = 41;
  bool quiet = false;
};

inline json run_config_json(const RunConfig& c) {
  return {{"command", c.command},
          {"scenario", c.scenario},
          {"data", c.data_path},
          {"estimator", c.estimator},
          {"instruments", c.instruments},
          {"random_coefficients", c.random_coefficients},
          {"center", c.center},
          {"supply_form", c.supply_form},
          {"ownership", c.ownership},
          {"log_cost_jacobian", c.log_cost_jacobian},
          {"quadrature_level", c.quadrature_level},
          {"markets", c.n_markets},
          {"inversion_tol", c.inversion_tol},
          {"inversion_max_iters", c.inversion_max_iters},
          {"inversion_acceleration", "squarem_s3"},
          {"pricing_tol", c.pricing_tol},
          {"optimizer_gtol", c.optimizer_gtol},
          {"optimizer_max_iters", c.optimizer_max_iters},
          {"fd_step", c.fd_step},
          {"hessian_step", c.hessian_step},
          {"starts", c.n_starts},
          {"start_spread", 0.5},
          {"start_floor", 0.05},
          {"sims", c.n_sims},
          {"seed", c.seed},
          {"output", c.output_dir},
          {"threads", c.threads},
          {"standard_errors", c.standard_errors},
          {"grid_min", c.grid_min},
          {"grid_max", c.grid_max},
          {"grid_points", c.grid_points}};
}

inline void validate_run_config(const RunConfig& c) {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(c.inversion_tol, "inversion-tol");
  positive(c.pricing_tol, "pricing-tol");
  positive(c.optimizer_gtol, "gtol");
  positive(c.fd_step, "fd-step");
  positive(c.hessian_step, "hessian-step");
  if (c.quadrature_level < 1) throw ConfigError("quadrature-level must be at least 1");
  if (c.n_starts < 1) throw ConfigError("starts must be at least 1");
  if (c.n_sims < 0) throw ConfigError("sims must be nonnegative");
  if (c.threads < 1) throw ConfigError("threads must be at least 1");
  if (c.n_markets < 1) throw ConfigError("markets must be at least 1");
  if (c.estimator != "mle" && c.estimator != "gmm" && c.estimator != "both")
    throw ConfigError("estimator must be mle, gmm or both");
}

/// Scenario defaults with the run's overrides applied.
inline ScenarioConfig resolved_scenario(const RunConfig& c, const std::string& name, std::uint64_t seed) {
  ScenarioConfig s = scenario_config(name, seed);
  s.quadrature_level = c.quadrature_level;
  s.n_markets = c.n_markets;
  if (c.supply_form == "linear") s.estimation_supply_form = SupplyForm::linear;
  else if (c.supply_form == "log_linear") s.estimation_supply_form = SupplyForm::log_linear;
  else if (c.supply_form != "scenario") throw ConfigError("supply-form must be scenario, linear or log_linear");
  if (c.ownership == "firms") s.estimation_ownership = OwnershipMode::firms;
  else if (c.ownership == "identity") s.estimation_ownership = OwnershipMode::identity;
  else if (c.ownership != "scenario") throw ConfigError("ownership must be scenario, firms or identity");
  return s;
}

inline std::vector<std::string> resolved_scenario_names(const RunConfig& c) {
  if (c.scenario == "all") return scenario_names();
  scenario_config(c.scenario);  // validates the name
  return {c.scenario};
}

inline ShareModel share_model_from_spec(const std::string& spec, int level) {
  std::vector<RandomCoefficient> layout;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "price") {
      layout.push_back(RandomCoefficient::on_price());
    } else if (item.size() > 1 && item[0] == 'x') {
      try {
        layout.push_back(RandomCoefficient::on_characteristic(std::stol(item.substr(1))));
      } catch (const std::exception&) {
        throw ConfigError("bad random-coefficient entry '" + item + "'");
      }
    } else {
      throw ConfigError("bad random-coefficient entry '" + item + "' (use xK or price)");
    }
  }
  return make_share_model(layout, level);
}

inline OptimizerSettings optimizer_from(const RunConfig& c) {
  OptimizerSettings o;
  o.gtol = c.optimizer_gtol;
  o.max_iters = c.optimizer_max_iters;
  o.fd_rel_step = c.fd_step;
  return o;
}

inline InversionSettings inversion_from(const RunConfig& c) {
  InversionSettings s;
  s.tol = c.inversion_tol;
  s.max_iters = c.inversion_max_iters;
  return s;
}

inline std::filesystem::path output_path(const RunConfig& c, const std::string& file) {
  std::error_code ec;
  std::filesystem::create_directories(c.output_dir, ec);
  if (ec) throw DataError("cannot create output directory '" + c.output_dir + "': " + ec.message());
  return std::filesystem::path(c.output_dir) / file;
}

inline std::ofstream open_output(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  return out;
}

inline void log(const RunConfig& c, const std::string& msg) {
  if (!c.quiet) std::cerr << msg << '\n';
}

// ---------------------------------------------------------------------------

inline int cmd_simulate(const RunConfig& c) {
  const ScenarioConfig cfg = resolved_scenario(c, c.scenario, c.seed);
  PricingSettings ps;
  ps.tol = c.pricing_tol;
  const SyntheticDataset ds = draw_scenario(cfg, ps);
  const json prov = run_config_json(c);
  {
    auto path = output_path(c, "dataset.csv");
    auto out = open_output(path);
    write_dataset_csv(out, ds.data, prov);
    log(c, "wrote " + path.string());
  }
  {
    auto path = output_path(c, "dataset.json");
    auto out = open_output(path);
    out << dataset_metadata_json(ds, cfg, prov).dump(2) << '\n';
    log(c, "wrote " + path.string());
  }
  return exit_ok;
}

inline int cmd_estimate(const RunConfig& c) {
  if (c.data_path.empty()) throw ConfigError("estimate needs --data");
  const Dataset data = read_dataset_csv(c.data_path);
  const ShareModel model = share_model_from_spec(c.random_coefficients, c.quadrature_level);
  if (static_cast<Index>(c.center.size()) != 1 + model.k_rc())
    throw ConfigError("center needs alpha plus one sigma per random coefficient");
  ThetaNonlinear center;
  center.alpha = c.center[0];
  center.sigma = Eigen::Map<const Vector>(c.center.data() + 1, model.k_rc());

  EstimationSettings es;
  es.inversion = inversion_from(c);
  es.log_cost_jacobian = c.log_cost_jacobian;
  if (c.supply_form == "log_linear") es.supply_form = SupplyForm::log_linear;
  else if (c.supply_form != "linear" && c.supply_form != "scenario")
    throw ConfigError("supply-form must be linear or log_linear");
  if (c.ownership == "identity") es.ownership = OwnershipMode::identity;
  else if (c.ownership != "firms" && c.ownership != "scenario")
    throw ConfigError("ownership must be firms or identity");

  json results = json::array();
  if (c.estimator == "mle" || c.estimator == "both") {
    MleConfig mc;
    mc.estimation = es;
    mc.center = center;
    mc.n_starts = c.n_starts;
    mc.seed = derive_seed(c.seed, {fnv1a("mle")});
    mc.optimizer = optimizer_from(c);
    mc.compute_standard_errors = c.standard_errors;
    mc.hessian_rel_step = c.hessian_step;
    log(c, "estimating by maximum likelihood");
    results.push_back(mle_result_json(mle_estimate(data, model, mc)));
  }
  if (c.estimator == "gmm" || c.estimator == "both") {
    const InstrumentSet Z = build_instruments(data, model, instrument_kind_from_string(c.instruments));
    GmmConfig gc;
    gc.estimation = es;
    gc.center = center;
    gc.n_starts = c.n_starts;
    gc.seed = derive_seed(c.seed, {fnv1a("gmm")});
    gc.optimizer = optimizer_from(c);
    gc.compute_standard_errors = c.standard_errors;
    log(c, "estimating by two-step GMM");
    results.push_back(gmm_result_json(two_step_estimate(data, Z, model, gc), Z));
  }
  json doc = {{"provenance", provenance_json(run_config_json(c))},
              {"estimation", estimation_json(es)},
              {"optimizer", optimizer_json(optimizer_from(c))},
              {"n_markets", data.n_markets()},
              {"n_observations", data.n_observations()},
              {"results", results}};
  auto path = output_path(c, "result.json");
  auto out = open_output(path);
  out << doc.dump(2) << '\n';
  log(c, "wrote " + path.string());
  return exit_ok;
}

inline MonteCarloOptions montecarlo_options(const RunConfig& c) {
  MonteCarloOptions o;
  o.estimators.clear();
  if (c.estimator == "mle" || c.estimator == "both") o.estimators.push_back(Estimator::mle);
  if (c.estimator == "gmm" || c.estimator == "both") o.estimators.push_back(Estimator::gmm);
  o.n_starts = c.n_starts;
  o.instruments = instrument_kind_from_string(c.instruments);
  o.standard_errors = c.standard_errors;
  o.threads = c.threads;
  o.optimizer = optimizer_from(c);
  o.inversion = inversion_from(c);
  return o;
}

inline int cmd_montecarlo(const RunConfig& c) {
  MonteCarloOptions opt = montecarlo_options(c);
  const json prov = run_config_json(c);
  double worst_failure = 0.0;
  for (const auto& name : resolved_scenario_names(c)) {
    const ScenarioConfig cfg = resolved_scenario(c, name, 0);
    if (!c.quiet)
      opt.progress = [&](int done, int total) { std::cerr << name << ": " << done << "/" << total << "\r" << std::flush; };
    const SimulationReport rep = run_scenario(cfg, c.n_sims, c.seed, opt);
    if (!c.quiet && c.n_sims > 0) std::cerr << '\n';
    json p = prov;
    p["scenario"] = name;
    p["scenario_config"] = scenario_json(cfg);
    {
      auto out = open_output(output_path(c, name + "_replications.csv"));
      write_replications_csv(out, rep, p);
    }
    {
      auto out = open_output(output_path(c, name + "_aggregate.csv"));
      write_aggregate_csv(out, rep, p);
    }
    {
      auto out = open_output(output_path(c, name + "_elasticities.csv"));
      write_elasticities_csv(out, rep, p);
    }
    json summary = json::array();
    for (const auto& s : rep.summaries) {
      worst_failure = std::max(worst_failure, s.failure_rate);
      summary.push_back({{"estimator", to_string(s.estimator)},
                         {"attempted", s.attempted},
                         {"failed", s.failed},
                         {"failure_rate", s.failure_rate}});
    }
    json agg = json::array();
    for (const auto& a : rep.aggregates)
      agg.push_back({{"estimator", to_string(a.estimator)},
                     {"parameter", a.parameter},
                     {"mean_bias", a.mean_bias},
                     {"rmse", a.rmse},
                     {"mean_se", std::isfinite(a.mean_se) ? json(a.mean_se) : json(nullptr)},
                     {"coverage", std::isfinite(a.coverage) ? json(a.coverage) : json(nullptr)},
                     {"se_drop_rate", a.se_drop_rate}});
    auto out = open_output(output_path(c, name + "_summary.json"));
    out << json{{"provenance", provenance_json(p)}, {"estimators", summary}, {"aggregates", agg}}.dump(2) << '\n';
    log(c, name + ": wrote 4 files to " + c.output_dir);
  }
  if (worst_failure > 0.5) {
    std::cerr << "failure rate " << worst_failure << " exceeds 50%\n";
    return exit_numerical;
  }
  return exit_ok;
}

inline int cmd_decompose(const RunConfig& c) {
  if (c.grid_points < 1) throw ConfigError("grid-points must be at least 1");
  Dataset data;
  ShareModel model;
  ThetaNonlinear theta;
  EstimationSettings es;
  es.inversion = inversion_from(c);
  es.log_cost_jacobian = c.log_cost_jacobian;
  if (!c.data_path.empty()) {
    data = read_dataset_csv(c.data_path);
    model = share_model_from_spec(c.random_coefficients, c.quadrature_level);
    if (static_cast<Index>(c.center.size()) != 1 + model.k_rc())
      throw ConfigError("center needs alpha plus one sigma per random coefficient");
    theta.alpha = c.center[0];
    theta.sigma = Eigen::Map<const Vector>(c.center.data() + 1, model.k_rc());
  } else {
    const ScenarioConfig cfg = resolved_scenario(c, c.scenario, c.seed);
    PricingSettings ps;
    ps.tol = c.pricing_tol;
    data = draw_scenario(cfg, ps).data;
    model = scenario_share_model(cfg);
    theta = cfg.true_nonlinear;
    es.supply_form = cfg.estimation_supply_form;
    es.ownership = cfg.estimation_ownership;
  }
  std::vector<double> grid;
  for (int g = 0; g < c.grid_points; ++g)
    grid.push_back(c.grid_points == 1 ? c.grid_min
                                      : c.grid_min + (c.grid_max - c.grid_min) * g / (c.grid_points - 1));
  const auto rows =
      likelihood_decomposition_sweep(data, model, theta, grid, es, 0, instrument_kind_from_string(c.instruments));
  auto path = output_path(c, "sweep.csv");
  auto out = open_output(path);
  write_sweep_csv(out, rows, run_config_json(c));
  const auto ex = sweep_extrema(rows);
  log(c, "covariance term argmin " + format_number(ex.covariance_argmin) + ", likelihood argmax " +
             format_number(ex.loglik_argmax));
  log(c, "wrote " + path.string());
  return exit_ok;
}

inline int dispatch(const RunConfig& c) {
  validate_run_config(c);
  if (c.command == "simulate") return cmd_simulate(c);
  if (c.command == "estimate") return cmd_estimate(c);
  if (c.command == "montecarlo") return cmd_montecarlo(c);
  if (c.command == "decompose") return cmd_decompose(c);
  throw ConfigError("unknown command '" + c.command + "'");
}

/// Runs a command and maps errors onto exit codes.
inline int run_guarded(const RunConfig& c) {
  try {
    return dispatch(c);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_usage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return exit_data;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return exit_numerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_numerical;
  }
}

/// Parses argv (flags override a --config key=value file) and runs the command.
inline int run_cli(int argc, char** argv) {
  RunConfig c;
  CLI::App app{"Random-coefficients demand estimation by maximum likelihood and GMM", "blpmle"};
  app.set_config("--config", "", "flat key=value file; command-line flags win");
  app.add_option("command", c.command, "simulate | estimate | montecarlo | decompose")
      ->required()
      ->check(CLI::IsMember({"simulate", "estimate", "montecarlo", "decompose"}));
  app.add_option("--scenario", c.scenario, "scenario name, or 'all' for montecarlo")->capture_default_str();
  app.add_option("--data", c.data_path, "dataset CSV (estimate, decompose)");
  app.add_option("--estimator", c.estimator, "mle | gmm | both")->capture_default_str();
  app.add_option("--instruments", c.instruments, "predicted_price | differentiation_local | blp_sums")
      ->capture_default_str();
  app.add_option("--rc", c.random_coefficients, "random-coefficient layout, e.g. x1,price")->capture_default_str();
  app.add_option("--center", c.center, "start center: alpha sigma...")->delimiter(',')->capture_default_str();
  app.add_option("--supply-form", c.supply_form, "scenario | linear | log_linear")->capture_default_str();
  app.add_option("--ownership", c.ownership, "scenario | firms | identity")->capture_default_str();
  app.add_flag("--log-cost-jacobian", c.log_cost_jacobian, "add d log c / dc to the log-linear likelihood");
  app.add_option("--quadrature-level", c.quadrature_level, "Gauss-Hermite nodes per dimension")->capture_default_str();
  app.add_option("--markets", c.n_markets, "markets per synthetic dataset")->capture_default_str();
  app.add_option("--inversion-tol", c.inversion_tol)->capture_default_str();
  app.add_option("--inversion-max-iters", c.inversion_max_iters)->capture_default_str();
  app.add_option("--pricing-tol", c.pricing_tol)->capture_default_str();
  app.add_option("--gtol", c.optimizer_gtol, "projected-gradient tolerance")->capture_default_str();
  app.add_option("--max-iters", c.optimizer_max_iters, "optimizer iterations")->capture_default_str();
  app.add_option("--fd-step", c.fd_step, "relative finite-difference step for gradients")->capture_default_str();
  app.add_option("--hessian-step", c.hessian_step, "relative step for the Fisher Hessian")->capture_default_str();
  app.add_option("--starts", c.n_starts)->capture_default_str();
  app.add_option("--sims", c.n_sims)->capture_default_str();
  app.add_option("--seed", c.seed, "dataset seed (simulate, decompose) or master seed (montecarlo)")
      ->capture_default_str();
  app.add_option("--output", c.output_dir, "output directory")->capture_default_str();
  app.add_option("--threads", c.threads)->capture_default_str();
  bool no_se = false;
  app.add_flag("--no-se", no_se, "skip standard errors");
  app.add_option("--grid-min", c.grid_min)->capture_default_str();
  app.add_option("--grid-max", c.grid_max)->capture_default_str();
  app.add_option("--grid-points", c.grid_points)->capture_default_str();
  app.add_flag("--quiet", c.quiet);
  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_usage;
  }
  c.standard_errors = !no_se;
  return run_guarded(c);
}

}  // namespace blpmle
