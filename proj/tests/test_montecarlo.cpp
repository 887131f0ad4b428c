#include "helpers.hpp"

#include <algorithm>

using namespace blpmle;
using namespace blpmle::testing;

namespace {

MonteCarloOptions quick_options() {
  MonteCarloOptions o;
  o.n_starts = 1;
  return o;
}

// A report with hand-made records, so aggregation can be checked without estimating.
SimulationReport synthetic_report(int n, std::uint64_t seed) {
  SimulationReport r;
  r.config = scenario_config("no_cov", 1);
  r.options.estimators = {Estimator::mle};
  r.parameter_names = theta_names(scenario_share_model(r.config));
  r.n_sims = n;
  Engine eng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  const Vector truth = r.config.true_nonlinear.pack();
  for (int i = 0; i < n; ++i) {
    ReplicationRecord rec;
    rec.index = i;
    rec.ok = (i % 7 != 3);
    rec.theta_hat = truth + 0.3 * Vector::NullaryExpr(truth.size(), [&](Index) { return z(eng); });
    rec.se = Vector::Constant(truth.size(), 0.3);
    rec.se_flagged.assign(static_cast<std::size_t>(truth.size()), false);
    rec.se_flagged[1] = (i % 5 == 0);
    rec.elasticity.products = 10;
    rec.elasticity.mean_bias = z(eng);
    rec.elasticity.mean_abs_bias = std::abs(rec.elasticity.mean_bias);
    r.records.push_back(rec);
  }
  aggregate_report(r);
  return r;
}

}  // namespace

TEST(RunScenario, ZeroSimulationsGiveEmptyReport) {
  const auto report = run_scenario(small_scenario("no_cov", 1, 2), 0, 5, quick_options());
  EXPECT_EQ(report.n_sims, 0);
  EXPECT_TRUE(report.records.empty());
  ASSERT_EQ(report.summaries.size(), 2u);
  for (const auto& s : report.summaries) {
    EXPECT_EQ(s.attempted, 0);
    EXPECT_EQ(s.failure_rate, 0.0);
  }
  for (const auto& a : report.aggregates) EXPECT_EQ(a.n, 0);
}

TEST(RunScenario, RejectsBadRequests) {
  EXPECT_THROW(run_scenario(small_scenario("no_cov", 1, 2), -1, 5), ConfigError);
  MonteCarloOptions none;
  none.estimators.clear();
  EXPECT_THROW(run_scenario(small_scenario("no_cov", 1, 2), 1, 5, none), ConfigError);
  EXPECT_THROW(estimator_from_string("ols"), ConfigError);
  EXPECT_EQ(estimator_from_string("gmm"), Estimator::gmm);
}

TEST(Aggregate, RmseDecomposesIntoBiasAndVariance) {
  const auto r = synthetic_report(50, 3);
  ASSERT_EQ(r.aggregates.size(), 3u);
  for (const auto& a : r.aggregates) {
    ASSERT_GT(a.n, 0);
    EXPECT_NEAR(a.rmse * a.rmse, a.mean_bias * a.mean_bias + a.variance, 1e-10) << a.parameter;
  }
}

TEST(Aggregate, CountsFailuresAndFlaggedStandardErrors) {
  const auto r = synthetic_report(50, 4);
  ASSERT_EQ(r.summaries.size(), 1u);
  EXPECT_EQ(r.summaries[0].attempted, 50);
  EXPECT_EQ(r.summaries[0].failed, 7);
  EXPECT_NEAR(r.summaries[0].failure_rate, 7.0 / 50.0, 1e-15);
  const auto* a = find_aggregate(r, Estimator::mle, r.parameter_names[1]);
  ASSERT_NE(a, nullptr);
  EXPECT_EQ(a->n, 43);
  int flagged = 0;
  for (const auto& rec : r.records) flagged += rec.ok && rec.se_flagged[1];
  EXPECT_EQ(a->n_se, 43 - flagged);
  EXPECT_NEAR(a->se_drop_rate, static_cast<double>(flagged) / 43.0, 1e-15);
  EXPECT_LE(a->coverage_all, a->coverage);
  EXPECT_EQ(find_aggregate(r, Estimator::gmm, "alpha"), nullptr);
}

TEST(Aggregate, InvariantToRecordOrder) {
  auto r = synthetic_report(40, 5);
  const auto before = r.aggregates;
  std::reverse(r.records.begin(), r.records.end());
  std::rotate(r.records.begin(), r.records.begin() + 13, r.records.end());
  aggregate_report(r);
  ASSERT_EQ(before.size(), r.aggregates.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    EXPECT_EQ(before[i].n, r.aggregates[i].n);
    EXPECT_NEAR(before[i].mean_bias, r.aggregates[i].mean_bias, 1e-13);
    EXPECT_NEAR(before[i].rmse, r.aggregates[i].rmse, 1e-13);
    EXPECT_NEAR(before[i].coverage, r.aggregates[i].coverage, 1e-15);
  }
}

TEST(Aggregate, CoverageUsesNominalNinetyFivePercentBand) {
  SimulationReport r;
  r.config = scenario_config("no_cov", 1);
  r.options.estimators = {Estimator::gmm};
  r.parameter_names = theta_names(scenario_share_model(r.config));
  const Vector truth = r.config.true_nonlinear.pack();
  for (double offset : {0.0, 1.9, 2.0, -1.95, -3.0}) {
    ReplicationRecord rec;
    rec.estimator = Estimator::gmm;
    rec.ok = true;
    rec.theta_hat = truth.array() + offset;
    rec.se = Vector::Ones(truth.size());
    rec.se_flagged.assign(static_cast<std::size_t>(truth.size()), false);
    r.records.push_back(rec);
  }
  aggregate_report(r);
  for (const auto& a : r.aggregates) EXPECT_NEAR(a.coverage, 3.0 / 5.0, 1e-15) << a.parameter;
}

TEST(RunScenario, ThreadCountDoesNotChangeResults) {
  auto opt = quick_options();
  opt.standard_errors = false;
  const auto c = small_scenario("no_cov", 0, 3);
  const auto one = run_scenario(c, 3, 77, opt);
  opt.threads = 3;
  const auto three = run_scenario(c, 3, 77, opt);
  ASSERT_EQ(one.records.size(), 6u);
  ASSERT_EQ(three.records.size(), one.records.size());
  for (std::size_t i = 0; i < one.records.size(); ++i) {
    EXPECT_EQ(one.records[i].index, three.records[i].index);
    EXPECT_EQ(one.records[i].estimator, three.records[i].estimator);
    EXPECT_EQ(one.records[i].seed, three.records[i].seed);
    EXPECT_EQ(one.records[i].ok, three.records[i].ok);
    EXPECT_EQ(one.records[i].theta_hat, three.records[i].theta_hat);
  }
  for (std::size_t i = 0; i < one.aggregates.size(); ++i)
    EXPECT_EQ(one.aggregates[i].mean_bias, three.aggregates[i].mean_bias);
}

TEST(RunScenario, ReplicationSeedsFollowIndex) {
  auto opt = quick_options();
  opt.standard_errors = false;
  opt.estimators = {Estimator::gmm};
  const auto c = small_scenario("low_cov", 0, 2);
  const auto r = run_scenario(c, 2, 9, opt);
  ASSERT_EQ(r.records.size(), 2u);
  EXPECT_EQ(r.records[0].seed, replication_seed(9, "low_cov", 0));
  EXPECT_EQ(r.records[1].seed, replication_seed(9, "low_cov", 1));
  EXPECT_NE(r.records[0].seed, r.records[1].seed);
}

TEST(RunScenario, FailuresAreRecordedNotThrown) {
  auto opt = quick_options();
  opt.inversion.max_iters = 1;
  const auto r = run_scenario(small_scenario("no_cov", 0, 2), 2, 1, opt);
  ASSERT_EQ(r.records.size(), 4u);
  for (const auto& rec : r.records) {
    EXPECT_FALSE(rec.ok);
    EXPECT_FALSE(rec.error.empty());
  }
  for (const auto& s : r.summaries) EXPECT_EQ(s.failure_rate, 1.0);
  for (const auto& a : r.aggregates) EXPECT_EQ(a.n, 0);
}

TEST(RunScenario, ProgressCallbackCountsEveryReplication) {
  auto opt = quick_options();
  opt.standard_errors = false;
  opt.estimators = {Estimator::gmm};
  std::vector<int> seen;
  opt.progress = [&](int done, int total) {
    EXPECT_EQ(total, 2);
    seen.push_back(done);
  };
  run_scenario(small_scenario("no_cov", 0, 2), 2, 3, opt);
  EXPECT_EQ(seen, (std::vector<int>{1, 2}));
}

TEST(Elasticities, LogitClosedForm) {
  Engine eng(8);
  const auto model = default_share_model();
  const ThetaNonlinear theta{-1.3, Vector::Zero(2)};
  const auto rm = random_market(eng, 8, theta, model);
  const Vector e = own_price_elasticities(rm.market, theta, rm.delta, model);
  const Vector expect = theta.alpha * rm.market.prices.array() * (1.0 - rm.market.shares.array());
  EXPECT_LE((e - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Elasticities, NegativeAtTruthOnGeneratedData) {
  for (const char* name : {"no_cov", "high_cov", "laplace_low_cov"}) {
    const auto c = small_scenario(name, 21, 5);
    const auto ds = draw_scenario(c);
    const auto model = scenario_share_model(c);
    for (std::size_t t = 0; t < ds.data.n_markets(); ++t) {
      const auto& m = ds.data.markets[t];
      const Vector e = own_price_elasticities(m, ds.true_theta, ds.true_linear.beta, ds.true_xi[t], model);
      EXPECT_TRUE((e.array() < 0.0).all()) << name << " market " << t;
    }
  }
}

TEST(Elasticities, BiasIsZeroAtTruth) {
  const auto c = small_scenario("no_cov", 2, 3);
  const auto ds = draw_scenario(c);
  const auto b = elasticity_bias(ds.data, ds.true_theta, ds.true_theta, scenario_share_model(c));
  EXPECT_EQ(b.products, static_cast<Index>(ds.data.n_observations()));
  EXPECT_EQ(b.mean_bias, 0.0);
  EXPECT_EQ(b.mean_abs_bias, 0.0);
}

TEST(Sweep, SinglePointGridGivesOneRow) {
  const auto c = small_scenario("no_cov", 4, 3);
  const auto ds = draw_scenario(c);
  const auto rows = likelihood_decomposition_sweep(ds.data, scenario_share_model(c), ds.true_theta, {2.5},
                                                   settings_for(c));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_TRUE(rows[0].ok) << rows[0].error;
  EXPECT_EQ(rows[0].value, 2.5);
  EXPECT_NEAR(rows[0].loglik, -rows[0].covariance_term - rows[0].jacobian_term,
              1e-9 * (1.0 + std::abs(rows[0].loglik)));
  EXPECT_GE(rows[0].gmm_objective, 0.0);
  const auto ex = sweep_extrema(rows);
  EXPECT_EQ(ex.covariance_argmin, 2.5);
  EXPECT_EQ(ex.loglik_argmax, 2.5);
}

TEST(Sweep, MatchesDirectLikelihoodAndLeavesOtherParametersFixed) {
  const auto c = small_scenario("low_cov", 5, 3);
  const auto ds = draw_scenario(c);
  const auto model = scenario_share_model(c);
  const auto s = settings_for(c);
  const std::vector<double> grid{0.1, 0.3};
  const auto rows = likelihood_decomposition_sweep(ds.data, model, ds.true_theta, grid, s, 1);
  ASSERT_EQ(rows.size(), 2u);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    ThetaNonlinear th = ds.true_theta;
    th.sigma[1] = grid[i];
    EXPECT_EQ(rows[i].loglik, concentrated_likelihood(th, ds.data, model, s).loglik);
  }
  EXPECT_THROW(likelihood_decomposition_sweep(ds.data, model, ds.true_theta, grid, s, 2), ConfigError);
}

TEST(Sweep, FailedPointsAreSkippedByExtrema) {
  std::vector<SweepRow> rows(3);
  rows[0] = {1.0, true, 5.0, 0.0, -5.0, 0.0, ""};
  rows[1] = {2.0, false};
  rows[2] = {3.0, true, 4.0, 2.0, -6.0, 0.0, ""};
  const auto ex = sweep_extrema(rows);
  EXPECT_EQ(ex.covariance_argmin, 3.0);
  EXPECT_EQ(ex.loglik_argmax, 1.0);
  EXPECT_TRUE(std::isnan(sweep_extrema({}).loglik_argmax));
}
