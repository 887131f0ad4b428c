#include "helpers.hpp"

#include <algorithm>
#include <numeric>

using namespace blpmle;
using namespace blpmle::testing;

namespace {

PricingProblem problem_for(const SyntheticDataset& ds, std::size_t t) {
  const auto& m = ds.data.markets[t];
  PricingProblem pr;
  pr.market_id = m.market_id;
  pr.demand_chars = m.demand_chars;
  pr.ownership = m.ownership;
  pr.costs = ds.true_costs[t];
  pr.base_utility = m.demand_chars * ds.true_linear.beta + ds.true_xi[t];
  return pr;
}

double pearson(const Vector& a, const Vector& b) {
  const Vector ac = a.array() - a.mean();
  const Vector bc = b.array() - b.mean();
  return ac.dot(bc) / std::sqrt(ac.squaredNorm() * bc.squaredNorm());
}

Vector ranks(const Vector& v) {
  std::vector<Index> idx(static_cast<std::size_t>(v.size()));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::sort(idx.begin(), idx.end(), [&](Index a, Index b) { return v[a] < v[b]; });
  Vector r(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) r[idx[i]] = static_cast<double>(i);
  return r;
}

}  // namespace

TEST(DrawScenario, DeterministicGivenSeed) {
  const auto c = small_scenario("no_cov", 42, 5);
  const auto a = draw_scenario(c);
  const auto b = draw_scenario(c);
  ASSERT_EQ(a.data.n_markets(), b.data.n_markets());
  for (std::size_t t = 0; t < a.data.n_markets(); ++t) {
    const auto& ma = a.data.markets[t];
    const auto& mb = b.data.markets[t];
    EXPECT_EQ(ma.prices, mb.prices);
    EXPECT_EQ(ma.shares, mb.shares);
    EXPECT_EQ(ma.demand_chars, mb.demand_chars);
    EXPECT_EQ(ma.cost_chars, mb.cost_chars);
    EXPECT_EQ(ma.firm_ids, mb.firm_ids);
    EXPECT_EQ(a.true_costs[t], b.true_costs[t]);
  }
}

TEST(DrawScenario, DifferentSeedsDiffer) {
  const auto a = draw_scenario(small_scenario("no_cov", 1, 5));
  const auto b = draw_scenario(small_scenario("no_cov", 2, 5));
  auto mean_share = [](const SyntheticDataset& d) {
    double s = 0.0;
    for (const auto& m : d.data.markets) s += m.shares.sum();
    return s / static_cast<double>(d.data.n_observations());
  };
  EXPECT_NE(mean_share(a), mean_share(b));
}

TEST(DrawScenario, ProductCountBounds) {
  const auto ds = draw_scenario(scenario_config("no_cov", 7));
  ASSERT_EQ(ds.data.n_markets(), 20u);
  for (const auto& m : ds.data.markets) {
    EXPECT_GE(m.n_products(), 6);
    EXPECT_LE(m.n_products(), 50);
  }
}

TEST(DrawScenario, EveryMarketSatisfiesFocWithPositiveMarkups) {
  for (const auto& name : scenario_names()) {
    const auto c = small_scenario(name, 11, 6);
    const auto ds = draw_scenario(c);
    const auto model = scenario_share_model(c);
    for (std::size_t t = 0; t < ds.data.n_markets(); ++t) {
      const auto pr = problem_for(ds, t);
      const auto& m = ds.data.markets[t];
      EXPECT_LE(pricing_residual(pr, m.prices, ds.true_theta, model), 1e-10) << name << " market " << t;
      EXPECT_TRUE((m.prices.array() > pr.costs.array()).all()) << name << " market " << t;
    }
  }
}

TEST(DrawScenario, RejectsInvalidConfig) {
  auto c = scenario_config("no_cov", 1);
  c.sigma_true = {0.2, 0.2, 0.3};
  EXPECT_THROW(draw_scenario(c), ConfigError);
  c = scenario_config("no_cov", 1);
  c.firm_count_choices.clear();
  EXPECT_THROW(draw_scenario(c), ConfigError);
  EXPECT_THROW(scenario_config("mystery", 1), ConfigError);
}

// Pooled over the per-market substreams the generator uses.
TEST(ErrorDraws, LaplaceLowCovPooledMoments) {
  const auto c = scenario_config("laplace_low_cov", 5);
  Vector xi(100000), u(100000);
  Index filled = 0;
  for (std::uint64_t t = 0; filled < xi.size(); ++t) {
    Engine eng = substream(c.seed, {t, detail::errors});
    const Matrix d = laplace_copula_draws(std::min<Index>(40, xi.size() - filled), c.sigma_true, eng);
    xi.segment(filled, d.rows()) = d.col(0);
    u.segment(filled, d.rows()) = d.col(1);
    filled += d.rows();
  }
  EXPECT_NEAR(pearson(xi, u), 0.5, 0.02);
  EXPECT_NEAR((xi.array() - xi.mean()).square().mean(), 0.2, 0.01);
  EXPECT_NEAR((u.array() - u.mean()).square().mean(), 0.2, 0.01);
}

TEST(ErrorDraws, LaplaceKurtosis) {
  const Matrix d = laplace_copula_draws(1'000'000, {0.2, 0.2, 0.0}, 17);
  for (Index col = 0; col < 2; ++col) {
    const Vector x = d.col(col).array() - d.col(col).mean();
    const double m2 = x.array().square().mean();
    const double m4 = x.array().pow(4).mean();
    EXPECT_NEAR(m4 / (m2 * m2), 6.0, 0.2);
    EXPECT_NEAR(m2, 0.2, 0.002);
  }
}

TEST(ErrorDraws, SpearmanMatchesGaussianCopula) {
  const Matrix d = laplace_copula_draws(1'000'000, {0.2, 0.2, 0.1}, 23);
  const double rho_s = pearson(ranks(d.col(0)), ranks(d.col(1)));
  const double expected = 6.0 / std::numbers::pi * std::asin(0.5 / 2.0);
  EXPECT_NEAR(rho_s, expected, 0.01);
}

TEST(ErrorDraws, ZeroCovarianceGivesIndependentStreams) {
  const Matrix d = laplace_copula_draws(200000, {0.2, 0.2, 0.0}, 3);
  EXPECT_NEAR(pearson(d.col(0), d.col(1)), 0.0, 0.01);
  EXPECT_NEAR(pearson(ranks(d.col(0)), ranks(d.col(1))), 0.0, 0.01);
  EXPECT_NEAR(pearson(d.col(0).cwiseAbs(), d.col(1).cwiseAbs()), 0.0, 0.01);
}

TEST(ErrorDraws, RejectNonPositiveDefinite) {
  EXPECT_THROW(laplace_copula_draws(10, {0.2, 0.2, 0.2}, 1), ConfigError);
  Engine eng(1);
  EXPECT_THROW(normal_draws(10, {0.2, -0.1, 0.0}, eng), ConfigError);
}

// For one product under logit the FOC reads p - c = 1 / (|alpha| (1 - s(p))); the left
// side minus the right side is increasing in p, so bisection brackets the root.
TEST(SolvePrices, MonopolistMatchesBisection) {
  const auto model = default_share_model();
  const ThetaNonlinear theta{-1.4, Vector::Zero(2)};
  PricingProblem pr;
  pr.demand_chars = Matrix::Ones(1, 2);
  pr.ownership = Matrix::Ones(1, 1);
  pr.costs = Vector::Constant(1, 2.0);
  pr.base_utility = Vector::Constant(1, 1.5);
  const Vector p = solve_prices(pr, theta, model);

  auto gap = [&](double price) {
    const double v = pr.base_utility[0] + theta.alpha * price;
    const double s = 1.0 / (1.0 + std::exp(-v));
    return price - pr.costs[0] - 1.0 / (std::abs(theta.alpha) * (1.0 - s));
  };
  double lo = pr.costs[0], hi = pr.costs[0] + 100.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (gap(mid) < 0.0 ? lo : hi) = mid;
  }
  EXPECT_NEAR(p[0], 0.5 * (lo + hi), 1e-8);
}

TEST(SolvePrices, IdenticalFirmsChargeIdenticalPrices) {
  const auto model = default_share_model();
  const ThetaNonlinear theta{-1.0, (Vector(2) << 3.0, 0.2).finished()};
  PricingProblem pr;
  pr.demand_chars = (Matrix(2, 2) << 1.0, 0.4, 1.0, 0.4).finished();
  pr.ownership = Matrix::Identity(2, 2);
  pr.costs = Vector::Constant(2, 2.3);
  pr.base_utility = Vector::Constant(2, -4.0);
  const Vector p = solve_prices(pr, theta, model);
  EXPECT_NEAR(p[0], p[1], 1e-10);
  EXPECT_LE(pricing_residual(pr, p, theta, model), 1e-10);
}

TEST(SolvePrices, WarmRestartIsStationary) {
  const auto c = small_scenario("low_cov", 3, 4);
  const auto ds = draw_scenario(c);
  const auto model = scenario_share_model(c);
  for (std::size_t t = 0; t < ds.data.n_markets(); ++t) {
    const auto pr = problem_for(ds, t);
    const Vector& p0 = ds.data.markets[t].prices;
    const Vector p1 = solve_prices(pr, ds.true_theta, model, {}, &p0);
    EXPECT_LE((p1 - p0).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(SolvePrices, NonconvergenceCarriesResidual) {
  const auto c = small_scenario("no_cov", 3, 1);
  const auto ds = draw_scenario(c);
  const auto pr = problem_for(ds, 0);
  PricingSettings tight;
  tight.max_iters = 1;
  tight.newton_iters = 0;
  try {
    solve_prices(pr, ds.true_theta, scenario_share_model(c), tight);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_GT(e.residual(), tight.tol);
    EXPECT_NE(std::string(e.what()).find("market 0"), std::string::npos);
  }
}

TEST(SolvePrices, RejectsUpwardSlopingDemand) {
  PricingProblem pr;
  pr.demand_chars = Matrix::Ones(2, 2);
  pr.ownership = Matrix::Identity(2, 2);
  pr.costs = Vector::Ones(2);
  pr.base_utility = Vector::Zero(2);
  EXPECT_THROW(solve_prices(pr, {1.0, Vector::Zero(2)}, default_share_model()), NumericalError);
  pr.costs[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(solve_prices(pr, {-1.0, Vector::Zero(2)}, default_share_model()), NumericalError);
}
