#include "helpers.hpp"

using namespace blpmle;
using namespace blpmle::testing;

TEST(InvertShares, LogitClosedForm) {
  Engine eng(1);
  const auto model = default_share_model();
  const ThetaNonlinear theta{-1.0, Vector::Zero(2)};
  const auto rm = random_market(eng, 9, theta, model);
  const Vector delta = invert_shares(rm.market, theta, model);
  const Vector expect = rm.market.shares.array().log() - std::log(1.0 - rm.market.shares.sum());
  EXPECT_LE((delta - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(InvertShares, RoundTripRandomMixedLogit) {
  Engine eng(2);
  const auto model = default_share_model();
  for (int rep = 0; rep < 20; ++rep) {
    const auto theta = random_theta(eng);
    const auto rm = random_market(eng, 3 + static_cast<Index>(eng() % 20), theta, model);
    const Vector delta = invert_shares(rm.market, theta, model);
    EXPECT_LE((delta - rm.delta).cwiseAbs().maxCoeff(), 1e-10) << "rep " << rep;
  }
}

TEST(InvertShares, SquaremAgreesWithPlain) {
  Engine eng(3);
  const auto model = default_share_model();
  InversionSettings plain;
  plain.acceleration = Acceleration::plain;
  plain.max_iters = 100000;
  for (int rep = 0; rep < 10; ++rep) {
    const auto theta = random_theta(eng);
    const auto rm = random_market(eng, 8, theta, model);
    InversionTrace ts, tp;
    const Vector a = invert_shares(rm.market, theta, model, {}, nullptr, &ts);
    const Vector b = invert_shares(rm.market, theta, model, plain, nullptr, &tp);
    EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE(ts.evaluations, tp.evaluations);
  }
}

TEST(InvertShares, PlainResidualIsNonincreasing) {
  Engine eng(4);
  const auto model = default_share_model();
  InversionSettings plain;
  plain.acceleration = Acceleration::plain;
  plain.max_iters = 100000;
  for (int rep = 0; rep < 10; ++rep) {
    const auto theta = random_theta(eng);
    const auto rm = random_market(eng, 10, theta, model);
    InversionTrace trace;
    invert_shares(rm.market, theta, model, plain, nullptr, &trace);
    ASSERT_GE(trace.residuals.size(), 2u);
    for (std::size_t i = 1; i < trace.residuals.size(); ++i)
      EXPECT_LE(trace.residuals[i], trace.residuals[i - 1] * (1.0 + 1e-12) + 1e-15) << "rep " << rep << " it " << i;
  }
}

TEST(InvertShares, WarmStartAtSolutionStopsImmediately) {
  Engine eng(5);
  const auto model = default_share_model();
  const auto theta = random_theta(eng);
  const auto rm = random_market(eng, 6, theta, model);
  const Vector delta = invert_shares(rm.market, theta, model);
  InversionTrace trace;
  const Vector again = invert_shares(rm.market, theta, model, {}, &delta, &trace);
  EXPECT_EQ(trace.evaluations, 1);
  EXPECT_EQ(again, delta);
}

TEST(InvertShares, PermutationCommutes) {
  Engine eng(6);
  const auto model = default_share_model();
  const auto theta = random_theta(eng);
  const auto rm = random_market(eng, 7, theta, model);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(7);
  perm.indices() << 3, 0, 6, 1, 5, 2, 4;
  std::vector<std::int64_t> firms(7);
  for (Index j = 0; j < 7; ++j) firms[static_cast<std::size_t>(perm.indices()[j])] = rm.market.firm_ids[static_cast<std::size_t>(j)];
  const MarketData pm = make_market(0, perm * rm.market.demand_chars, perm * rm.market.cost_chars,
                                    perm * rm.market.prices, perm * rm.market.shares, firms);
  const Vector a = invert_shares(rm.market, theta, model);
  const Vector b = invert_shares(pm, theta, model);
  EXPECT_LE((perm * a - b).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(InvertShares, Errors) {
  Engine eng(7);
  const auto model = default_share_model();
  const auto theta = random_theta(eng);
  const auto rm = random_market(eng, 6, theta, model);
  InversionSettings few;
  few.max_iters = 2;
  try {
    invert_shares(rm.market, theta, model, few);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_GT(e.residual(), few.tol);
  }
  const ThetaNonlinear bad{-1.0, (Vector(2) << std::numeric_limits<double>::quiet_NaN(), 0.2).finished()};
  EXPECT_THROW(invert_shares(rm.market, bad, model), NumericalError);
  InversionSettings zero;
  zero.tol = 0.0;
  EXPECT_THROW(invert_shares(rm.market, theta, model, zero), ConfigError);
}

TEST(RecoverCosts, SingleProductLogit) {
  const auto model = default_share_model();
  const ThetaNonlinear theta{-1.2, Vector::Zero(2)};
  const MarketData m = make_market(0, Matrix::Ones(1, 2), Matrix::Ones(1, 3), Vector::Constant(1, 3.0),
                                   Vector::Constant(1, 0.35), {0});
  const Vector delta = invert_shares(m, theta, model);
  const Vector c = recover_costs(m, theta, model, delta, m.ownership);
  EXPECT_NEAR(c[0], 3.0 - 1.0 / (1.2 * (1.0 - 0.35)), 1e-12);
}

TEST(RecoverCosts, MatchesGeneratorAtTruth) {
  for (const char* name : {"no_cov", "high_cov", "laplace_low_cov"}) {
    const auto c = small_scenario(name, 9, 5);
    const auto ds = draw_scenario(c);
    const auto model = scenario_share_model(c);
    for (std::size_t t = 0; t < ds.data.n_markets(); ++t) {
      const auto& m = ds.data.markets[t];
      const Vector delta = invert_shares(m, ds.true_theta, model);
      const Vector cost = recover_costs(m, ds.true_theta, model, delta, m.ownership);
      EXPECT_LE((cost - ds.true_costs[t]).cwiseAbs().maxCoeff(), 1e-6) << name << " market " << t;
      EXPECT_TRUE((cost.array() < m.prices.array()).all());
    }
  }
}

TEST(RecoverCosts, IdentityOwnershipGivesSmallerMarkups) {
  const auto c = small_scenario("ownership_misspec", 4, 5);
  const auto ds = draw_scenario(c);
  const auto model = scenario_share_model(c);
  for (const auto& m : ds.data.markets) {
    const Vector delta = invert_shares(m, ds.true_theta, model);
    const Vector own = m.prices - recover_costs(m, ds.true_theta, model, delta, m.ownership);
    const Vector single = m.prices - recover_costs(m, ds.true_theta, model, delta, Matrix::Identity(m.n_products(), m.n_products()));
    EXPECT_TRUE((single.array() <= own.array() + 1e-12).all());
    EXPECT_TRUE((single.array() > 0.0).all());
  }
}

TEST(RecoverCosts, SingularSystemNamesMarket) {
  const auto model = default_share_model();
  MarketData m = make_market(17, Matrix::Ones(2, 2), Matrix::Ones(2, 3), Vector::Ones(2),
                             Vector::Constant(2, 0.2), {0, 1});
  try {
    recover_costs(m, {0.0, Vector::Zero(2)}, model, Vector::Zero(2), m.ownership);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("market 17"), std::string::npos);
  }
}
