#pragma once

#include "blpmle.hpp"

#include <gtest/gtest.h>

#include <random>

namespace blpmle::testing {

inline double max_abs(const Matrix& m) { return m.cwiseAbs().maxCoeff(); }

/// A market with random characteristics, firm structure, prices and the shares
/// implied by a random mean-utility vector at `theta`.
struct RandomMarket {
  MarketData market;
  Vector delta;
};

inline RandomMarket random_market(Engine& eng, Index n, const ThetaNonlinear& theta, const ShareModel& model,
                                  int n_firms = 0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (n_firms <= 0) n_firms = static_cast<int>(1 + eng() % static_cast<std::uint64_t>(std::min<Index>(n, 4)));
  Matrix X(n, 2), W(n, 3);
  Vector p(n), delta(n);
  std::vector<std::int64_t> firms(static_cast<std::size_t>(n));
  for (Index j = 0; j < n; ++j) {
    X.row(j) << 1.0, u(eng);
    W.row(j) << 1.0, X(j, 1), u(eng);
    p[j] = 1.0 + 2.0 * u(eng);
    delta[j] = -3.0 + 2.0 * u(eng);
    firms[static_cast<std::size_t>(j)] = static_cast<std::int64_t>(j % n_firms);
  }
  MarketData m;
  m.market_id = 0;
  m.demand_chars = X;
  m.cost_chars = W;
  m.prices = p;
  m.firm_ids = firms;
  m.ownership = ownership_from_firms(firms);
  m.shares = compute_shares(delta, m, theta, model);
  validate_market(m);
  return {m, delta};
}

inline ThetaNonlinear random_theta(Engine& eng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return {-0.5 - u(eng), (Vector(2) << 0.5 + 3.0 * u(eng), 0.05 + 0.4 * u(eng)).finished()};
}

/// Small synthetic scenario used where a full 20-market draw is not needed.
inline ScenarioConfig small_scenario(const std::string& name, std::uint64_t seed, int markets = 4) {
  ScenarioConfig c = scenario_config(name, seed);
  c.n_markets = markets;
  return c;
}

inline EstimationSettings settings_for(const ScenarioConfig& c) {
  EstimationSettings s;
  s.supply_form = c.estimation_supply_form;
  s.ownership = c.estimation_ownership;
  return s;
}

}  // namespace blpmle::testing
