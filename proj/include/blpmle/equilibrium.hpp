#pragma once

// Synthetic markets: scenario primitives, error draws and Bertrand-Nash prices.

#include "blpmle/jacobian.hpp"
#include "blpmle/rng.hpp"

#include <array>
#include <string>

namespace blpmle {

// ---------------------------------------------------------------------------
// Pricing equilibrium

struct PricingSettings {
  double tol = 1e-13;  // max-abs FOC residual
  int max_iters = 2000;
  int newton_iters = 60;
  int stall_window = 25;
};

/// Market primitives needed to solve for prices. `base_utility` is X beta + xi,
/// i.e. mean utility without the alpha * p term.
struct PricingProblem {
  std::int64_t market_id = 0;
  Matrix demand_chars;
  Matrix ownership;
  Vector costs;
  Vector base_utility;
};

namespace detail {

struct PricingState {
  NodeShares ns;
  Vector s;
  Vector lambda;  // diag part of J_sp
  Matrix gamma;   // J_sp = diag(lambda) - gamma
  Vector foc;
  double residual;
};

inline PricingState pricing_state(const PricingProblem& pr, const Vector& p, const ThetaNonlinear& theta,
                                  const ShareModel& model) {
  PricingState st;
  const Vector delta = pr.base_utility + theta.alpha * p;
  st.ns = node_shares(delta, pr.demand_chars, p, theta, model);
  st.s = aggregate_shares(st.ns);
  const Vector wa = st.ns.probabilities.cwiseProduct(st.ns.price_slope);
  const Matrix sw = st.ns.s * wa.asDiagonal();
  st.lambda = sw.rowwise().sum();
  st.gamma = sw * st.ns.s.transpose();
  const Vector markup = p - pr.costs;
  st.foc = st.s + st.lambda.cwiseProduct(markup) - pr.ownership.cwiseProduct(st.gamma) * markup;
  st.residual = st.foc.allFinite() ? st.foc.cwiseAbs().maxCoeff() : std::numeric_limits<double>::infinity();
  return st;
}

}  // namespace detail

/// Bertrand-Nash prices for one market.
///
/// Iterates the markup fixed point zeta(p) = Lambda^{-1}[(O o Gamma)(p - c) - s],
/// p <- c + zeta(p), where J_sp = Lambda - Gamma. If the residual stops
/// improving, switches to damped Newton steps on the FOC using J_Fp. Returns
/// prices with max |s + (O o J_sp)(p - c)| <= settings.tol.
inline Vector solve_prices(const PricingProblem& pr, const ThetaNonlinear& theta, const ShareModel& model,
                           const PricingSettings& settings = {}, const Vector* start = nullptr) {
  const std::string where = "price equilibrium in market " + std::to_string(pr.market_id);
  if (!pr.costs.allFinite()) throw NumericalError(where + ": non-finite costs");
  Vector p = (start && start->size() == pr.costs.size()) ? *start : Vector(pr.costs.array() + 1.0);

  auto st = detail::pricing_state(pr, p, theta, model);
  if (!(st.lambda.array() < 0.0).all()) throw NumericalError(where + ": demand is not downward sloping");
  double best = st.residual;
  int since_best = 0;
  for (int it = 0; it < settings.max_iters && st.residual > settings.tol; ++it) {
    const Vector markup = p - pr.costs;
    const Vector zeta = (pr.ownership.cwiseProduct(st.gamma) * markup - st.s).cwiseQuotient(st.lambda);
    p = pr.costs + zeta;
    st = detail::pricing_state(pr, p, theta, model);
    if (!std::isfinite(st.residual) || !(st.lambda.array() < 0.0).all()) break;
    if (st.residual < 0.5 * best) {
      best = st.residual;
      since_best = 0;
    } else if (++since_best >= settings.stall_window) {
      break;
    }
  }
  if (st.residual <= settings.tol) return p;

  // Newton fallback / polish, restarting from the unit markup if the fixed point diverged.
  if (!std::isfinite(st.residual)) {
    p = pr.costs.array() + 1.0;
    st = detail::pricing_state(pr, p, theta, model);
  }
  for (int it = 0; it < settings.newton_iters; ++it) {
    if (st.residual <= settings.tol) return p;
    const FocBlocks b = foc_derivative_blocks(st.ns, pr.ownership, p - pr.costs);
    Eigen::PartialPivLU<Matrix> lu(b.J_Fp);
    if (!(lu.rcond() > 1e-14)) throw NumericalError(where + ": singular FOC Jacobian", st.residual);
    const Vector step = -lu.solve(st.foc);
    double lam = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 30; ++ls, lam *= 0.5) {
      const Vector trial = p + lam * step;
      auto ts = detail::pricing_state(pr, trial, theta, model);
      if (ts.residual < st.residual) {
        p = trial;
        st = std::move(ts);
        moved = true;
        break;
      }
    }
    if (!moved) break;
  }
  if (st.residual <= settings.tol) return p;
  throw NumericalError(where + ": no convergence (residual " + format_number(st.residual) + ")", st.residual);
}

/// Max-abs FOC residual of given prices.
inline double pricing_residual(const PricingProblem& pr, const Vector& p, const ThetaNonlinear& theta,
                               const ShareModel& model) {
  return detail::pricing_state(pr, p, theta, model).residual;
}

// ---------------------------------------------------------------------------
// Error draws

/// Standard normal CDF complement based Laplace quantile: a Laplace variate with
/// scale b sharing the rank of the standard normal z.
inline double laplace_from_normal(double z, double scale) {
  const double tail = std::erfc(std::abs(z) / std::sqrt(2.0));  // 2 * P(Z > |z|)
  const double mag = -scale * std::log(tail);
  return z < 0.0 ? -mag : mag;
}

/// n x 2 draws with Laplace marginals (variance from the diagonal, scale
/// sqrt(var/2)) joined by a Gaussian copula with the correlation implied by sigma.
inline Matrix laplace_copula_draws(Index n, const CovMatrix& sigma, Engine& eng) {
  if (!sigma.positive_definite()) throw ConfigError("laplace_copula_draws: covariance not positive definite");
  const double rho = sigma.correlation();
  const double b0 = std::sqrt(sigma.sigma_xi_sq / 2.0);
  const double b1 = std::sqrt(sigma.sigma_u_sq / 2.0);
  std::normal_distribution<double> normal;
  Matrix out(n, 2);
  for (Index i = 0; i < n; ++i) {
    const double z0 = normal(eng);
    const double e1 = normal(eng);
    const double z1 = rho * z0 + std::sqrt(1.0 - rho * rho) * e1;
    out(i, 0) = laplace_from_normal(z0, b0);
    out(i, 1) = laplace_from_normal(z1, b1);
  }
  return out;
}

inline Matrix laplace_copula_draws(Index n, const CovMatrix& sigma, std::uint64_t seed) {
  Engine eng(seed);
  return laplace_copula_draws(n, sigma, eng);
}

inline Matrix normal_draws(Index n, const CovMatrix& sigma, Engine& eng) {
  if (!sigma.positive_definite()) throw ConfigError("normal_draws: covariance not positive definite");
  const Eigen::Matrix2d chol = Eigen::LLT<Eigen::Matrix2d>(sigma.matrix()).matrixL();
  std::normal_distribution<double> normal;
  Matrix out(n, 2);
  for (Index i = 0; i < n; ++i) {
    Eigen::Vector2d z(normal(eng), normal(eng));
    out.row(i) = (chol * z).transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scenarios

enum class ErrorFamily { normal, laplace_copula };

struct ScenarioConfig {
  std::string name = "no_cov";
  int n_markets = 20;
  std::vector<int> firm_count_choices{2, 5, 10};
  std::vector<int> products_per_firm_choices{3, 4, 5};
  ErrorFamily error_family = ErrorFamily::normal;
  CovMatrix sigma_true{0.2, 0.2, 0.0};
  LinearParams true_linear{(Vector(2) << -7.0, 6.0).finished(), (Vector(3) << 2.0, 1.0, 0.2).finished()};
  ThetaNonlinear true_nonlinear{-1.0, (Vector(2) << 3.0, 0.2).finished()};
  SupplyForm estimation_supply_form = SupplyForm::linear;
  OwnershipMode estimation_ownership = OwnershipMode::firms;
  int quadrature_level = 7;
  std::uint64_t seed = 0;
};

inline const std::vector<std::string>& scenario_names() {
  static const std::vector<std::string> names{"no_cov",          "low_cov",        "high_cov",         "laplace_no_cov",
                                              "laplace_low_cov", "supply_misspec", "ownership_misspec"};
  return names;
}

/// Defaults for a named scenario. The misspecified scenarios use the low-covariance
/// errors.
inline ScenarioConfig scenario_config(const std::string& name, std::uint64_t seed = 0) {
  ScenarioConfig c;
  c.name = name;
  c.seed = seed;
  const CovMatrix low{0.2, 0.2, 0.1};
  if (name == "no_cov") {
  } else if (name == "low_cov") {
    c.sigma_true = low;
  } else if (name == "high_cov") {
    c.sigma_true = {0.3, 0.3, 0.2};
  } else if (name == "laplace_no_cov") {
    c.error_family = ErrorFamily::laplace_copula;
  } else if (name == "laplace_low_cov") {
    c.error_family = ErrorFamily::laplace_copula;
    c.sigma_true = low;
  } else if (name == "supply_misspec") {
    c.sigma_true = low;
    c.estimation_supply_form = SupplyForm::log_linear;
  } else if (name == "ownership_misspec") {
    c.sigma_true = low;
    c.estimation_ownership = OwnershipMode::identity;
  } else {
    throw ConfigError("unknown scenario '" + name + "'");
  }
  return c;
}

/// Random-coefficient layout of the simulation design: x (demand column 1) and price.
inline ShareModel scenario_share_model(const ScenarioConfig& c) { return default_share_model(c.quadrature_level); }

struct SyntheticDataset {
  Dataset data;
  ThetaNonlinear true_theta;
  LinearParams true_linear;
  CovMatrix true_cov;
  std::vector<Vector> true_costs;
  std::vector<Vector> true_xi;
  std::vector<Vector> true_u;
  std::uint64_t seed = 0;
};

namespace detail {
enum StreamId : std::uint64_t { structure = 1, chars_x = 2, chars_w = 3, errors = 4 };

inline int pick(const std::vector<int>& choices, Engine& eng) {
  std::uniform_int_distribution<std::size_t> d(0, choices.size() - 1);
  return choices[d(eng)];
}
}  // namespace detail

/// Draws one synthetic dataset. Per market: firm and product counts, x, w ~ U(0,1),
/// (xi, u) per the error family, costs c = W gamma + u with W = [1, x, w], demand
/// X = [1, x], equilibrium prices, then shares at the implied mean utilities.
inline SyntheticDataset draw_scenario(const ScenarioConfig& config, const PricingSettings& pricing = {}) {
  if (config.firm_count_choices.empty() || config.products_per_firm_choices.empty())
    throw ConfigError("scenario choice sets must be nonempty");
  if (!config.sigma_true.positive_definite()) throw ConfigError("scenario covariance not positive definite");
  if (config.n_markets < 1) throw ConfigError("scenario needs at least one market");
  const ShareModel model = scenario_share_model(config);

  SyntheticDataset out;
  out.true_theta = config.true_nonlinear;
  out.true_linear = config.true_linear;
  out.true_cov = config.sigma_true;
  out.seed = config.seed;
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  for (int t = 0; t < config.n_markets; ++t) {
    const auto mt = static_cast<std::uint64_t>(t);
    Engine eng_struct = substream(config.seed, {mt, detail::structure});
    const int n_firms = detail::pick(config.firm_count_choices, eng_struct);
    std::vector<std::int64_t> firm_ids;
    for (int f = 0; f < n_firms; ++f) {
      const int nf = detail::pick(config.products_per_firm_choices, eng_struct);
      for (int k = 0; k < nf; ++k) firm_ids.push_back(f);
    }
    const auto n = static_cast<Index>(firm_ids.size());

    Engine eng_x = substream(config.seed, {mt, detail::chars_x});
    Engine eng_w = substream(config.seed, {mt, detail::chars_w});
    Engine eng_e = substream(config.seed, {mt, detail::errors});
    Matrix X(n, 2), W(n, 3);
    for (Index j = 0; j < n; ++j) {
      const double x = unif(eng_x);
      const double w = unif(eng_w);
      X.row(j) << 1.0, x;
      W.row(j) << 1.0, x, w;
    }
    const Matrix err = config.error_family == ErrorFamily::normal ? normal_draws(n, config.sigma_true, eng_e)
                                                                  : laplace_copula_draws(n, config.sigma_true, eng_e);
    const Vector xi = err.col(0);
    const Vector u = err.col(1);

    PricingProblem pr;
    pr.market_id = t;
    pr.demand_chars = X;
    pr.ownership = ownership_from_firms(firm_ids);
    pr.costs = W * config.true_linear.gamma + u;
    pr.base_utility = X * config.true_linear.beta + xi;
    const Vector p = solve_prices(pr, config.true_nonlinear, model, pricing);
    const Vector delta = pr.base_utility + config.true_nonlinear.alpha * p;
    const Vector s = aggregate_shares(node_shares(delta, X, p, config.true_nonlinear, model));

    out.data.markets.push_back(make_market(t, X, W, p, s, firm_ids));
    out.true_costs.push_back(pr.costs);
    out.true_xi.push_back(xi);
    out.true_u.push_back(u);
  }
  return out;
}

}  // namespace blpmle
