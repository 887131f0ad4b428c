#pragma once

// Box-constrained quasi-Newton minimization with finite-difference gradients.

#include "blpmle/core.hpp"

#include <functional>

namespace blpmle {

using Objective = std::function<double(const Vector&)>;

struct Bounds {
  Vector lower;
  Vector upper;

  static Bounds unbounded(Index n) {
    const double inf = std::numeric_limits<double>::infinity();
    return {Vector::Constant(n, -inf), Vector::Constant(n, inf)};
  }
  Vector project(const Vector& x) const { return x.cwiseMax(lower).cwiseMin(upper); }
};

/// Step for coordinate k: rel_step * max(|x_k|, 1).
inline double fd_step(double x, double rel_step) { return rel_step * std::max(std::abs(x), 1.0); }

/// Central differences; one-sided where a central probe would leave the box.
inline Vector fd_gradient(const Objective& f, const Vector& x, double rel_step, double fx,
                          const Bounds* bounds = nullptr) {
  Vector g(x.size());
  for (Index k = 0; k < x.size(); ++k) {
    const double h = fd_step(x[k], rel_step);
    Vector xp = x, xm = x;
    xp[k] += h;
    xm[k] -= h;
    const bool low_ok = !bounds || xm[k] >= bounds->lower[k];
    const bool high_ok = !bounds || xp[k] <= bounds->upper[k];
    if (low_ok && high_ok) {
      g[k] = (f(xp) - f(xm)) / (2.0 * h);
    } else if (high_ok) {
      g[k] = (f(xp) - fx) / h;
    } else {
      g[k] = (fx - f(xm)) / h;
    }
  }
  return g;
}

struct FdGradientCheck {
  Vector coarse;
  Vector fine;
  double max_rel_diff;
  bool noisy;
};

/// Compares gradients at two relative steps; flags the point noisy when they
/// disagree by more than `tol` relative to the larger gradient norm.
inline FdGradientCheck fd_gradient_check(const Objective& f, const Vector& x, double coarse_step = 1e-5,
                                         double fine_step = 1e-7, double tol = 1e-3) {
  const double fx = f(x);
  FdGradientCheck c;
  c.coarse = fd_gradient(f, x, coarse_step, fx);
  c.fine = fd_gradient(f, x, fine_step, fx);
  const double scale = std::max({c.coarse.cwiseAbs().maxCoeff(), c.fine.cwiseAbs().maxCoeff(), 1e-300});
  c.max_rel_diff = (c.coarse - c.fine).cwiseAbs().maxCoeff() / scale;
  c.noisy = !(c.max_rel_diff <= tol);
  return c;
}

struct OptimizerSettings {
  int max_iters = 200;
  double gtol = 1e-5;       // projected-gradient sup norm
  double ftol = 1e-13;      // relative decrease treated as stagnation
  double fd_rel_step = 1e-6;
};

struct OptimizerResult {
  Vector x;
  double f = std::numeric_limits<double>::infinity();
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string message;
};

/// Projected BFGS: inverse-Hessian updates on the full space, search directions
/// restricted to variables not held at a bound, Armijo backtracking along the
/// projected path.
inline OptimizerResult minimize_box(const Objective& objective, const Vector& x0, const Bounds& bounds,
                                    const OptimizerSettings& settings = {}) {
  const Index n = x0.size();
  OptimizerResult res;
  auto f = [&](const Vector& x) {
    ++res.evaluations;
    const double v = objective(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::max();
  };
  Vector x = bounds.project(x0);
  double fx = f(x);
  Vector g = fd_gradient(f, x, settings.fd_rel_step, fx, &bounds);
  Matrix H = Matrix::Identity(n, n);
  bool scaled = false;
  int stagnant = 0;

  auto active = [&](const Vector& at, const Vector& grad, Index k) {
    return (at[k] <= bounds.lower[k] && grad[k] > 0.0) || (at[k] >= bounds.upper[k] && grad[k] < 0.0);
  };
  auto projected_norm = [&](const Vector& at, const Vector& grad) {
    double m = 0.0;
    for (Index k = 0; k < n; ++k)
      if (!active(at, grad, k)) m = std::max(m, std::abs(grad[k]));
    return m;
  };

  for (res.iterations = 0; res.iterations < settings.max_iters; ++res.iterations) {
    if (projected_norm(x, g) <= settings.gtol) {
      res.converged = true;
      res.message = "projected gradient below tolerance";
      break;
    }
    Vector d = -H * g;
    for (Index k = 0; k < n; ++k)
      if (active(x, g, k)) d[k] = 0.0;
    if (!(g.dot(d) < 0.0)) {
      H.setIdentity();
      d = -g;
      for (Index k = 0; k < n; ++k)
        if (active(x, g, k)) d[k] = 0.0;
    }

    double t = 1.0;
    Vector xt;
    double ft = fx;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls, t *= 0.5) {
      xt = bounds.project(x + t * d);
      ft = f(xt);
      if (ft <= fx + 1e-4 * g.dot(xt - x)) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      res.converged = projected_norm(x, g) <= 100.0 * settings.gtol;
      res.message = "line search failed";
      break;
    }
    const Vector gt = fd_gradient(f, xt, settings.fd_rel_step, ft, &bounds);
    const Vector s = xt - x;
    const Vector y = gt - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        H *= sy / y.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Matrix left = Matrix::Identity(n, n) - rho * s * y.transpose();
      H = left * H * left.transpose() + rho * s * s.transpose();
    }
    const double decrease = fx - ft;
    x = xt;
    fx = ft;
    g = gt;
    if (decrease <= settings.ftol * std::max(1.0, std::abs(fx))) {
      if (++stagnant >= 3) {
        res.converged = projected_norm(x, g) <= 100.0 * settings.gtol;
        res.message = "objective stagnated";
        break;
      }
    } else {
      stagnant = 0;
    }
  }
  if (res.message.empty()) res.message = "iteration limit";
  res.x = x;
  res.f = fx;
  return res;
}

}  // namespace blpmle
