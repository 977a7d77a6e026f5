#ifndef LATOPT_GCMMA_HPP
#define LATOPT_GCMMA_HPP

#include <Eigen/Dense>
#include <functional>
#include <stdexcept>
#include <vector>

namespace latopt {

struct GcmmaOptions {
  double move = 0.1;            // move limit as a fraction of the bound range
  double asym_init = 0.5;       // initial asymptote distance fraction
  double asym_shrink = 0.7;     // oscillation detected
  double asym_expand = 1.2;     // monotone progress
  int max_inner = 20;
  double kkt_tol = 1e-10;
  double conservative_tol = 1e-10;
  double slack_penalty = 1000.0;
};

/// Objective/constraint values and gradients at one design point.
/// g and dg have one row per inequality constraint g_i(x) <= 0.
struct GcmmaEval {
  double f0 = 0.0;
  Eigen::VectorXd df0;
  Eigen::VectorXd g;
  Eigen::MatrixXd dg;
};

struct GcmmaState {
  Eigen::VectorXd low, upp;        // moving asymptotes
  Eigen::VectorXd x_prev, x_prev2;
  int outer = 0;

  void reset(int n) {
    low.resize(0);
    upp.resize(0);
    x_prev.resize(n);
    x_prev2.resize(n);
    outer = 0;
  }
};

namespace detail {

struct Subproblem {
  Eigen::VectorXd low, upp, alpha, beta;
  Eigen::VectorXd p0, q0;
  Eigen::MatrixXd P, Q;  // m x n
  Eigen::VectorXd b;     // m
  double r0 = 0.0;
  int n = 0, m = 0;
  double slack_penalty = 1000.0;

  Eigen::VectorXd primal_for(const Eigen::VectorXd& lambda) const {
    Eigen::VectorXd x(n);
    for (int j = 0; j < n; ++j) {
      double Pj = p0(j), Qj = q0(j);
      for (int i = 0; i < m; ++i) {
        Pj += lambda(i) * P(i, j);
        Qj += lambda(i) * Q(i, j);
      }
      const double sp = std::sqrt(Pj), sq = std::sqrt(Qj);
      const double xj = (low(j) * sp + upp(j) * sq) / (sp + sq);
      x(j) = std::clamp(xj, alpha(j), beta(j));
    }
    return x;
  }

  double approx_objective(const Eigen::VectorXd& x) const {
    double v = r0;
    for (int j = 0; j < n; ++j) v += p0(j) / (upp(j) - x(j)) + q0(j) / (x(j) - low(j));
    return v;
  }

  double approx_constraint(int i, const Eigen::VectorXd& x) const {
    double v = -b(i);
    for (int j = 0; j < n; ++j) v += P(i, j) / (upp(j) - x(j)) + Q(i, j) / (x(j) - low(j));
    return v;
  }

  /// Dual gradient component i at multiplier vector lambda.
  double dual_gradient(int i, const Eigen::VectorXd& lambda) const {
    const Eigen::VectorXd x = primal_for(lambda);
    const double y = std::max(0.0, lambda(i) - slack_penalty);
    return approx_constraint(i, x) - y;
  }
};

/// Maximize the concave dual by cyclic per-coordinate Newton steps with a
/// bisection safeguard, then read off the primal minimizer.
inline Eigen::VectorXd solve_subproblem(const Subproblem& sub, double kkt_tol) {
  if (sub.m == 0) return sub.primal_for(Eigen::VectorXd::Zero(0));
  Eigen::VectorXd lambda = Eigen::VectorXd::Zero(sub.m);
  for (int sweep = 0; sweep < 200; ++sweep) {
    for (int i = 0; i < sub.m; ++i) {
      double g0 = sub.dual_gradient(i, lambda);
      if (lambda(i) == 0.0 && g0 <= 0.0) continue;
      // Bracket the root of the (non-increasing) coordinate gradient.
      double lo = 0.0, hi = std::max(1.0, 2.0 * lambda(i));
      Eigen::VectorXd trial = lambda;
      trial(i) = hi;
      int grow = 0;
      while (sub.dual_gradient(i, trial) > 0.0 && grow++ < 80) {
        hi *= 4.0;
        trial(i) = hi;
      }
      for (int it = 0; it < 100; ++it) {
        const double mid = 0.5 * (lo + hi);
        trial(i) = mid;
        if (sub.dual_gradient(i, trial) > 0.0)
          lo = mid;
        else
          hi = mid;
      }
      lambda(i) = hi;
      (void)g0;
    }
    // KKT residual: primal feasibility and complementarity of the subproblem.
    const Eigen::VectorXd x = sub.primal_for(lambda);
    double res = 0.0;
    for (int i = 0; i < sub.m; ++i) {
      const double y = std::max(0.0, lambda(i) - sub.slack_penalty);
      const double gi = sub.approx_constraint(i, x) - y;
      res = std::max(res, gi);
      res = std::max(res, std::abs(lambda(i) * gi));
    }
    if (res <= kkt_tol) break;
  }
  return sub.primal_for(lambda);
}

}  // namespace detail

/// One GCMMA outer iteration: build convex separable approximations around x,
/// solve the subproblem, and repeat with raised conservatism parameters until
/// the approximations dominate the true functions at the candidate point.
/// `values` evaluates (f0, g) only, used by the inner conservatism check.
/// Returns the accepted iterate and the number of inner iterations.
inline std::pair<Eigen::VectorXd, int> gcmma_step(
    const Eigen::VectorXd& x, const GcmmaEval& eval, const Eigen::VectorXd& xmin,
    const Eigen::VectorXd& xmax, GcmmaState& state,
    const std::function<std::pair<double, Eigen::VectorXd>(const Eigen::VectorXd&)>& values,
    const GcmmaOptions& opt = {}) {
  const int n = static_cast<int>(x.size());
  const int m = static_cast<int>(eval.g.size());
  if (!eval.df0.allFinite() || (m > 0 && !eval.dg.allFinite()))
    throw std::invalid_argument("gcmma_step: non-finite gradients");
  if ((xmax - xmin).minCoeff() <= 0.0)
    throw std::invalid_argument("gcmma_step: inconsistent bounds");

  const Eigen::VectorXd range = xmax - xmin;

  // Asymptote update.
  Eigen::VectorXd low(n), upp(n);
  if (state.outer < 2 || state.low.size() != n) {
    low = x - opt.asym_init * range;
    upp = x + opt.asym_init * range;
  } else {
    for (int j = 0; j < n; ++j) {
      const double trend = (x(j) - state.x_prev(j)) * (state.x_prev(j) - state.x_prev2(j));
      const double gamma = trend > 0.0 ? opt.asym_expand : (trend < 0.0 ? opt.asym_shrink : 1.0);
      low(j) = x(j) - gamma * (state.x_prev(j) - state.low(j));
      upp(j) = x(j) + gamma * (state.upp(j) - state.x_prev(j));
      low(j) = std::clamp(low(j), x(j) - 10.0 * range(j), x(j) - 0.01 * range(j));
      upp(j) = std::clamp(upp(j), x(j) + 0.01 * range(j), x(j) + 10.0 * range(j));
    }
  }

  detail::Subproblem sub;
  sub.n = n;
  sub.m = m;
  sub.slack_penalty = opt.slack_penalty;
  sub.low = low;
  sub.upp = upp;
  sub.alpha.resize(n);
  sub.beta.resize(n);
  for (int j = 0; j < n; ++j) {
    sub.alpha(j) = std::max({xmin(j), low(j) + 0.1 * (x(j) - low(j)), x(j) - opt.move * range(j)});
    sub.beta(j) = std::min({xmax(j), upp(j) - 0.1 * (upp(j) - x(j)), x(j) + opt.move * range(j)});
  }

  // Initial conservatism parameters (Svanberg's rho heuristics).
  Eigen::VectorXd rho(m + 1);
  {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += std::abs(eval.df0(j)) * range(j);
    rho(0) = std::max(1e-5, 0.1 * s / n);
    for (int i = 0; i < m; ++i) {
      s = 0.0;
      for (int j = 0; j < n; ++j) s += std::abs(eval.dg(i, j)) * range(j);
      rho(i + 1) = std::max(1e-5, 0.1 * s / n);
    }
  }

  auto build = [&]() {
    sub.p0.resize(n);
    sub.q0.resize(n);
    sub.P.resize(m, n);
    sub.Q.resize(m, n);
    sub.b.resize(m);
    sub.r0 = eval.f0;
    for (int j = 0; j < n; ++j) {
      const double du = upp(j) - x(j), dl = x(j) - low(j);
      const double gp = std::max(eval.df0(j), 0.0), gm = std::max(-eval.df0(j), 0.0);
      sub.p0(j) = du * du * (1.001 * gp + 0.001 * gm + rho(0) / range(j));
      sub.q0(j) = dl * dl * (0.001 * gp + 1.001 * gm + rho(0) / range(j));
      sub.r0 -= sub.p0(j) / du + sub.q0(j) / dl;
      for (int i = 0; i < m; ++i) {
        const double hp = std::max(eval.dg(i, j), 0.0), hm = std::max(-eval.dg(i, j), 0.0);
        sub.P(i, j) = du * du * (1.001 * hp + 0.001 * hm + rho(i + 1) / range(j));
        sub.Q(i, j) = dl * dl * (0.001 * hp + 1.001 * hm + rho(i + 1) / range(j));
      }
    }
    for (int i = 0; i < m; ++i) {
      double bi = -eval.g(i);
      for (int j = 0; j < n; ++j)
        bi += sub.P(i, j) / (upp(j) - x(j)) + sub.Q(i, j) / (x(j) - low(j));
      sub.b(i) = bi;
    }
  };

  Eigen::VectorXd x_next = x;
  int inner = 0;
  for (inner = 0; inner < opt.max_inner; ++inner) {
    build();
    x_next = detail::solve_subproblem(sub, opt.kkt_tol);
    const auto [f0_new, g_new] = values(x_next);

    // Conservatism measure d(x) weighting the distance from the expansion point.
    double dmeas = 0.0;
    for (int j = 0; j < n; ++j) {
      const double dx = x_next(j) - x(j);
      dmeas += (upp(j) - low(j)) * dx * dx /
               ((upp(j) - x_next(j)) * (x_next(j) - low(j)) * range(j));
    }
    dmeas = std::max(dmeas, 1e-30);

    bool conservative = true;
    const double ftil = sub.approx_objective(x_next);
    if (ftil < f0_new - opt.conservative_tol * (1.0 + std::abs(f0_new))) {
      rho(0) = std::min(10.0 * rho(0), 1.1 * (rho(0) + (f0_new - ftil) / dmeas));
      conservative = false;
    }
    for (int i = 0; i < m; ++i) {
      const double gtil = sub.approx_constraint(i, x_next);
      if (gtil < g_new(i) - opt.conservative_tol * (1.0 + std::abs(g_new(i)))) {
        rho(i + 1) = std::min(10.0 * rho(i + 1), 1.1 * (rho(i + 1) + (g_new(i) - gtil) / dmeas));
        conservative = false;
      }
    }
    if (conservative) {
      ++inner;
      break;
    }
  }

  state.x_prev2 = state.outer >= 1 ? state.x_prev : x;
  state.x_prev = x;
  state.low = low;
  state.upp = upp;
  ++state.outer;
  return {x_next, inner};
}

}  // namespace latopt

#endif  // LATOPT_GCMMA_HPP
