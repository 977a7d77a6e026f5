#include <gtest/gtest.h>

#include "latopt/gcmma.hpp"

using namespace latopt;

namespace {

struct Runner {
  Eigen::VectorXd xmin, xmax, x;
  GcmmaState state;
  std::function<GcmmaEval(const Eigen::VectorXd&)> full_eval;
  int max_inner_seen = 0;

  Eigen::VectorXd run(int outers) {
    state.reset(static_cast<int>(x.size()));
    auto values = [&](const Eigen::VectorXd& xq) {
      const GcmmaEval e = full_eval(xq);
      return std::make_pair(e.f0, e.g);
    };
    for (int t = 0; t < outers; ++t) {
      const GcmmaEval e = full_eval(x);
      auto [x_next, inner] = gcmma_step(x, e, xmin, xmax, state, values);
      max_inner_seen = std::max(max_inner_seen, inner);
      x = x_next;
    }
    return x;
  }
};

}  // namespace

TEST(Gcmma, QuadraticConvergesToMinimizer) {
  Runner r;
  const Eigen::Vector2d a(0.3, -0.6);
  r.xmin = Eigen::Vector2d(-2.0, -2.0);
  r.xmax = Eigen::Vector2d(2.0, 2.0);
  r.x = Eigen::Vector2d(1.5, 1.5);
  r.full_eval = [&](const Eigen::VectorXd& x) {
    GcmmaEval e;
    e.f0 = (x - a).squaredNorm();
    e.df0 = 2.0 * (x - a);
    e.g.resize(0);
    e.dg.resize(0, x.size());
    return e;
  };
  const Eigen::VectorXd xs = r.run(30);
  EXPECT_LT((xs - a).norm(), 1e-6);
  EXPECT_LE(r.max_inner_seen, 20);
}

TEST(Gcmma, LinearProgramFindsVertex) {
  // min -x1 - 2 x2  s.t.  x1 + x2 <= 1,  0 <= x <= 1; optimum at (0, 1).
  Runner r;
  r.xmin = Eigen::Vector2d(0.0, 0.0);
  r.xmax = Eigen::Vector2d(1.0, 1.0);
  r.x = Eigen::Vector2d(0.2, 0.2);
  r.full_eval = [&](const Eigen::VectorXd& x) {
    GcmmaEval e;
    e.f0 = -x(0) - 2.0 * x(1);
    e.df0 = Eigen::Vector2d(-1.0, -2.0);
    e.g.resize(1);
    e.g(0) = x(0) + x(1) - 1.0;
    e.dg.resize(1, 2);
    e.dg << 1.0, 1.0;
    return e;
  };
  const Eigen::VectorXd xs = r.run(80);
  EXPECT_NEAR(xs(0), 0.0, 1e-4);
  EXPECT_NEAR(xs(1), 1.0, 1e-4);
  EXPECT_LE(r.max_inner_seen, 20);
}

TEST(Gcmma, StationaryInteriorPointStays) {
  Runner r;
  r.xmin = Eigen::Vector2d(-1.0, -1.0);
  r.xmax = Eigen::Vector2d(1.0, 1.0);
  r.x = Eigen::Vector2d(0.1, -0.2);
  const Eigen::Vector2d x0 = r.x;
  r.full_eval = [&](const Eigen::VectorXd& x) {
    GcmmaEval e;
    e.f0 = (x - x0).squaredNorm();  // gradient zero at the start point
    e.df0 = 2.0 * (x - x0);
    e.g.resize(0);
    e.dg.resize(0, 2);
    return e;
  };
  const Eigen::VectorXd xs = r.run(1);
  EXPECT_LT((xs - x0).norm(), 1e-9);
}

TEST(Gcmma, ConstraintViolationSettles) {
  // min (x1-1)^2 + (x2-1)^2 s.t. x1 + x2 <= 1: optimum (0.5, 0.5).
  Runner r;
  r.xmin = Eigen::Vector2d(0.0, 0.0);
  r.xmax = Eigen::Vector2d(1.0, 1.0);
  r.x = Eigen::Vector2d(0.9, 0.9);  // infeasible start
  r.full_eval = [&](const Eigen::VectorXd& x) {
    GcmmaEval e;
    e.f0 = (x(0) - 1.0) * (x(0) - 1.0) + (x(1) - 1.0) * (x(1) - 1.0);
    e.df0 = Eigen::Vector2d(2.0 * (x(0) - 1.0), 2.0 * (x(1) - 1.0));
    e.g.resize(1);
    e.g(0) = x(0) + x(1) - 1.0;
    e.dg.resize(1, 2);
    e.dg << 1.0, 1.0;
    return e;
  };
  r.state.reset(2);
  auto values = [&](const Eigen::VectorXd& xq) {
    const GcmmaEval e = r.full_eval(xq);
    return std::make_pair(e.f0, e.g);
  };
  bool was_feasible = false;
  for (int t = 0; t < 60; ++t) {
    const GcmmaEval e = r.full_eval(r.x);
    if (was_feasible) EXPECT_LE(e.g(0), 1e-6);
    if (e.g(0) <= 1e-6) was_feasible = true;
    auto [x_next, inner] = gcmma_step(r.x, e, r.xmin, r.xmax, r.state, values);
    r.x = x_next;
  }
  EXPECT_NEAR(r.x(0), 0.5, 1e-3);
  EXPECT_NEAR(r.x(1), 0.5, 1e-3);
}

TEST(Gcmma, AsymptoteExpansionOnMonotoneProgress) {
  Runner r;
  r.xmin = Eigen::VectorXd::Constant(1, -4.0);
  r.xmax = Eigen::VectorXd::Constant(1, 4.0);
  r.x = Eigen::VectorXd::Constant(1, -3.0);
  r.full_eval = [&](const Eigen::VectorXd& x) {
    GcmmaEval e;
    e.f0 = (x(0) - 3.0) * (x(0) - 3.0);
    e.df0 = Eigen::VectorXd::Constant(1, 2.0 * (x(0) - 3.0));
    e.g.resize(0);
    e.dg.resize(0, 1);
    return e;
  };
  r.state.reset(1);
  auto values = [&](const Eigen::VectorXd& xq) {
    const GcmmaEval e = r.full_eval(xq);
    return std::make_pair(e.f0, e.g);
  };
  std::vector<double> widths;
  for (int t = 0; t < 6; ++t) {
    const GcmmaEval e = r.full_eval(r.x);
    auto [x_next, inner] = gcmma_step(r.x, e, r.xmin, r.xmax, r.state, values);
    widths.push_back(r.state.upp(0) - r.state.low(0));
    r.x = x_next;
  }
  // The iterates move monotonically toward 3, so after the two startup
  // iterations the asymptote interval expands by the 1.2 factor.
  EXPECT_NEAR(widths[3] / widths[2], 1.2, 1e-9);
  EXPECT_NEAR(widths[4] / widths[3], 1.2, 1e-9);
}

TEST(Gcmma, RejectsNonFiniteGradients) {
  GcmmaState state;
  state.reset(1);
  GcmmaEval e;
  e.f0 = 0.0;
  e.df0 = Eigen::VectorXd::Constant(1, std::numeric_limits<double>::quiet_NaN());
  e.g.resize(0);
  e.dg.resize(0, 1);
  auto values = [](const Eigen::VectorXd&) {
    return std::make_pair(0.0, Eigen::VectorXd(0));
  };
  EXPECT_THROW(gcmma_step(Eigen::VectorXd::Zero(1), e, Eigen::VectorXd::Constant(1, -1.0),
                          Eigen::VectorXd::Constant(1, 1.0), state, values),
               std::invalid_argument);
}
