#ifndef LATOPT_BUCKLING_HPP
#define LATOPT_BUCKLING_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>
#include <random>
#include <stdexcept>
#include <vector>

#include "latopt/fe.hpp"
#include "latopt/homogenize.hpp"
#include "latopt/kelvin.hpp"

namespace latopt {

/// Modified SIMP pair: (factor for K and f, factor for G), in units of E0.
/// The geometric factor has no stiffness floor, which is what suppresses
/// spurious buckling modes in void regions.
inline std::pair<double, double> simp_interpolate(double rho, double penal, double E_min) {
  const double rp = std::pow(rho, penal);
  return {E_min + rp * (1.0 - E_min), rp};
}

using StressField = std::vector<StressState>;

/// Element centroid stresses under the prescribed macro strain load,
/// sigma_e = rho^p * base * (ebar - B_c X_e ebar), with X_e the element
/// columns of the cell-problem solutions. The rho^p (no E_min) interpolation
/// is embedded here so the geometric stiffness vanishes in voids.
inline StressField stress_recovery(const MicroCell& cell, const CellSolution& sol,
                                   const StrainState& eps_bar) {
  cell.validate();
  if (sol.N != cell.grid.N) throw std::invalid_argument("stress_recovery: stale solution");
  const QuadMesh mesh(cell.grid.N, cell.grid.N, 1.0);
  const BMatrix Bc = b_matrix(0.0, 0.0, 1.0);
  StressField field(mesh.num_elements());
  for (int e = 0; e < mesh.num_elements(); ++e) {
    const Eigen::Matrix<double, 8, 3> Xe = sol.element_chi(mesh, e);
    const StrainState local = eps_bar - Bc * (Xe * eps_bar);
    field[e] = std::pow(cell.grid.rho(e), cell.penal) * (cell.base * local);
  }
  return field;
}

/// Periodic-reduced geometric stiffness with the pinned node's rows and
/// columns removed (zero diagonal there, unlike K's identity rows).
inline SparseMat geometric_stiffness(const StressField& stress, const QuadMesh& mesh,
                                     const PeriodicMap& map) {
  if (static_cast<int>(stress.size()) != mesh.num_elements())
    throw std::invalid_argument("geometric_stiffness: stress field size mismatch");
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(stress.size() * 64);
  for (int e = 0; e < mesh.num_elements(); ++e) {
    if (stress[e].cwiseAbs().maxCoeff() == 0.0) continue;
    const ElemMatrix Ge = element_geometric_stiffness(stress[e], mesh.elem_size);
    const auto dofs = mesh.element_dofs(e);
    for (int a = 0; a < 8; ++a) {
      const int ra = map.reduced_of_full[dofs[a]];
      if (ra < 2) continue;
      for (int b = 0; b < 8; ++b) {
        const int rb = map.reduced_of_full[dofs[b]];
        if (rb < 2) continue;
        trips.emplace_back(ra, rb, Ge(a, b));
      }
    }
  }
  SparseMat G(map.reduced_dofs, map.reduced_dofs);
  G.setFromTriplets(trips.begin(), trips.end());
  return G;
}

struct BucklingSpectrum {
  std::vector<double> load_factors;  // P_j, ascending, positive only
  std::vector<double> kappas;        // 1/P_j, descending
  Eigen::MatrixXd modes;             // columns matching load_factors, K-normalized
  double kappa_ks = 0.0;
  double c_b = 1.0;
  double mu_kappa = 0.0;
  bool any_positive = false;
};

/// KS aggregate of reciprocal load factors (kappas[0] must be the maximum):
/// kappa_ks = k1 + ln(sum exp(mu (k_j - k1)))/mu, and c_b = k1/kappa_ks.
inline std::pair<double, double> ks_eigen_aggregate(const std::vector<double>& kappas,
                                                    double mu_kappa) {
  if (kappas.empty()) throw std::invalid_argument("ks_eigen_aggregate: empty list");
  if (!(mu_kappa > 0.0)) throw std::invalid_argument("ks_eigen_aggregate: mu must be positive");
  const double k1 = kappas.front();
  double s = 0.0;
  for (double k : kappas) s += std::exp(mu_kappa * (k - k1));
  const double ks = k1 + std::log(s) / mu_kappa;
  return {ks, ks != 0.0 ? k1 / ks : 1.0};
}

/// f_P = P_lower * kappa_ks - 1; nonpositive iff the aggregated minimal
/// buckling load stays above P_lower (KS overestimates kappa_1, so the
/// constraint errs on the conservative side).
inline double buckling_constraint(double kappa_ks, double P_lower) {
  if (!(P_lower > 0.0)) throw std::invalid_argument("buckling_constraint: P_lower must be > 0");
  return P_lower * kappa_ks - 1.0;
}

/// Largest positive reciprocal load factors of the pencil G phi = kappa K phi.
///
/// A K-orthogonal subspace iteration on the shifted operator K^-1 G + c I
/// steers the block to the largest-kappa end regardless of spectrum sign
/// (c exceeds the spectral radius estimate). Each wanted Ritz pair is then
/// polished by deflated shift-invert steps at its Ritz value, which restores
/// fast convergence on clustered or repeated factors. Modes are K-normalized.
inline BucklingSpectrum buckling_eigens(const SparseMat& K, const SparseMat& G, int n_b,
                                        double residual_tol = 1e-12, int max_sweeps = 120) {
  if (n_b < 1) throw std::invalid_argument("buckling_eigens: n_b must be >= 1");
  const int n = static_cast<int>(K.rows());
  BucklingSpectrum out;
  if (G.nonZeros() == 0) return out;  // no stress, no buckling
  const double gnorm = Eigen::Map<const Eigen::VectorXd>(G.valuePtr(), G.nonZeros())
                           .cwiseAbs()
                           .maxCoeff();
  if (gnorm == 0.0) return out;

  Eigen::SimplicialLDLT<SparseMat> ldlt(K);
  if (ldlt.info() != Eigen::Success)
    throw SolverError("buckling_eigens: stiffness factorization failed");

  // Spectral radius estimate of K^-1 G by power iteration.
  std::mt19937 rng(12345);
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = nd(rng);
  v.normalize();
  double radius = 0.0;
  for (int it = 0; it < 24; ++it) {
    v = ldlt.solve(G * v);
    const double nv = v.norm();
    if (nv == 0.0) return out;
    radius = nv;
    v /= nv;
  }

  // Factor sigma*K - G with sigma above the spectrum; it is then positive
  // definite and (sigma K - G)^-1 K has its dominant eigenvalues exactly at
  // the largest-kappa end of the pencil.
  double sigma = 1.05 * radius + 1e-30;
  Eigen::SimplicialLDLT<SparseMat> slu;
  for (int attempt = 0;; ++attempt) {
    const SparseMat S = sigma * K - G;
    slu.compute(S);
    const bool pd = slu.info() == Eigen::Success && slu.vectorD().minCoeff() > 0.0;
    if (pd) break;
    if (attempt >= 12) throw SolverError("buckling_eigens: could not bracket the spectrum");
    sigma *= 1.5;
  }

  const int m = std::min(n, 2 * n_b + 4);
  Eigen::MatrixXd V(n, m);
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < n; ++i) V(i, j) = nd(rng);

  auto k_orthonormalize = [&](Eigen::MatrixXd& X) {
    const Eigen::MatrixXd M = X.transpose() * (K * X).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (M + M.transpose()));
    const double emax = es.eigenvalues().maxCoeff();
    Eigen::VectorXd inv_sqrt(X.cols());
    for (Eigen::Index i = 0; i < X.cols(); ++i) {
      const double li = std::max(es.eigenvalues()(i), 1e-14 * std::max(emax, 1e-300));
      inv_sqrt(i) = 1.0 / std::sqrt(li);
    }
    X = X * (es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose());
  };

  auto residual_ok = [&](double theta, const Eigen::VectorXd& phi, double tol) {
    const Eigen::VectorXd Kphi = K * phi;
    const double r = (G * phi - theta * Kphi).norm();
    return r <= tol * std::max(std::abs(theta) * Kphi.norm(), 1e-300);
  };

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(m);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    Eigen::MatrixXd Z(n, m);
    for (int j = 0; j < m; ++j) Z.col(j) = slu.solve(K * V.col(j));
    k_orthonormalize(Z);
    const Eigen::MatrixXd A = Z.transpose() * (G * Z).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (A + A.transpose()));
    Eigen::VectorXi order(m);
    for (int i = 0; i < m; ++i) order(i) = i;
    std::sort(order.data(), order.data() + m,
              [&](int a, int b) { return es.eigenvalues()(a) > es.eigenvalues()(b); });
    Eigen::MatrixXd W(m, m);
    for (int i = 0; i < m; ++i) {
      W.col(i) = es.eigenvectors().col(order(i));
      theta(i) = es.eigenvalues()(order(i));
    }
    V = Z * W;

    bool done = true;
    for (int j = 0; j < std::min(n_b, m); ++j) {
      if (theta(j) <= 0.0) continue;
      if (!residual_ok(theta(j), V.col(j), residual_tol)) {
        done = false;
        break;
      }
    }
    if (done && sweep > 1) break;
  }

  // Shift-invert polish of the wanted pairs. Deflation against the already
  // polished modes keeps repeated eigenvalues from collapsing onto one vector.
  Eigen::SparseLU<SparseMat> lu;
  double lu_sigma = std::numeric_limits<double>::quiet_NaN();
  const int wanted = std::min(n_b, m);
  for (int j = 0; j < wanted; ++j) {
    if (theta(j) <= 0.0) continue;
    for (int step = 0; step < 6 && !residual_ok(theta(j), V.col(j), residual_tol); ++step) {
      double sigma = theta(j);
      if (!(std::abs(sigma - lu_sigma) <= 1e-9 * std::abs(sigma))) {
        SparseMat S = G - sigma * K;
        lu.compute(S);
        if (lu.info() != Eigen::Success) {
          sigma *= 1.0 + 1e-10;
          S = G - sigma * K;
          lu.compute(S);
          if (lu.info() != Eigen::Success) break;  // keep the subspace result
        }
        lu_sigma = sigma;
      }
      Eigen::VectorXd x = lu.solve(K * V.col(j));
      if (!x.allFinite()) break;
      for (int i = 0; i < j; ++i) {
        const double proj = x.dot(K * V.col(i));
        x -= proj * V.col(i);
      }
      const double knorm = std::sqrt(std::max(x.dot(K * x), 1e-300));
      x /= knorm;
      const double new_theta = x.dot(G * x);
      if (!std::isfinite(new_theta)) break;
      V.col(j) = x;
      theta(j) = new_theta;
    }
  }

  // Collect positive factors in descending kappa order.
  std::vector<std::pair<double, int>> pos;
  const double kappa_floor = 1e-12 * std::max(1.0, std::abs(theta(0)));
  for (int j = 0; j < wanted; ++j)
    if (theta(j) > kappa_floor) pos.emplace_back(theta(j), j);
  std::sort(pos.rbegin(), pos.rend());
  if (pos.empty()) return out;

  out.any_positive = true;
  out.modes.resize(n, static_cast<int>(pos.size()));
  for (size_t j = 0; j < pos.size(); ++j) {
    out.kappas.push_back(pos[j].first);
    out.load_factors.push_back(1.0 / pos[j].first);
    out.modes.col(static_cast<int>(j)) = V.col(pos[j].second);
  }
  out.mu_kappa = 100.0 / out.kappas.front();
  const auto [ks, cb] = ks_eigen_aggregate(out.kappas, out.mu_kappa);
  out.kappa_ks = ks;
  out.c_b = cb;
  return out;
}

}  // namespace latopt

#endif  // LATOPT_BUCKLING_HPP
