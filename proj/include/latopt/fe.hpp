#ifndef LATOPT_FE_HPP
#define LATOPT_FE_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <array>
#include <atomic>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "latopt/kelvin.hpp"

namespace latopt {

using SparseMat = Eigen::SparseMatrix<double>;
using ElemMatrix = Eigen::Matrix<double, 8, 8>;
using BMatrix = Eigen::Matrix<double, 3, 8>;

/// Regular grid of bilinear quads with 2 dofs per node.
/// Node (i,j) has index j*(nx+1)+i; element (ex,ey) has index ey*nx+ex and
/// counterclockwise corner nodes (ex,ey),(ex+1,ey),(ex+1,ey+1),(ex,ey+1).
struct QuadMesh {
  int nx = 0;
  int ny = 0;
  double elem_size = 1.0;
  std::vector<int> fixed_dofs;      // sorted, unique
  Eigen::VectorXd loads;            // nodal force vector, size num_dofs()

  QuadMesh() = default;
  QuadMesh(int nx_, int ny_, double h = 1.0) : nx(nx_), ny(ny_), elem_size(h) {
    if (nx < 1 || ny < 1) throw std::invalid_argument("QuadMesh: nx, ny must be >= 1");
    loads = Eigen::VectorXd::Zero(num_dofs());
  }

  int num_elements() const { return nx * ny; }
  int num_nodes() const { return (nx + 1) * (ny + 1); }
  int num_dofs() const { return 2 * num_nodes(); }
  int node_index(int i, int j) const { return j * (nx + 1) + i; }

  /// Global dof indices of element e in local corner order.
  std::array<int, 8> element_dofs(int e) const {
    const int ex = e % nx, ey = e / nx;
    const int n0 = node_index(ex, ey), n1 = node_index(ex + 1, ey);
    const int n2 = node_index(ex + 1, ey + 1), n3 = node_index(ex, ey + 1);
    return {2 * n0, 2 * n0 + 1, 2 * n1, 2 * n1 + 1,
            2 * n2, 2 * n2 + 1, 2 * n3, 2 * n3 + 1};
  }
};

namespace detail {

/// Gauss points per axis: returns abscissae/weights on [-1,1].
inline void gauss_rule(int n, std::array<double, 2>& pts, std::array<double, 2>& wts) {
  if (n == 1) {
    pts = {0.0, 0.0};
    wts = {2.0, 0.0};
  } else if (n == 2) {
    const double g = 1.0 / std::sqrt(3.0);
    pts = {-g, g};
    wts = {1.0, 1.0};
  } else {
    throw std::invalid_argument("gauss_rule: n_gauss must be 1 or 2");
  }
}

}  // namespace detail

/// Kelvin strain-displacement matrix of the bilinear quad at reference
/// coordinates (xi, eta) in [-1,1]^2 for a square element of side h.
inline BMatrix b_matrix(double xi, double eta, double h) {
  // dN/dxi, dN/deta for the CCW node order.
  const double dndxi[4] = {-(1 - eta) / 4, (1 - eta) / 4, (1 + eta) / 4, -(1 + eta) / 4};
  const double dndeta[4] = {-(1 - xi) / 4, -(1 + xi) / 4, (1 + xi) / 4, (1 - xi) / 4};
  const double jinv = 2.0 / h;  // square element, diagonal Jacobian
  BMatrix B = BMatrix::Zero();
  for (int a = 0; a < 4; ++a) {
    const double dx = dndxi[a] * jinv;
    const double dy = dndeta[a] * jinv;
    B(0, 2 * a) = dx;
    B(1, 2 * a + 1) = dy;
    B(2, 2 * a) = dy / kSqrt2;
    B(2, 2 * a + 1) = dx / kSqrt2;
  }
  return B;
}

/// Element stiffness K_e = sum_g w_g B_g^T D B_g det(J). Symmetric PSD with a
/// 3-dimensional rigid-body nullspace when D is positive definite. A clearly
/// indefinite D is reported once (iterates may graze the cone boundary) and
/// the computation proceeds.
inline ElemMatrix element_stiffness(const KelvinMatrix& D, double elem_size, int n_gauss = 2) {
  if (smallest_eigenvalue(D) < -1e-10 * (1.0 + std::abs(D.trace()))) {
    static std::atomic<bool> warned{false};
    if (!warned.exchange(true))
      std::fprintf(stderr, "element_stiffness: indefinite material tensor encountered\n");
  }
  std::array<double, 2> pts, wts;
  detail::gauss_rule(n_gauss, pts, wts);
  const double detj = elem_size * elem_size / 4.0;
  ElemMatrix K = ElemMatrix::Zero();
  for (int gx = 0; gx < n_gauss; ++gx)
    for (int gy = 0; gy < n_gauss; ++gy) {
      const BMatrix B = b_matrix(pts[gx], pts[gy], elem_size);
      K.noalias() += (wts[gx] * wts[gy] * detj) * (B.transpose() * D * B);
    }
  return 0.5 * (K + K.transpose());
}

/// Element geometric (stress) stiffness for a constant Kelvin stress state,
/// assembled with the buckling sign convention: G_e = -int grad(N)^T S grad(N),
/// identical blocks for the u and v displacement components. Compressive
/// stress states produce directions with positive curvature.
inline ElemMatrix element_geometric_stiffness(const StressState& s, double elem_size,
                                              int n_gauss = 2) {
  std::array<double, 2> pts, wts;
  detail::gauss_rule(n_gauss, pts, wts);
  const Eigen::Matrix2d S = stress_matrix(s);
  const double detj = elem_size * elem_size / 4.0;
  const double jinv = 2.0 / elem_size;
  Eigen::Matrix4d H = Eigen::Matrix4d::Zero();
  for (int gx = 0; gx < n_gauss; ++gx)
    for (int gy = 0; gy < n_gauss; ++gy) {
      const double xi = pts[gx], eta = pts[gy];
      const double dndxi[4] = {-(1 - eta) / 4, (1 - eta) / 4, (1 + eta) / 4, -(1 + eta) / 4};
      const double dndeta[4] = {-(1 - xi) / 4, -(1 + xi) / 4, (1 + xi) / 4, (1 - xi) / 4};
      Eigen::Matrix<double, 2, 4> Gm;
      for (int a = 0; a < 4; ++a) {
        Gm(0, a) = dndxi[a] * jinv;
        Gm(1, a) = dndeta[a] * jinv;
      }
      H.noalias() += (wts[gx] * wts[gy] * detj) * (Gm.transpose() * S * Gm);
    }
  ElemMatrix G = ElemMatrix::Zero();
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      for (int c = 0; c < 2; ++c) G(2 * a + c, 2 * b + c) = -H(a, b);
  return G;
}

/// Assemble the global stiffness from a per-element tensor field.
inline SparseMat assemble(const QuadMesh& mesh, const std::vector<KelvinMatrix>& field,
                          int n_gauss = 2) {
  if (static_cast<int>(field.size()) != mesh.num_elements())
    throw std::invalid_argument("assemble: field length must equal element count");
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<size_t>(mesh.num_elements()) * 64);
  for (int e = 0; e < mesh.num_elements(); ++e) {
    const ElemMatrix Ke = element_stiffness(field[e], mesh.elem_size, n_gauss);
    const auto dofs = mesh.element_dofs(e);
    for (int a = 0; a < 8; ++a)
      for (int b = 0; b < 8; ++b) trips.emplace_back(dofs[a], dofs[b], Ke(a, b));
  }
  SparseMat K(mesh.num_dofs(), mesh.num_dofs());
  K.setFromTriplets(trips.begin(), trips.end());
  return K;
}

struct SolverError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Solve K u = f with the given dofs fixed to zero. The reduced system must be
/// SPD; a singular factorization reports the offending reduced dof.
inline Eigen::VectorXd solve_dirichlet(const SparseMat& K, const Eigen::VectorXd& f,
                                       const std::vector<int>& fixed) {
  const int n = static_cast<int>(K.rows());
  std::vector<char> is_fixed(n, 0);
  for (int d : fixed) {
    if (d < 0 || d >= n) throw std::invalid_argument("solve_dirichlet: fixed dof out of range");
    is_fixed[d] = 1;
  }
  std::vector<int> free_of_full(n, -1);
  std::vector<int> full_of_free;
  full_of_free.reserve(n);
  for (int d = 0; d < n; ++d)
    if (!is_fixed[d]) {
      free_of_full[d] = static_cast<int>(full_of_free.size());
      full_of_free.push_back(d);
    }
  const int nf = static_cast<int>(full_of_free.size());

  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(K.nonZeros());
  for (int k = 0; k < K.outerSize(); ++k)
    for (SparseMat::InnerIterator it(K, k); it; ++it) {
      const int r = free_of_full[static_cast<int>(it.row())];
      const int c = free_of_full[static_cast<int>(it.col())];
      if (r >= 0 && c >= 0) trips.emplace_back(r, c, it.value());
    }
  SparseMat Kr(nf, nf);
  Kr.setFromTriplets(trips.begin(), trips.end());
  Eigen::VectorXd fr(nf);
  for (int i = 0; i < nf; ++i) fr(i) = f(full_of_free[i]);

  Eigen::SimplicialLDLT<SparseMat> ldlt(Kr);
  if (ldlt.info() != Eigen::Success)
    throw SolverError("solve_dirichlet: factorization failed (zero-energy mode)");
  const Eigen::VectorXd d = ldlt.vectorD();
  int worst = 0;
  for (int i = 1; i < nf; ++i)
    if (d(i) < d(worst)) worst = i;
  if (nf > 0 && !(d(worst) > 0.0)) {
    throw SolverError("solve_dirichlet: singular reduced system, zero-energy mode at dof " +
                      std::to_string(full_of_free[worst]));
  }
  const Eigen::VectorXd ur = ldlt.solve(fr);
  const double fnorm = fr.norm();
  if (fnorm > 0.0 && (Kr * ur - fr).norm() > 1e-9 * fnorm)
    throw SolverError("solve_dirichlet: residual check failed");

  Eigen::VectorXd u = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < nf; ++i) u(full_of_free[i]) = ur(i);
  return u;
}

/// Periodic master/slave identification for a micro cell grid: nodes on the
/// right and top edges are slaved to the opposite edge, so the reduced space
/// has exactly 2*nx*ny dofs.
struct PeriodicMap {
  int nx = 0, ny = 0;
  std::vector<int> reduced_of_full;  // full dof -> reduced dof
  int reduced_dofs = 0;

  /// Expand a reduced vector to the full periodic grid.
  Eigen::VectorXd expand(const Eigen::VectorXd& vr) const {
    Eigen::VectorXd v(reduced_of_full.size());
    for (size_t d = 0; d < reduced_of_full.size(); ++d) v(d) = vr(reduced_of_full[d]);
    return v;
  }

  /// Restrict a full vector to reduced entries (master values).
  Eigen::VectorXd reduce(const Eigen::VectorXd& v) const {
    Eigen::VectorXd vr(reduced_dofs);
    for (size_t d = 0; d < reduced_of_full.size(); ++d) vr(reduced_of_full[d]) = v(d);
    return vr;
  }
};

inline PeriodicMap periodic_reduce(const QuadMesh& grid) {
  PeriodicMap map;
  map.nx = grid.nx;
  map.ny = grid.ny;
  map.reduced_dofs = 2 * grid.nx * grid.ny;
  map.reduced_of_full.assign(grid.num_dofs(), -1);
  for (int j = 0; j <= grid.ny; ++j)
    for (int i = 0; i <= grid.nx; ++i) {
      const int master = (j % grid.ny) * grid.nx + (i % grid.nx);
      const int full = grid.node_index(i, j);
      map.reduced_of_full[2 * full] = 2 * master;
      map.reduced_of_full[2 * full + 1] = 2 * master + 1;
    }
  return map;
}

}  // namespace latopt

#endif  // LATOPT_FE_HPP
