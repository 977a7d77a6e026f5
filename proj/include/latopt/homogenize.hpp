#ifndef LATOPT_HOMOGENIZE_HPP
#define LATOPT_HOMOGENIZE_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <array>
#include <stdexcept>
#include <vector>

#include "latopt/fe.hpp"
#include "latopt/kelvin.hpp"
#include "latopt/lattice.hpp"

namespace latopt {

/// Periodic micro cell: a density grid with modified-SIMP interpolation of a
/// solid base material, E(rho) = E_min + rho^p (1 - E_min) in units of E0.
struct MicroCell {
  DensityGrid grid;
  KelvinMatrix base = base_material(1.0, 0.3);
  double penal = 3.0;
  double E_min = 1e-3;

  void validate() const {
    if (grid.N < 1) throw std::invalid_argument("MicroCell: empty grid");
    if (!(penal >= 1.0)) throw std::invalid_argument("MicroCell: penal must be >= 1");
    if (!(E_min > 0.0 && E_min < 1.0))
      throw std::invalid_argument("MicroCell: E_min must be in (0,1)");
  }

  double stiffness_factor(double rho) const {
    return E_min + std::pow(rho, penal) * (1.0 - E_min);
  }
};

/// Element displacement fields reproducing the three Kelvin unit test strains
/// on a unit square element (local corner coordinates).
inline Eigen::Matrix<double, 8, 3> unit_strain_fields() {
  Eigen::Matrix<double, 8, 3> chi0 = Eigen::Matrix<double, 8, 3>::Zero();
  const double xs[4] = {0, 1, 1, 0}, ys[4] = {0, 0, 1, 1};
  for (int a = 0; a < 4; ++a) {
    chi0(2 * a, 0) = xs[a];                // e11 = 1
    chi0(2 * a + 1, 1) = ys[a];            // e22 = 1
    chi0(2 * a, 2) = ys[a] / kSqrt2;       // sqrt(2) e12 = 1
    chi0(2 * a + 1, 2) = xs[a] / kSqrt2;
  }
  return chi0;
}

struct CellSolution {
  int N = 0;
  PeriodicMap map;
  Eigen::MatrixXd chi;        // reduced dofs x 3, fluctuation fields
  KelvinMatrix DH = KelvinMatrix::Zero();
  std::vector<double> Efac;   // per-element stiffness factor E(rho)

  /// Element fluctuation displacements for the three load cases (8 x 3).
  Eigen::Matrix<double, 8, 3> element_chi(const QuadMesh& mesh, int e) const {
    const auto dofs = mesh.element_dofs(e);
    Eigen::Matrix<double, 8, 3> X;
    for (int a = 0; a < 8; ++a) X.row(a) = chi.row(map.reduced_of_full[dofs[a]]);
    return X;
  }
};

namespace detail {

struct CellOperator {
  QuadMesh mesh;
  PeriodicMap map;
  ElemMatrix k0;
  Eigen::Matrix<double, 8, 3> chi0;
  Eigen::Matrix<double, 8, 3> f0;  // consistent nodal loads of the unit strains

  explicit CellOperator(const MicroCell& cell)
      : mesh(cell.grid.N, cell.grid.N, 1.0),
        map(periodic_reduce(mesh)),
        k0(element_stiffness(cell.base, 1.0)),
        chi0(unit_strain_fields()),
        f0(k0 * unit_strain_fields()) {}
};

/// Assemble the periodic-reduced stiffness with node (0,0) pinned.
inline SparseMat assemble_reduced(const CellOperator& op, const MicroCell& cell) {
  const int nred = op.map.reduced_dofs;
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<size_t>(cell.grid.N) * cell.grid.N * 64 + 2);
  for (int e = 0; e < op.mesh.num_elements(); ++e) {
    const double Ee = cell.stiffness_factor(cell.grid.rho(e));
    const auto dofs = op.mesh.element_dofs(e);
    for (int a = 0; a < 8; ++a) {
      const int ra = op.map.reduced_of_full[dofs[a]];
      if (ra < 2) continue;  // pinned node
      for (int b = 0; b < 8; ++b) {
        const int rb = op.map.reduced_of_full[dofs[b]];
        if (rb < 2) continue;
        trips.emplace_back(ra, rb, Ee * op.k0(a, b));
      }
    }
  }
  trips.emplace_back(0, 0, 1.0);
  trips.emplace_back(1, 1, 1.0);
  SparseMat K(nred, nred);
  K.setFromTriplets(trips.begin(), trips.end());
  return K;
}

}  // namespace detail

/// Consistent nodal loads of the three unit test strains on the periodic
/// reduced space (pinned dofs zeroed).
inline Eigen::MatrixXd test_strain_loads(const MicroCell& cell) {
  cell.validate();
  const detail::CellOperator op(cell);
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(op.map.reduced_dofs, 3);
  for (int e = 0; e < op.mesh.num_elements(); ++e) {
    const double Ee = cell.stiffness_factor(cell.grid.rho(e));
    const auto dofs = op.mesh.element_dofs(e);
    for (int a = 0; a < 8; ++a) {
      const int ra = op.map.reduced_of_full[dofs[a]];
      if (ra < 2) continue;
      f.row(ra) += Ee * op.f0.row(a);
    }
  }
  return f;
}

/// Solve the three periodic cell problems and build the homogenized tensor
/// from element mutual energies of the superimposed fields.
inline CellSolution solve_cell(const MicroCell& cell) {
  cell.validate();
  const detail::CellOperator op(cell);
  const int N = cell.grid.N;

  const SparseMat K = detail::assemble_reduced(op, cell);
  Eigen::SimplicialLDLT<SparseMat> ldlt(K);
  if (ldlt.info() != Eigen::Success)
    throw SolverError("solve_cell: periodic stiffness factorization failed");
  const Eigen::MatrixXd f = test_strain_loads(cell);
  CellSolution sol;
  sol.N = N;
  sol.map = op.map;
  sol.chi = ldlt.solve(f);

  sol.Efac.resize(op.mesh.num_elements());
  KelvinMatrix DH = KelvinMatrix::Zero();
  for (int e = 0; e < op.mesh.num_elements(); ++e) {
    const double Ee = cell.stiffness_factor(cell.grid.rho(e));
    sol.Efac[e] = Ee;
    const Eigen::Matrix<double, 8, 3> uA = op.chi0 - sol.element_chi(op.mesh, e);
    DH.noalias() += Ee * (uA.transpose() * op.k0 * uA);
  }
  DH /= static_cast<double>(N) * N;  // |Y| in element units
  sol.DH = 0.5 * (DH + DH.transpose());
  return sol;
}

/// Analytic d DH / d rho_e for every element (self-adjoint cell problems).
inline std::vector<KelvinMatrix> dh_sensitivity(const MicroCell& cell, const CellSolution& sol) {
  cell.validate();
  const detail::CellOperator op(cell);
  const int N = cell.grid.N;
  if (sol.N != N) throw std::invalid_argument("dh_sensitivity: stale cell solution");
  std::vector<KelvinMatrix> sens(op.mesh.num_elements());
  const double area = static_cast<double>(N) * N;
  for (int e = 0; e < op.mesh.num_elements(); ++e) {
    const double rho = cell.grid.rho(e);
    const double dE = cell.penal * std::pow(rho, cell.penal - 1.0) * (1.0 - cell.E_min);
    const Eigen::Matrix<double, 8, 3> uA = op.chi0 - sol.element_chi(op.mesh, e);
    const KelvinMatrix S = (dE / area) * (uA.transpose() * op.k0 * uA);
    sens[e] = 0.5 * (S + S.transpose());
  }
  return sens;
}

}  // namespace latopt

#endif  // LATOPT_HOMOGENIZE_HPP
