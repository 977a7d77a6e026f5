#ifndef LATOPT_KELVIN_HPP
#define LATOPT_KELVIN_HPP

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace latopt {

/// 2D elasticity tensor in Kelvin notation: a symmetric 3x3 matrix acting on
/// (e11, e22, sqrt(2) e12). The sqrt(2)/2 factors on the shear row/column make
/// the matrix Frobenius norm equal to the fourth-order tensor norm, so plain
/// matrix algebra (eigenvalues, projections, distances) is tensor-consistent.
using KelvinMatrix = Eigen::Matrix3d;

/// Strain vector (e11, e22, sqrt(2) e12) in Kelvin notation.
using StrainState = Eigen::Vector3d;
/// Stress vector (s11, s22, sqrt(2) s12) in Kelvin notation.
using StressState = Eigen::Vector3d;

inline constexpr double kSqrt2 = 1.4142135623730951;

/// Isotropic plane-stress material in Kelvin form.
/// Requires E > 0 and -1 < nu < 0.5.
inline KelvinMatrix base_material(double E, double nu) {
  if (!(E > 0.0)) throw std::invalid_argument("base_material: E must be positive");
  if (!(nu > -1.0 && nu < 0.5))
    throw std::invalid_argument("base_material: nu must be in (-1, 0.5)");
  const double c = E / (1.0 - nu * nu);
  const double G = E / (2.0 * (1.0 + nu));
  KelvinMatrix D;
  D << c, nu * c, 0.0,
       nu * c, c, 0.0,
       0.0, 0.0, 2.0 * G;
  return D;
}

/// Recover (E, nu) from an isotropic plane-stress Kelvin matrix.
inline std::pair<double, double> engineering_constants(const KelvinMatrix& D) {
  const double nu = D(0, 1) / D(0, 0);
  const double E = D(0, 0) * (1.0 - nu * nu);
  return {E, nu};
}

/// Hydrostatic projector P_h = h h^T with h = (1,1,0)/sqrt(2).
inline KelvinMatrix hydrostatic_projector() {
  Eigen::Vector3d h(1.0 / kSqrt2, 1.0 / kSqrt2, 0.0);
  return h * h.transpose();
}

/// Deviatoric projector P_d = I - P_h.
inline KelvinMatrix deviatoric_projector() {
  return KelvinMatrix::Identity() - hydrostatic_projector();
}

inline double frobenius_inner(const KelvinMatrix& A, const KelvinMatrix& B) {
  return (A.array() * B.array()).sum();
}

inline bool is_symmetric(const KelvinMatrix& D, double tol = 1e-12) {
  return (D - D.transpose()).cwiseAbs().maxCoeff() <= tol;
}

inline double smallest_eigenvalue(const KelvinMatrix& D) {
  Eigen::SelfAdjointEigenSolver<KelvinMatrix> es(D, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

/// PSD check used for material tensors (smallest eigenvalue >= -tol).
inline bool is_material_tensor(const KelvinMatrix& D, double tol = 1e-10) {
  return is_symmetric(D, 1e-10) && smallest_eigenvalue(D) >= -tol;
}

/// Von Mises equivalent of a Kelvin stress vector (plane stress).
inline double von_mises(const StressState& s) {
  const double s11 = s(0), s22 = s(1), s12 = s(2) / kSqrt2;
  return std::sqrt(s11 * s11 - s11 * s22 + s22 * s22 + 3.0 * s12 * s12);
}

/// Kelvin stress vector as a 2x2 Cauchy stress matrix.
inline Eigen::Matrix2d stress_matrix(const StressState& s) {
  Eigen::Matrix2d m;
  const double s12 = s(2) / kSqrt2;
  m << s(0), s12,
       s12, s(1);
  return m;
}

}  // namespace latopt

#endif  // LATOPT_KELVIN_HPP
