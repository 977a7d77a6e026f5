#ifndef LATOPT_FMO_HPP
#define LATOPT_FMO_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "latopt/fe.hpp"
#include "latopt/kelvin.hpp"

namespace latopt {

enum class MaterialClass { Free, Orthotropic, Isotropic };

struct FmoProblem {
  QuadMesh mesh;
  double T0 = 0.0;      // global trace budget
  double T_low = 0.0;   // element trace lower bound
  double T_high = 0.0;  // element trace upper bound
  double delta = 0.0;   // eigenvalue floor D - delta*I >= 0
  MaterialClass material_class = MaterialClass::Free;
  int max_iterations = 200;
  double rel_tol = 1e-6;
  int tol_window = 5;
};

struct FmoSolution {
  std::vector<KelvinMatrix> field;            // per element
  std::vector<KelvinMatrix> representatives;  // per variable group
  Eigen::VectorXd displacement;
  double compliance = 0.0;
  std::vector<double> history;  // compliance per iteration
  bool converged = false;
};

struct FmoInfeasibleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Frobenius-nearest tensor in the requested material class. Orthotropic
/// zeroes the normal-shear couplings; isotropic projects onto the span of the
/// hydrostatic and deviatoric Kelvin projectors.
inline KelvinMatrix project_to_class(const KelvinMatrix& D, MaterialClass cls) {
  KelvinMatrix S = 0.5 * (D + D.transpose());
  switch (cls) {
    case MaterialClass::Free:
      return S;
    case MaterialClass::Orthotropic:
      S(0, 2) = S(2, 0) = 0.0;
      S(1, 2) = S(2, 1) = 0.0;
      return S;
    case MaterialClass::Isotropic: {
      const KelvinMatrix Ph = hydrostatic_projector();
      const KelvinMatrix Pd = deviatoric_projector();
      const double kh = frobenius_inner(S, Ph);        // |Ph|_F^2 = 1
      const double kd = frobenius_inner(S, Pd) / 2.0;  // |Pd|_F^2 = 2
      return kh * Ph + kd * Pd;
    }
  }
  return S;
}

/// Maximizer of eps^T D eps over {D in class, D - delta*I PSD,
/// T_low <= Tr(D) <= T_high}. Closed form per class; a zero strain returns
/// the minimum-trace isotropic tensor.
inline KelvinMatrix element_update(const StrainState& eps, double T_low, double T_high,
                                   double delta, MaterialClass cls) {
  if (!(T_low <= T_high) || !(3.0 * delta <= T_low + 1e-15) || delta < 0.0)
    throw std::invalid_argument("element_update: inconsistent bounds");
  const KelvinMatrix minimal = (T_low / 3.0) * KelvinMatrix::Identity();
  const double n2 = eps.squaredNorm();
  if (n2 == 0.0) return minimal;

  switch (cls) {
    case MaterialClass::Free: {
      const StrainState u = eps / std::sqrt(n2);
      return delta * KelvinMatrix::Identity() + (T_high - 3.0 * delta) * (u * u.transpose());
    }
    case MaterialClass::Isotropic: {
      const KelvinMatrix Ph = hydrostatic_projector();
      const KelvinMatrix Pd = deviatoric_projector();
      const double ah = eps.dot(Ph * eps);
      const double ad = eps.dot(Pd * eps);
      double x, y;  // hydrostatic / deviatoric eigenvalues
      if (ad > 2.0 * ah) {
        x = delta;
        y = 0.5 * (T_high - delta);
      } else {
        x = T_high - 2.0 * delta;
        y = delta;
      }
      return x * Ph + y * Pd;
    }
    case MaterialClass::Orthotropic: {
      const Eigen::Vector2d e2 = eps.head<2>();
      const double a2 = e2.squaredNorm();
      const double a33 = eps(2) * eps(2);
      KelvinMatrix D = delta * KelvinMatrix::Identity();
      if (a2 >= a33) {
        const Eigen::Vector2d u = e2 / std::sqrt(a2);
        D.topLeftCorner<2, 2>() += (T_high - 3.0 * delta) * (u * u.transpose());
      } else {
        D(2, 2) = T_high - 2.0 * delta;
      }
      return D;
    }
  }
  return minimal;
}

/// Compliance f^T u of a given tensor field, with the energy identity
/// u^T K u cross-checked to 1e-9 relative.
inline double compliance(const std::vector<KelvinMatrix>& field, const QuadMesh& mesh) {
  const SparseMat K = assemble(mesh, field);
  const Eigen::VectorXd u = solve_dirichlet(K, mesh.loads, mesh.fixed_dofs);
  const double c_force = mesh.loads.dot(u);
  const double c_energy = u.dot(K * u);
  if (std::abs(c_force - c_energy) > 1e-9 * std::max(1.0, std::abs(c_force)))
    throw SolverError("compliance: f^T u and u^T K u disagree");
  return c_force;
}

namespace detail {

/// One variable group of the tensor update: channel weights w_i with trace
/// multipliers c_i, a reconstruction basis, and the eigenvalue floor. The
/// group's complementary energy sum_i w_i/d_i is minimized over channel values
/// d_i >= floor under a trace allocation sum_i c_i d_i = t.
struct TensorChannels {
  int n = 0;
  double w[3] = {0, 0, 0};
  double c[3] = {1, 1, 1};
  Eigen::Matrix3d basis_v;     // eigenvectors (Free/Orthotropic block)
  MaterialClass cls = MaterialClass::Free;

  double total_weight() const { return w[0] + w[1] + (n > 2 ? w[2] : 0.0); }

  /// Channel values minimizing sum w_i/d_i + nu * sum c_i d_i, d_i >= floor.
  void channel_values_for_multiplier(double nu, double floor, double* d) const {
    for (int i = 0; i < n; ++i) {
      if (w[i] <= 0.0)
        d[i] = floor;
      else if (nu <= 0.0)
        d[i] = std::numeric_limits<double>::infinity();
      else
        d[i] = std::max(floor, std::sqrt(w[i] / (c[i] * nu)));
    }
  }

  /// Exact waterfill at fixed trace t: minimize sum w_i/d_i subject to
  /// sum c_i d_i = t, d_i >= floor. Enumerates floor-clamp patterns.
  void waterfill_at_trace(double t, double floor, double* d) const {
    double best = std::numeric_limits<double>::infinity();
    double bestd[3] = {floor, floor, floor};
    bool found = false;
    for (int mask = 0; mask < (1 << n); ++mask) {
      double budget = t;
      double s = 0.0;
      bool ok = true;
      for (int i = 0; i < n; ++i) {
        const bool clamped = (mask >> i) & 1;
        if (!clamped && w[i] <= 0.0) { ok = false; break; }  // zero channels stay at floor
        if (clamped)
          budget -= c[i] * floor;
        else
          s += std::sqrt(c[i] * w[i]);
      }
      if (!ok) continue;
      double cand[3];
      double value = 0.0;
      if (s > 0.0) {
        if (budget <= 0.0) continue;
        for (int i = 0; i < n; ++i) {
          const bool clamped = (mask >> i) & 1;
          cand[i] = clamped ? floor : budget * std::sqrt(w[i] / c[i]) / s;
          if (!clamped && cand[i] < floor - 1e-14 * std::max(1.0, floor)) { ok = false; break; }
        }
        if (!ok) continue;
      } else {
        // All channels clamped (or zero-weight): distribute the full trace
        // evenly so the result is the minimal isotropic-leaning tensor.
        const double ctot = std::accumulate(c, c + n, 0.0);
        for (int i = 0; i < n; ++i) cand[i] = std::max(floor, t / ctot);
      }
      for (int i = 0; i < n; ++i)
        if (w[i] > 0.0) value += w[i] / cand[i];
      if (!found || value < best - 1e-15 * std::max(1.0, std::abs(value))) {
        best = value;
        std::copy(cand, cand + n, bestd);
        found = true;
      }
    }
    if (!found)
      for (int i = 0; i < n; ++i) bestd[i] = floor;
    std::copy(bestd, bestd + n, d);
  }

  KelvinMatrix reconstruct(const double* d) const {
    switch (cls) {
      case MaterialClass::Free:
        return basis_v * Eigen::Vector3d(d[0], d[1], d[2]).asDiagonal() * basis_v.transpose();
      case MaterialClass::Orthotropic: {
        KelvinMatrix D = KelvinMatrix::Zero();
        const Eigen::Matrix2d V2 = basis_v.topLeftCorner<2, 2>();
        D.topLeftCorner<2, 2>() = V2 * Eigen::Vector2d(d[0], d[1]).asDiagonal() * V2.transpose();
        D(2, 2) = d[2];
        return D;
      }
      case MaterialClass::Isotropic:
        return d[0] * hydrostatic_projector() + d[1] * deviatoric_projector();
    }
    return KelvinMatrix::Identity();
  }
};

inline TensorChannels make_channels(const KelvinMatrix& stress_moment, MaterialClass cls) {
  TensorChannels ch;
  ch.cls = cls;
  switch (cls) {
    case MaterialClass::Free: {
      ch.n = 3;
      Eigen::SelfAdjointEigenSolver<KelvinMatrix> es(stress_moment);
      for (int i = 0; i < 3; ++i) ch.w[i] = std::max(0.0, es.eigenvalues()(i));
      ch.basis_v = es.eigenvectors();
      break;
    }
    case MaterialClass::Orthotropic: {
      ch.n = 3;
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(
          stress_moment.topLeftCorner<2, 2>());
      ch.w[0] = std::max(0.0, es.eigenvalues()(0));
      ch.w[1] = std::max(0.0, es.eigenvalues()(1));
      ch.w[2] = std::max(0.0, stress_moment(2, 2));
      ch.basis_v.setIdentity();
      ch.basis_v.topLeftCorner<2, 2>() = es.eigenvectors();
      break;
    }
    case MaterialClass::Isotropic: {
      ch.n = 2;
      ch.c[0] = 1.0;
      ch.c[1] = 2.0;
      ch.w[0] = std::max(0.0, frobenius_inner(stress_moment, hydrostatic_projector()));
      ch.w[1] = std::max(0.0, frobenius_inner(stress_moment, deviatoric_projector()));
      ch.basis_v.setIdentity();
      break;
    }
  }
  return ch;
}

/// Trace given to a group under budget multiplier nu (the group's complementary
/// energy is decreasing in trace, so the unconstrained value is clamped to the
/// element bounds).
inline double trace_for_multiplier(const TensorChannels& ch, double nu_eff, double T_low,
                                   double T_high, double floor) {
  if (ch.total_weight() <= 0.0) return T_low;
  double d[3];
  ch.channel_values_for_multiplier(nu_eff, floor, d);
  double t = 0.0;
  for (int i = 0; i < ch.n; ++i) t += ch.c[i] * d[i];
  return std::clamp(t, T_low, T_high);
}

}  // namespace detail

/// Free material optimization with tensor variables shared across groups.
/// labels maps each element to its group in [0, n_groups); group tensors obey
/// the element trace bounds while the global budget counts every member copy.
///
/// The solver alternates an equilibrium solve with an exact minimization of the
/// complementary energy sum_e <D_e^{-1}, M_e> over the feasible tensor set,
/// where M_e is the Gauss-point stress moment of the current iterate. Both
/// half steps minimize the same jointly convex functional, so the compliance
/// history is non-increasing. The global budget is enforced by bisection on a
/// scalar multiplier of the total trace.
inline FmoSolution solve_fmo_grouped(const FmoProblem& problem, const std::vector<int>& labels,
                                     int n_groups,
                                     const std::vector<KelvinMatrix>* warm_start = nullptr) {
  const QuadMesh& mesh = problem.mesh;
  const int M = mesh.num_elements();
  const double T0 = problem.T0, Tl = problem.T_low, Th = problem.T_high, dlt = problem.delta;
  if (static_cast<int>(labels.size()) != M)
    throw std::invalid_argument("solve_fmo_grouped: labels length mismatch");
  if (n_groups < 1) throw std::invalid_argument("solve_fmo_grouped: n_groups must be >= 1");
  if (!(Tl >= 0.0) || !(Tl <= Th) || dlt < 0.0)
    throw FmoInfeasibleError("fmo: require 0 <= T_low <= T_high and delta >= 0");
  if (3.0 * dlt > Tl + 1e-12 * std::max(1.0, Tl))
    throw FmoInfeasibleError("fmo: eigenvalue floor exceeds trace lower bound (empty element set)");
  if (M * Tl > T0 * (1.0 + 1e-12))
    throw FmoInfeasibleError("fmo: global budget below the sum of element lower bounds");
  if (T0 > M * Th * (1.0 + 1e-12))
    throw FmoInfeasibleError("fmo: global budget exceeds the sum of element upper bounds");

  std::vector<double> mult(n_groups, 0.0);
  for (int e = 0; e < M; ++e) {
    if (labels[e] < 0 || labels[e] >= n_groups)
      throw std::invalid_argument("solve_fmo_grouped: label out of range");
    mult[labels[e]] += 1.0;
  }
  for (int k = 0; k < n_groups; ++k)
    if (mult[k] == 0.0) throw std::invalid_argument("solve_fmo_grouped: empty group");

  // Initial iterate: uniform isotropic tensors at the per-element budget.
  std::vector<KelvinMatrix> reps(n_groups);
  const double t_init = std::clamp(T0 / M, Tl, Th);
  for (int k = 0; k < n_groups; ++k) reps[k] = (t_init / 3.0) * KelvinMatrix::Identity();
  if (warm_start) {
    if (static_cast<int>(warm_start->size()) != n_groups)
      throw std::invalid_argument("solve_fmo_grouped: warm start size mismatch");
    reps = *warm_start;
  }

  // Free-dof numbering and a reusable factorization pattern.
  const int ndof = mesh.num_dofs();
  std::vector<char> is_fixed(ndof, 0);
  for (int d : mesh.fixed_dofs) is_fixed.at(d) = 1;
  std::vector<int> free_of_full(ndof, -1);
  int nf = 0;
  for (int d = 0; d < ndof; ++d)
    if (!is_fixed[d]) free_of_full[d] = nf++;
  Eigen::VectorXd fr(nf);
  for (int d = 0; d < ndof; ++d)
    if (free_of_full[d] >= 0) fr(free_of_full[d]) = mesh.loads(d);

  // All elements share the same geometry, so the Gauss B matrices are fixed.
  std::array<double, 2> gp, gw;
  detail::gauss_rule(2, gp, gw);
  const double detj = mesh.elem_size * mesh.elem_size / 4.0;
  std::array<BMatrix, 4> Bg;
  std::array<double, 4> wg;
  {
    int g = 0;
    for (int gx = 0; gx < 2; ++gx)
      for (int gy = 0; gy < 2; ++gy, ++g) {
        Bg[g] = b_matrix(gp[gx], gp[gy], mesh.elem_size);
        wg[g] = gw[gx] * gw[gy] * detj;
      }
  }

  Eigen::SimplicialLDLT<SparseMat> ldlt;
  bool pattern_ready = false;

  FmoSolution sol;
  sol.field.resize(M);
  Eigen::VectorXd u = Eigen::VectorXd::Zero(ndof);

  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<size_t>(M) * 64);

  for (int iter = 0; iter < problem.max_iterations; ++iter) {
    // Equilibrium solve for the current tensors.
    trips.clear();
    for (int e = 0; e < M; ++e) {
      const ElemMatrix Ke = element_stiffness(reps[labels[e]], mesh.elem_size);
      const auto dofs = mesh.element_dofs(e);
      for (int a = 0; a < 8; ++a) {
        const int ra = free_of_full[dofs[a]];
        if (ra < 0) continue;
        for (int b = 0; b < 8; ++b) {
          const int rb = free_of_full[dofs[b]];
          if (rb >= 0) trips.emplace_back(ra, rb, Ke(a, b));
        }
      }
    }
    SparseMat Kr(nf, nf);
    Kr.setFromTriplets(trips.begin(), trips.end());
    if (!pattern_ready) {
      ldlt.analyzePattern(Kr);
      pattern_ready = true;
    }
    ldlt.factorize(Kr);
    if (ldlt.info() != Eigen::Success)
      throw SolverError("fmo: equilibrium factorization failed (singular system)");
    const Eigen::VectorXd ur = ldlt.solve(fr);

    const double c_force = fr.dot(ur);
    const double c_energy = ur.dot(Kr * ur);
    if (std::abs(c_force - c_energy) > 1e-9 * std::max(1.0, std::abs(c_force)))
      throw SolverError("fmo: compliance identity check failed");
    sol.history.push_back(c_force);

    u.setZero();
    for (int d = 0; d < ndof; ++d)
      if (free_of_full[d] >= 0) u(d) = ur(free_of_full[d]);

    // Convergence: relative compliance change below tolerance over the window.
    if (static_cast<int>(sol.history.size()) > problem.tol_window) {
      bool settled = true;
      const size_t h = sol.history.size();
      for (int k = 0; k < problem.tol_window; ++k) {
        const double a = sol.history[h - 1 - k], b = sol.history[h - 2 - k];
        if (std::abs(a - b) > problem.rel_tol * std::max({1e-300, std::abs(a), std::abs(b)})) {
          settled = false;
          break;
        }
      }
      if (settled) {
        sol.converged = true;
        break;
      }
    }
    if (iter == problem.max_iterations - 1) break;

    // Stress moments per group: M_k = sum_{e in k} sum_g w_g (D eps_g)(D eps_g)^T.
    std::vector<KelvinMatrix> moment(n_groups, KelvinMatrix::Zero());
    for (int e = 0; e < M; ++e) {
      const auto dofs = mesh.element_dofs(e);
      Eigen::Matrix<double, 8, 1> ue;
      for (int a = 0; a < 8; ++a) ue(a) = u(dofs[a]);
      const KelvinMatrix& D = reps[labels[e]];
      for (int g = 0; g < 4; ++g) {
        const StressState s = D * (Bg[g] * ue);
        moment[labels[e]].noalias() += wg[g] * (s * s.transpose());
      }
    }

    // Trace allocation across groups (bisection on the budget multiplier),
    // then the exact per-group waterfill at the allocated trace. The floor is
    // kept a hair above zero so every iterate stays invertible for the next
    // equilibrium solve even when delta = 0.
    const double floor_eff = std::max(dlt, 1e-10 * Th);
    std::vector<detail::TensorChannels> ch(n_groups);
    for (int k = 0; k < n_groups; ++k) ch[k] = detail::make_channels(moment[k], problem.material_class);

    auto total_trace = [&](double nu) {
      double s = 0.0;
      for (int k = 0; k < n_groups; ++k)
        s += mult[k] * detail::trace_for_multiplier(ch[k], nu * mult[k], Tl, Th, floor_eff);
      return s;
    };

    double nu = 0.0;
    if (total_trace(0.0) > T0 * (1.0 + 1e-14)) {
      double lo = 0.0, hi = 1e-12;
      while (total_trace(hi) > T0 && hi < 1e60) hi *= 10.0;
      for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (total_trace(mid) > T0)
          lo = mid;
        else
          hi = mid;
      }
      nu = hi;  // feasible side
    }

    for (int k = 0; k < n_groups; ++k) {
      const double t = detail::trace_for_multiplier(ch[k], nu * mult[k], Tl, Th, floor_eff);
      double d[3];
      ch[k].waterfill_at_trace(t, floor_eff, d);
      reps[k] = ch[k].reconstruct(d);
    }
  }

  for (int e = 0; e < M; ++e) sol.field[e] = reps[labels[e]];
  sol.representatives = std::move(reps);
  sol.displacement = u;
  sol.compliance = sol.history.back();
  return sol;
}

/// Free material optimization with one tensor variable per element.
inline FmoSolution solve_fmo(const FmoProblem& problem) {
  std::vector<int> labels(problem.mesh.num_elements());
  std::iota(labels.begin(), labels.end(), 0);
  return solve_fmo_grouped(problem, labels, problem.mesh.num_elements());
}

}  // namespace latopt

#endif  // LATOPT_FMO_HPP
