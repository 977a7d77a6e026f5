#ifndef LATOPT_INVHOM_HPP
#define LATOPT_INVHOM_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "latopt/buckling.hpp"
#include "latopt/fe.hpp"
#include "latopt/gcmma.hpp"
#include "latopt/homogenize.hpp"
#include "latopt/io.hpp"
#include "latopt/kelvin.hpp"
#include "latopt/lattice.hpp"

namespace latopt {

/// Buckling-constrained inverse homogenization: find bar widths whose
/// homogenized tensor matches the target while the weighted KS aggregate of
/// reciprocal buckling load factors stays small.
struct InvHomProblem {
  KelvinMatrix target = KelvinMatrix::Identity();  // D^0
  StrainState strain_load = StrainState::Zero();   // worst in-situ strain
  LatticeUnit unit_template;                       // widths are the variables
  double V_star = 0.35;
  double lambda_B = 0.0;
  double P_lower = 1.0;
  int n_b = 6;
  double p_min = 0.01;
  double p_max = 0.5;
  int N = 40;
  KelvinMatrix base = base_material(1.0, 0.3);
  double penal = 3.0;
  double E_min_static = 1e-3;
  double E_min_buckling = 1e-4;
  int max_outer = 150;
  double step_tol = 1e-4;
  bool enforce_buckling_constraint = false;  // add f_P <= 0 as a hard constraint
  std::string log_path;                      // per-iteration CSV when non-empty

  void validate() const {
    if (!(lambda_B >= 0.0 && lambda_B <= 1.0))
      throw std::invalid_argument("InvHomProblem: lambda_B must be in [0,1]");
    if (!(V_star > 0.0 && V_star < 1.0))
      throw std::invalid_argument("InvHomProblem: V_star must be in (0,1)");
    if (!(p_min > 0.0 && p_min < p_max && p_max <= 1.0))
      throw std::invalid_argument("InvHomProblem: need 0 < p_min < p_max <= 1");
    if (n_b < 1) throw std::invalid_argument("InvHomProblem: n_b must be >= 1");
  }
};

/// Everything one design evaluation produces, kept for the sensitivity pass.
struct EvalCache {
  DensityGrid grid;
  double volume = 0.0;
  MicroCell cell_static, cell_buck;
  CellSolution sol_static, sol_buck;
  KelvinMatrix DH = KelvinMatrix::Zero();
  double frob = 0.0;     // |DH - D0|_F
  StressField stress;    // rho^p embedded
  BucklingSpectrum spectrum;
  double J = 0.0;
  double f_P = -1.0;
  std::shared_ptr<Eigen::SimplicialLDLT<SparseMat>> Kbuck_ldlt;
  SparseMat Kbuck, G;
};

inline EvalCache evaluate_from_grid(const InvHomProblem& prob, const DensityGrid& grid) {
  prob.validate();
  EvalCache c;
  c.grid = grid;
  c.volume = grid.volume_fraction();

  c.cell_static.grid = grid;
  c.cell_static.base = prob.base;
  c.cell_static.penal = prob.penal;
  c.cell_static.E_min = prob.E_min_static;
  c.sol_static = solve_cell(c.cell_static);
  c.DH = c.sol_static.DH;
  c.frob = (c.DH - prob.target).norm();

  c.cell_buck = c.cell_static;
  c.cell_buck.E_min = prob.E_min_buckling;
  c.sol_buck = solve_cell(c.cell_buck);
  c.stress = stress_recovery(c.cell_buck, c.sol_buck, prob.strain_load);

  const detail::CellOperator op(c.cell_buck);
  c.Kbuck = detail::assemble_reduced(op, c.cell_buck);
  c.G = geometric_stiffness(c.stress, op.mesh, op.map);
  c.spectrum = buckling_eigens(c.Kbuck, c.G, prob.n_b);
  c.Kbuck_ldlt = std::make_shared<Eigen::SimplicialLDLT<SparseMat>>(c.Kbuck);
  if (c.Kbuck_ldlt->info() != Eigen::Success)
    throw SolverError("evaluate: buckling stiffness factorization failed");

  c.J = (1.0 - prob.lambda_B) * c.frob + prob.lambda_B * c.spectrum.kappa_ks;
  c.f_P = buckling_constraint(c.spectrum.kappa_ks, prob.P_lower);
  return c;
}

/// Rasterize the unit at the given widths and evaluate.
inline EvalCache evaluate(const InvHomProblem& prob, const Eigen::VectorXd& widths) {
  LatticeUnit unit = prob.unit_template;
  unit.set_widths(widths);
  return evaluate_from_grid(prob, rasterize(unit, prob.N));
}

/// d |DH - D0|_F / d rho per voxel; zero subgradient at an exact match.
inline Eigen::ArrayXd frobenius_sensitivity(const InvHomProblem& prob, const EvalCache& c) {
  const int M = c.grid.N * c.grid.N;
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(M);
  if (c.frob <= 1e-12) return out;
  const KelvinMatrix dir = (c.DH - prob.target) / c.frob;
  const auto dDH = dh_sensitivity(c.cell_static, c.sol_static);
  for (int e = 0; e < M; ++e) out(e) = frobenius_inner(dir, dDH[e]);
  return out;
}

/// True when the j-th reciprocal factor is within tol (relative) of a
/// neighbor, where the eigenvalue sensitivity below is only a KS-blend proxy.
inline bool near_multiple(const BucklingSpectrum& spec, int j, double tol = 1e-6) {
  const double scale = std::abs(spec.kappas.front());
  if (j > 0 && std::abs(spec.kappas[j - 1] - spec.kappas[j]) <= tol * scale) return true;
  if (j + 1 < static_cast<int>(spec.kappas.size()) &&
      std::abs(spec.kappas[j] - spec.kappas[j + 1]) <= tol * scale)
    return true;
  return false;
}

/// d kappa_j / d rho per voxel. The direct pencil term is corrected by three
/// adjoint solves per mode that account for the stress field's dependence on
/// the cell solutions. Set with_adjoint = false to keep only the direct term.
inline Eigen::ArrayXd eigen_sensitivity(const InvHomProblem& prob, const EvalCache& c, int j,
                                        bool with_adjoint = true) {
  const int N = c.grid.N;
  const int M = N * N;
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(M);
  if (!c.spectrum.any_positive || j >= static_cast<int>(c.spectrum.kappas.size())) return out;

  const detail::CellOperator op(c.cell_buck);
  const QuadMesh& mesh = op.mesh;
  const PeriodicMap& map = op.map;
  const BMatrix Bc = b_matrix(0.0, 0.0, 1.0);
  const double kappa = c.spectrum.kappas[j];
  const Eigen::VectorXd& phi = c.spectrum.modes.col(j);
  const double Emin = prob.E_min_buckling;
  const double pen = prob.penal;

  // Per-element mode extraction and solid-stress geometric matrices.
  auto mode_at = [&](int e) {
    const auto dofs = mesh.element_dofs(e);
    Eigen::Matrix<double, 8, 1> pe;
    for (int a = 0; a < 8; ++a) pe(a) = phi(map.reduced_of_full[dofs[a]]);
    return pe;
  };

  // Direct term: phi^T (dG - kappa dK) phi, element by element.
  std::vector<Eigen::Matrix<double, 8, 3>> uA(M);  // superimposed fields per element
  for (int e = 0; e < M; ++e) {
    const double rho = c.grid.rho(e);
    const double drho = pen * std::pow(rho, pen - 1.0);
    const Eigen::Matrix<double, 8, 1> pe = mode_at(e);
    const Eigen::Matrix<double, 8, 3> Xe = c.sol_buck.element_chi(mesh, e);
    uA[e] = op.chi0 - Xe;
    const StrainState local = prob.strain_load - Bc * (Xe * prob.strain_load);
    const StressState sigma0 = prob.base * local;  // solid-phase stress
    const ElemMatrix G0e = element_geometric_stiffness(sigma0, 1.0);
    const double dG = drho * pe.dot(G0e * pe);
    const double dK = drho * (1.0 - Emin) * pe.dot(op.k0 * pe);
    out(e) = dG - kappa * dK;
  }
  if (!with_adjoint) return out;

  // Adjoint right-hand sides P_jk: the stress entering G is linear in the cell
  // solutions, so phi^T dG/dchi phi assembles from per-element unit-stress
  // geometric matrices contracted with the mode.
  Eigen::MatrixXd Pjk = Eigen::MatrixXd::Zero(map.reduced_dofs, 3);
  for (int e = 0; e < M; ++e) {
    const double Eg = std::pow(c.grid.rho(e), pen);
    if (Eg == 0.0) continue;
    const Eigen::Matrix<double, 8, 1> pe = mode_at(e);
    // L(e, s) = phi_e^T G_e(s) phi_e for the three Kelvin basis stresses.
    Eigen::Vector3d L;
    for (int s = 0; s < 3; ++s) {
      StressState basis = StressState::Zero();
      basis(s) = 1.0;
      L(s) = pe.dot(element_geometric_stiffness(basis, 1.0) * pe);
    }
    const auto dofs = mesh.element_dofs(e);
    for (int k = 0; k < 3; ++k) {
      const double ek = prob.strain_load(k);
      if (ek == 0.0) continue;
      for (int i = 0; i < 8; ++i) {
        const StressState dsigma = -Eg * ek * (prob.base * Bc.col(i));
        const int r = map.reduced_of_full[dofs[i]];
        if (r < 2) continue;  // pinned
        Pjk(r, k) += L.dot(dsigma);
      }
    }
  }
  const Eigen::MatrixXd V = c.Kbuck_ldlt->solve(Pjk);

  for (int e = 0; e < M; ++e) {
    const double rho = c.grid.rho(e);
    const double dE = pen * (1.0 - Emin) * std::pow(rho, pen - 1.0);
    if (dE == 0.0) continue;
    const auto dofs = mesh.element_dofs(e);
    Eigen::Matrix<double, 8, 3> Ve;
    for (int a = 0; a < 8; ++a) Ve.row(a) = V.row(map.reduced_of_full[dofs[a]]);
    // -sum_k v_jk^T (dK chi^k - df^k) = +dE sum_k v_k^T k0 (chi0 - chi)_k
    double adj = 0.0;
    const Eigen::Matrix<double, 8, 3> k0uA = op.k0 * uA[e];
    for (int k = 0; k < 3; ++k) adj += Ve.col(k).dot(k0uA.col(k));
    out(e) += dE * adj;
  }
  return out;
}

/// Softmax weights of the KS aggregate over the returned modes.
inline std::vector<double> kappa_ks_weights(const BucklingSpectrum& spec) {
  std::vector<double> w(spec.kappas.size(), 0.0);
  if (spec.kappas.empty()) return w;
  const double k1 = spec.kappas.front();
  double s = 0.0;
  for (size_t j = 0; j < spec.kappas.size(); ++j) {
    w[j] = std::exp(spec.mu_kappa * (spec.kappas[j] - k1));
    s += w[j];
  }
  for (double& x : w) x /= s;
  return w;
}

/// d kappa_ks / d rho per voxel: softmax-weighted mode sensitivities plus the
/// chain term from the aggregation parameter mu = 100/kappa_1, which tracks
/// the leading factor as the design moves. Without that term the derivative
/// is off by up to ln(n)/100 relative whenever the top factors cluster.
inline Eigen::ArrayXd kappa_ks_sensitivity(const InvHomProblem& prob, const EvalCache& c) {
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(c.grid.N * c.grid.N);
  if (!c.spectrum.any_positive) return out;
  const auto w = kappa_ks_weights(c.spectrum);
  Eigen::ArrayXd lead;
  for (size_t j = 0; j < c.spectrum.kappas.size(); ++j) {
    if (w[j] <= 1e-14 && j > 0) continue;
    const Eigen::ArrayXd dk = eigen_sensitivity(prob, c, static_cast<int>(j));
    if (j == 0) lead = dk;
    out += w[j] * dk;
  }
  const double k1 = c.spectrum.kappas.front();
  const double mu = c.spectrum.mu_kappa;
  const double L = mu * (c.spectrum.kappa_ks - k1);  // ln of the softmax sum
  double mean_delta = 0.0;
  for (size_t j = 0; j < c.spectrum.kappas.size(); ++j)
    mean_delta += w[j] * (c.spectrum.kappas[j] - k1);
  out += (L / (mu * k1) - mean_delta / k1) * lead;
  return out;
}

/// d f_P / d rho = P_lower * d kappa_ks / d rho.
inline Eigen::ArrayXd ks_sensitivity(const InvHomProblem& prob, const EvalCache& c) {
  return prob.P_lower * kappa_ks_sensitivity(prob, c);
}

/// Contract a per-voxel sensitivity field with the geometry gradient,
/// summing mirror images onto their design voxel first.
inline Eigen::VectorXd chain_to_widths(const Eigen::ArrayXd& field, const LatticeUnit& unit,
                                       int N) {
  const SymmetryMap map = SymmetryMap::make(unit.symmetry, N);
  const Eigen::ArrayXd folded = fold_to_design(field, map);
  const Eigen::MatrixXd dgrad = density_gradient(unit, N);
  return dgrad.transpose() * folded.matrix();
}

struct InvHomResult {
  Eigen::VectorXd widths;
  DensityGrid grid;
  KelvinMatrix DH = KelvinMatrix::Zero();
  double J = 0.0, volume = 0.0, kappa_ks = 0.0, c_b = 1.0, f_P = -1.0;
  std::vector<double> J_history, kappa_history, volume_history;
  bool converged = false;
};

/// GCMMA loop over bar widths: objective (1-lambda)|DH - D0|_F + lambda
/// kappa_ks, hard volume constraint, optional hard buckling constraint.
/// Returns the best feasible iterate.
inline InvHomResult solve_invhom(const InvHomProblem& prob) {
  prob.validate();
  prob.unit_template.validate();
  const int nbars = static_cast<int>(prob.unit_template.bars.size());
  const Eigen::VectorXd xmin = Eigen::VectorXd::Constant(nbars, prob.p_min);
  const Eigen::VectorXd xmax = Eigen::VectorXd::Constant(nbars, prob.p_max);

  // Start from a uniform width whose rasterization is safely below Heaviside
  // saturation: a fully solid start has zero geometry gradient everywhere and
  // the optimizer could never leave it. Fall back to mid-range for sparse
  // templates that cannot saturate.
  auto uniform_volume = [&](double w) {
    LatticeUnit u = prob.unit_template;
    for (auto& b : u.bars) b.p = w;
    return rasterize(u, prob.N).volume_fraction();
  };
  double w0 = prob.p_min + 0.5 * (prob.p_max - prob.p_min);
  const double v_target = std::min(0.75, prob.V_star + 0.35);
  if (uniform_volume(w0) > v_target) {
    double lo = prob.p_min, hi = w0;
    for (int it = 0; it < 40; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (uniform_volume(mid) > v_target)
        hi = mid;
      else
        lo = mid;
    }
    w0 = lo;
  }
  Eigen::VectorXd p = Eigen::VectorXd::Constant(nbars, w0);

  std::ofstream log;
  if (!prob.log_path.empty()) {
    log.open(prob.log_path, std::ios::binary);
    if (!log) throw std::runtime_error("solve_invhom: cannot open log " + prob.log_path);
    log << "iter,J,frob_term,kappa_ks,c_b,volume,f_P,max_width_change\n";
  }

  const int m = prob.enforce_buckling_constraint ? 2 : 1;
  GcmmaState state;
  state.reset(nbars);

  auto values = [&](const Eigen::VectorXd& x) {
    const EvalCache c = evaluate(prob, x);
    Eigen::VectorXd g(m);
    g(0) = c.volume - prob.V_star;
    if (m > 1) g(1) = c.f_P;
    return std::make_pair(c.J, g);
  };

  InvHomResult res;
  res.widths = p;
  double bestJ = std::numeric_limits<double>::infinity();
  bool have_best = false;
  double last_step = 0.0;

  LatticeUnit unit = prob.unit_template;
  for (int t = 0; t < prob.max_outer; ++t) {
    const EvalCache c = evaluate(prob, p);
    res.J_history.push_back(c.J);
    res.kappa_history.push_back(c.spectrum.kappa_ks);
    res.volume_history.push_back(c.volume);
    if (log.is_open()) {
      log << t << ',' << format_double(c.J) << ',' << format_double(c.frob) << ','
          << format_double(c.spectrum.kappa_ks) << ',' << format_double(c.spectrum.c_b) << ','
          << format_double(c.volume) << ',' << format_double(c.f_P) << ','
          << format_double(last_step) << '\n';
    }
    const bool feasible = c.volume <= prob.V_star + 1e-3 &&
                          (!prob.enforce_buckling_constraint || c.f_P <= 1e-6);
    if (feasible && (!have_best || c.J < bestJ)) {
      bestJ = c.J;
      res.widths = p;
      res.grid = c.grid;
      res.DH = c.DH;
      res.J = c.J;
      res.volume = c.volume;
      res.kappa_ks = c.spectrum.kappa_ks;
      res.c_b = c.spectrum.c_b;
      res.f_P = c.f_P;
      have_best = true;
    }

    if (t == prob.max_outer - 1) break;

    // Gradients.
    unit.set_widths(p);
    const Eigen::ArrayXd dfrob = frobenius_sensitivity(prob, c);
    const Eigen::ArrayXd dks = prob.lambda_B > 0.0 || prob.enforce_buckling_constraint
                                   ? kappa_ks_sensitivity(prob, c)
                                   : Eigen::ArrayXd::Zero(dfrob.size());
    const Eigen::ArrayXd dJ_rho = (1.0 - prob.lambda_B) * dfrob + prob.lambda_B * dks;
    const int M = prob.N * prob.N;
    const Eigen::ArrayXd dV_rho = Eigen::ArrayXd::Constant(M, 1.0 / M);

    GcmmaEval eval;
    eval.f0 = c.J;
    eval.df0 = chain_to_widths(dJ_rho, unit, prob.N);
    eval.g.resize(m);
    eval.g(0) = c.volume - prob.V_star;
    eval.dg.resize(m, nbars);
    eval.dg.row(0) = chain_to_widths(dV_rho, unit, prob.N).transpose();
    if (m > 1) {
      eval.g(1) = c.f_P;
      eval.dg.row(1) = chain_to_widths(prob.P_lower * dks, unit, prob.N).transpose();
    }

    const auto [p_next, inner] = gcmma_step(p, eval, xmin, xmax, state, values);
    last_step = (p_next - p).cwiseAbs().maxCoeff();
    p = p_next;
    if (last_step < prob.step_tol) {
      res.converged = true;
      const EvalCache cf = evaluate(prob, p);
      res.J_history.push_back(cf.J);
      res.kappa_history.push_back(cf.spectrum.kappa_ks);
      res.volume_history.push_back(cf.volume);
      const bool feas = cf.volume <= prob.V_star + 1e-3 &&
                        (!prob.enforce_buckling_constraint || cf.f_P <= 1e-6);
      if (feas && (!have_best || cf.J < bestJ)) {
        res.widths = p;
        res.grid = cf.grid;
        res.DH = cf.DH;
        res.J = cf.J;
        res.volume = cf.volume;
        res.kappa_ks = cf.spectrum.kappa_ks;
        res.c_b = cf.spectrum.c_b;
        res.f_P = cf.f_P;
        have_best = true;
      }
      break;
    }
  }

  if (!have_best) {
    // No feasible iterate: report the last one.
    const EvalCache c = evaluate(prob, p);
    res.widths = p;
    res.grid = c.grid;
    res.DH = c.DH;
    res.J = c.J;
    res.volume = c.volume;
    res.kappa_ks = c.spectrum.kappa_ks;
    res.c_b = c.spectrum.c_b;
    res.f_P = c.f_P;
    res.converged = false;
  }
  return res;
}

}  // namespace latopt

#endif  // LATOPT_INVHOM_HPP
