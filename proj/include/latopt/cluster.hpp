#ifndef LATOPT_CLUSTER_HPP
#define LATOPT_CLUSTER_HPP

#include <Eigen/Dense>
#include <limits>
#include <stdexcept>
#include <vector>

#include "latopt/fe.hpp"
#include "latopt/fmo.hpp"
#include "latopt/kelvin.hpp"

namespace latopt {

struct ClusterAssignment {
  std::vector<int> labels;                    // per element, in [0, K)
  int K = 0;
  std::vector<KelvinMatrix> representatives;  // per-cluster Frobenius means
};

struct ClusterStrainLoads {
  std::vector<StrainState> strain;   // eps_bar per cluster
  std::vector<StressState> stress;   // sigma_bar per cluster
  std::vector<int> source_element;   // element carrying the worst stress
};

namespace detail {

/// Tensor embedding used for clustering distances: the six upper-triangle
/// Kelvin entries (the Kelvin shear factors already make this norm-equivalent
/// to the tensor norm).
inline Eigen::Matrix<double, 6, 1> cluster_embedding(const KelvinMatrix& D) {
  Eigen::Matrix<double, 6, 1> v;
  v << D(0, 0), D(1, 1), D(2, 2), D(0, 1), D(0, 2), D(1, 2);
  return v;
}

}  // namespace detail

/// Agglomerative Ward clustering of a tensor field cut at K clusters.
///
/// Merge cost is the within-cluster variance increase
/// (|A||B|/(|A|+|B|)) |c_A - c_B|^2 on the 6-entry embedding. Ties pick the
/// lexicographically smallest pair of cluster ids, where a cluster id is its
/// smallest member element index; final labels are ordered by that id.
inline ClusterAssignment hierarchical_cluster(const std::vector<KelvinMatrix>& field, int K) {
  const int M = static_cast<int>(field.size());
  if (K < 1 || K > M) throw std::invalid_argument("hierarchical_cluster: K out of range");

  std::vector<Eigen::Matrix<double, 6, 1>> center(M);
  std::vector<double> size(M, 1.0);
  std::vector<int> head(M);       // cluster id = smallest member index
  std::vector<char> active(M, 1);
  for (int e = 0; e < M; ++e) {
    center[e] = detail::cluster_embedding(field[e]);
    head[e] = e;
  }
  // parent chain for final label extraction
  std::vector<int> owner(M);
  for (int e = 0; e < M; ++e) owner[e] = e;

  auto ward_cost = [&](int a, int b) {
    const double na = size[a], nb = size[b];
    return na * nb / (na + nb) * (center[a] - center[b]).squaredNorm();
  };

  int n_active = M;
  while (n_active > K) {
    double best = std::numeric_limits<double>::infinity();
    int bi = -1, bj = -1;
    for (int i = 0; i < M; ++i) {
      if (!active[i]) continue;
      for (int j = i + 1; j < M; ++j) {
        if (!active[j]) continue;
        const double c = ward_cost(i, j);
        if (c < best) {
          best = c;
          bi = i;
          bj = j;
        }
      }
    }
    // Merge bj into bi (bi < bj keeps the smallest-member id).
    const double n = size[bi] + size[bj];
    center[bi] = (size[bi] * center[bi] + size[bj] * center[bj]) / n;
    size[bi] = n;
    active[bj] = 0;
    for (int e = 0; e < M; ++e)
      if (owner[e] == bj) owner[e] = bi;
    --n_active;
  }

  ClusterAssignment out;
  out.K = K;
  out.labels.assign(M, -1);
  std::vector<int> cluster_of_head(M, -1);
  int next = 0;
  for (int e = 0; e < M; ++e) {
    const int h = owner[e];
    if (cluster_of_head[h] < 0) cluster_of_head[h] = next++;
    out.labels[e] = cluster_of_head[h];
  }
  out.representatives.assign(K, KelvinMatrix::Zero());
  std::vector<double> count(K, 0.0);
  for (int e = 0; e < M; ++e) {
    out.representatives[out.labels[e]] += field[e];
    count[out.labels[e]] += 1.0;
  }
  for (int k = 0; k < K; ++k) out.representatives[k] /= count[k];
  return out;
}

/// Re-solve the FMO problem with one tensor variable per cluster, shared by
/// all member elements. Warm-started from the assignment's representatives
/// when they satisfy the element constraints.
inline FmoSolution clustered_fmo(const FmoProblem& problem, const ClusterAssignment& asg) {
  if (static_cast<int>(asg.labels.size()) != problem.mesh.num_elements())
    throw std::invalid_argument("clustered_fmo: assignment does not match mesh");
  const std::vector<KelvinMatrix>* warm = nullptr;
  std::vector<KelvinMatrix> start;
  if (static_cast<int>(asg.representatives.size()) == asg.K) {
    bool ok = true;
    double total = 0.0;
    for (int k = 0; k < asg.K && ok; ++k) {
      const double tr = asg.representatives[k].trace();
      ok = tr >= problem.T_low - 1e-12 && tr <= problem.T_high + 1e-12 &&
           smallest_eigenvalue(asg.representatives[k]) >= problem.delta - 1e-12;
    }
    for (size_t e = 0; e < asg.labels.size(); ++e)
      total += asg.representatives[asg.labels[e]].trace();
    if (ok && total <= problem.T0 * (1.0 + 1e-12)) {
      start = asg.representatives;
      warm = &start;
    }
  }
  return solve_fmo_grouped(problem, asg.labels, asg.K, warm);
}

/// For each cluster, pick the member element with the largest von Mises
/// centroid stress and return that stress together with the strain load
/// eps_bar = Dbar^{-1} sigma_bar of the cluster representative.
inline ClusterStrainLoads select_cluster_strains(const FmoSolution& sol, const QuadMesh& mesh,
                                                 const ClusterAssignment& asg) {
  const int M = mesh.num_elements();
  if (static_cast<int>(sol.field.size()) != M || static_cast<int>(asg.labels.size()) != M)
    throw std::invalid_argument("select_cluster_strains: size mismatch");
  const BMatrix Bc = b_matrix(0.0, 0.0, mesh.elem_size);

  ClusterStrainLoads out;
  out.strain.assign(asg.K, StrainState::Zero());
  out.stress.assign(asg.K, StressState::Zero());
  out.source_element.assign(asg.K, -1);
  std::vector<double> best_vm(asg.K, -1.0);

  for (int e = 0; e < M; ++e) {
    const auto dofs = mesh.element_dofs(e);
    Eigen::Matrix<double, 8, 1> ue;
    for (int a = 0; a < 8; ++a) ue(a) = sol.displacement(dofs[a]);
    const StressState s = sol.field[e] * (Bc * ue);
    const double vm = von_mises(s);
    const int k = asg.labels[e];
    if (vm > best_vm[k]) {  // strict: ties keep the lowest element index
      best_vm[k] = vm;
      out.stress[k] = s;
      out.source_element[k] = e;
    }
  }
  for (int k = 0; k < asg.K; ++k) {
    const KelvinMatrix& Dbar =
        static_cast<int>(sol.representatives.size()) == asg.K ? sol.representatives[k]
                                                              : sol.field[out.source_element[k]];
    Eigen::FullPivLU<KelvinMatrix> lu(Dbar);
    if (!lu.isInvertible())
      throw SolverError("select_cluster_strains: singular cluster representative");
    out.strain[k] = lu.solve(out.stress[k]);
  }
  return out;
}

}  // namespace latopt

#endif  // LATOPT_CLUSTER_HPP
