#ifndef LATOPT_LATTICE_HPP
#define LATOPT_LATTICE_HPP

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace latopt {

/// Capsule bar: segment [v1, v2] inflated to width p, in cell coordinates.
struct Bar {
  Eigen::Vector2d v1;
  Eigen::Vector2d v2;
  double p = 0.0;           // width (capsule diameter)
  bool connector = false;   // inserted by post-processing, not a design variable

  void validate() const {
    if (!(p > 0.0)) throw std::invalid_argument("Bar: width must be positive");
    if ((v1 - v2).norm() == 0.0) throw std::invalid_argument("Bar: endpoints coincide");
    for (const auto& v : {v1, v2})
      if (v.x() < -1e-9 || v.x() > 1.0 + 1e-9 || v.y() < -1e-9 || v.y() > 1.0 + 1e-9)
        throw std::invalid_argument("Bar: endpoint outside the unit cell");
  }
};

enum class SymmetryGroup { QuarterMirror, None };

/// Voxel-to-design-variable mapping enforcing the cell symmetry. For the
/// quarter-mirror group the design voxels are the lower-left quadrant and the
/// full grid is filled by mirroring stored values, so symmetry is exact.
struct SymmetryMap {
  SymmetryGroup group = SymmetryGroup::QuarterMirror;
  int N = 0;
  int nd = 0;  // design voxels per axis

  static SymmetryMap make(SymmetryGroup g, int N) {
    SymmetryMap m;
    m.group = g;
    m.N = N;
    m.nd = (g == SymmetryGroup::QuarterMirror) ? (N + 1) / 2 : N;
    return m;
  }

  int n_design() const { return nd * nd; }

  int design_of_full(int ix, int iy) const {
    if (group == SymmetryGroup::QuarterMirror) {
      const int fx = std::min(ix, N - 1 - ix);
      const int fy = std::min(iy, N - 1 - iy);
      return fy * nd + fx;
    }
    return iy * N + ix;
  }

  /// Center of a design voxel in cell coordinates.
  Eigen::Vector2d design_center(int d) const {
    const int fx = d % nd, fy = d / nd;
    return {(fx + 0.5) / N, (fy + 0.5) / N};
  }
};

struct LatticeUnit {
  std::vector<Bar> bars;
  SymmetryGroup symmetry = SymmetryGroup::QuarterMirror;
  double ks_k = 150.0;
  double heaviside_gamma = 0.005;

  void validate() const {
    if (bars.empty()) throw std::invalid_argument("LatticeUnit: bar list is empty");
    if (!(ks_k > 0.0)) throw std::invalid_argument("LatticeUnit: ks_k must be positive");
    if (!(heaviside_gamma > 0.0))
      throw std::invalid_argument("LatticeUnit: heaviside_gamma must be positive");
    for (const auto& b : bars) b.validate();
  }

  Eigen::VectorXd widths() const {
    Eigen::VectorXd p(bars.size());
    for (size_t i = 0; i < bars.size(); ++i) p(i) = bars[i].p;
    return p;
  }
  void set_widths(const Eigen::VectorXd& p) {
    if (p.size() != static_cast<Eigen::Index>(bars.size()))
      throw std::invalid_argument("LatticeUnit: width vector length mismatch");
    for (size_t i = 0; i < bars.size(); ++i) bars[i].p = p(i);
  }
};

struct DensityGrid {
  int N = 0;
  Eigen::ArrayXd rho;  // row-major, index iy*N + ix

  DensityGrid() = default;
  explicit DensityGrid(int N_) : N(N_), rho(Eigen::ArrayXd::Zero(N_ * N_)) {}
  double& at(int ix, int iy) { return rho(iy * N + ix); }
  double at(int ix, int iy) const { return rho(iy * N + ix); }
  double volume_fraction() const { return rho.mean(); }
};

/// Distance from x to the segment [v1, v2] (three-branch capsule form).
inline double bar_distance(const Eigen::Vector2d& x, const Eigen::Vector2d& v1,
                           const Eigen::Vector2d& v2) {
  const Eigen::Vector2d a = v2 - v1;
  const Eigen::Vector2d b = x - v1;
  const double ab = a.dot(b), aa = a.dot(a);
  if (ab <= 0.0) return b.norm();
  if (ab >= aa) return (x - v2).norm();
  return (b - (ab / aa) * a).norm();
}

/// Signed level of a capsule bar: negative inside, zero on the boundary.
inline double bar_levelset(const Eigen::Vector2d& x, const Bar& bar) {
  return bar_distance(x, bar.v1, bar.v2) - 0.5 * bar.p;
}

/// Smooth union of capsule interiors (softmin of levels):
/// omega = -(1/k) ln sum exp(-k l_i), shifted by the minimum to avoid
/// overflow. Bounded by min_i l_i - ln(n)/k <= omega <= min_i l_i.
inline double ks_blend(const std::vector<double>& levels, double k) {
  if (levels.empty()) throw std::invalid_argument("ks_blend: empty level list");
  if (!(k > 0.0)) throw std::invalid_argument("ks_blend: k must be positive");
  const double m = *std::min_element(levels.begin(), levels.end());
  double s = 0.0;
  for (double l : levels) s += std::exp(-k * (l - m));
  return m - std::log(s) / k;
}

/// Regularized Heaviside projection with bandwidth gamma: 1 well inside the
/// shape, 0 well outside, cubic transition on |omega| <= gamma.
inline double heaviside(double omega, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("heaviside: gamma must be positive");
  if (omega < -gamma) return 1.0;
  if (omega > gamma) return 0.0;
  const double r = omega / gamma;
  return -0.75 * (r - r * r * r / 3.0) + 0.5;
}

/// d(heaviside)/d(omega): 3(omega^2 - gamma^2)/(4 gamma^3) in the band, 0 outside.
inline double heaviside_derivative(double omega, double gamma) {
  if (omega < -gamma || omega > gamma) return 0.0;
  return 3.0 * (omega * omega - gamma * gamma) / (4.0 * gamma * gamma * gamma);
}

namespace detail {

inline std::vector<double> bar_levels(const LatticeUnit& unit, const Eigen::Vector2d& x) {
  std::vector<double> levels(unit.bars.size());
  for (size_t i = 0; i < unit.bars.size(); ++i) levels[i] = bar_levelset(x, unit.bars[i]);
  return levels;
}

}  // namespace detail

/// Density values on the design (fundamental) voxels only.
inline Eigen::ArrayXd rasterize_design(const LatticeUnit& unit, int N) {
  if (N < 4) throw std::invalid_argument("rasterize: N must be >= 4");
  unit.validate();
  const SymmetryMap map = SymmetryMap::make(unit.symmetry, N);
  Eigen::ArrayXd rho(map.n_design());
  for (int d = 0; d < map.n_design(); ++d) {
    const auto levels = detail::bar_levels(unit, map.design_center(d));
    rho(d) = heaviside(ks_blend(levels, unit.ks_k), unit.heaviside_gamma);
  }
  return rho;
}

/// Project the lattice unit onto an N x N voxel grid. Design voxels are
/// evaluated at their centers and mirrored through the symmetry map, so the
/// stored grid is symmetric by construction.
inline DensityGrid rasterize(const LatticeUnit& unit, int N) {
  const Eigen::ArrayXd design = rasterize_design(unit, N);
  const SymmetryMap map = SymmetryMap::make(unit.symmetry, N);
  DensityGrid grid(N);
  for (int iy = 0; iy < N; ++iy)
    for (int ix = 0; ix < N; ++ix) grid.at(ix, iy) = design(map.design_of_full(ix, iy));
  return grid;
}

/// Analytic d rho / d p on design voxels: rows are design voxels, columns are
/// bars. Within the Heaviside band the KS softmin weight of each bar carries
/// the width derivative d omega / d p_i = -w_i / 2.
inline Eigen::MatrixXd density_gradient(const LatticeUnit& unit, int N) {
  if (N < 4) throw std::invalid_argument("density_gradient: N must be >= 4");
  unit.validate();
  const SymmetryMap map = SymmetryMap::make(unit.symmetry, N);
  const int m = static_cast<int>(unit.bars.size());
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(map.n_design(), m);
  std::vector<double> w(m);
  for (int d = 0; d < map.n_design(); ++d) {
    const auto levels = detail::bar_levels(unit, map.design_center(d));
    const double omega = ks_blend(levels, unit.ks_k);
    const double dH = heaviside_derivative(omega, unit.heaviside_gamma);
    if (dH == 0.0) continue;
    const double lmin = *std::min_element(levels.begin(), levels.end());
    double s = 0.0;
    for (int i = 0; i < m; ++i) {
      w[i] = std::exp(-unit.ks_k * (levels[i] - lmin));
      s += w[i];
    }
    for (int i = 0; i < m; ++i) grad(d, i) = dH * (-0.5 * w[i] / s);
  }
  return grad;
}

/// Fold a full-grid field onto design voxels by summing mirror images
/// (the adjoint of the symmetry expansion).
inline Eigen::ArrayXd fold_to_design(const Eigen::ArrayXd& full, const SymmetryMap& map) {
  if (full.size() != static_cast<Eigen::Index>(map.N) * map.N)
    throw std::invalid_argument("fold_to_design: field size mismatch");
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(map.n_design());
  for (int iy = 0; iy < map.N; ++iy)
    for (int ix = 0; ix < map.N; ++ix) out(map.design_of_full(ix, iy)) += full(iy * map.N + ix);
  return out;
}

/// Quarter-cell template on a 3x3 node grid over [0, 0.5]^2: the 12 grid
/// edges, the 8 sub-square diagonals, and the main diagonal. 21 bars.
inline std::vector<Bar> full21_template(double width = 0.1) {
  const auto node = [](int i, int j) { return Eigen::Vector2d(0.25 * i, 0.25 * j); };
  const int pairs[21][4] = {
      {0, 0, 1, 0}, {1, 0, 2, 0}, {0, 1, 1, 1}, {1, 1, 2, 1}, {0, 2, 1, 2}, {1, 2, 2, 2},
      {0, 0, 0, 1}, {0, 1, 0, 2}, {1, 0, 1, 1}, {1, 1, 1, 2}, {2, 0, 2, 1}, {2, 1, 2, 2},
      {0, 0, 1, 1}, {1, 0, 0, 1}, {1, 0, 2, 1}, {2, 0, 1, 1}, {0, 1, 1, 2}, {1, 1, 0, 2},
      {1, 1, 2, 2}, {2, 1, 1, 2}, {0, 0, 2, 2}};
  std::vector<Bar> bars;
  bars.reserve(21);
  for (const auto& q : pairs) bars.push_back({node(q[0], q[1]), node(q[2], q[3]), width});
  return bars;
}

/// Self-supporting quarter-cell template: 10 bars on the same 9 nodes, every
/// bar at 45 degrees to the (vertical) build direction.
inline std::vector<Bar> selfsupport10_template(double width = 0.1) {
  const auto node = [](int i, int j) { return Eigen::Vector2d(0.25 * i, 0.25 * j); };
  const int pairs[10][4] = {{0, 0, 1, 1}, {1, 0, 0, 1}, {1, 0, 2, 1}, {2, 0, 1, 1},
                            {0, 1, 1, 2}, {1, 1, 0, 2}, {1, 1, 2, 2}, {2, 1, 1, 2},
                            {0, 0, 2, 2}, {2, 0, 0, 2}};
  std::vector<Bar> bars;
  bars.reserve(10);
  for (const auto& q : pairs) bars.push_back({node(q[0], q[1]), node(q[2], q[3]), width});
  return bars;
}

}  // namespace latopt

#endif  // LATOPT_LATTICE_HPP
