#ifndef LATOPT_POSTPROCESS_HPP
#define LATOPT_POSTPROCESS_HPP

#include <Eigen/Dense>
#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "latopt/lattice.hpp"

namespace latopt {

struct ConnectivityReport {
  int component_count = 0;
  std::vector<int> component_sizes;  // voxel counts in first-encounter order
  std::vector<int> dangling_bars;    // filled by prune_bars
};

struct PostprocessError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline bool on_domain_boundary(const Eigen::Vector2d& v, SymmetryGroup group, double tol = 1e-9) {
  if (group == SymmetryGroup::QuarterMirror) {
    // Outer cell boundary or a symmetry plane: the mirrored continuation
    // supports the endpoint.
    return v.x() <= tol || v.y() <= tol || v.x() >= 0.5 - tol || v.y() >= 0.5 - tol;
  }
  return v.x() <= tol || v.y() <= tol || v.x() >= 1.0 - tol || v.y() >= 1.0 - tol;
}

inline bool same_point(const Eigen::Vector2d& a, const Eigen::Vector2d& b, double tol = 1e-9) {
  return (a - b).cwiseAbs().maxCoeff() <= tol;
}

}  // namespace detail

/// Remove bars thinner than the threshold, then iterate removal of dangling
/// bars (a free endpoint not on the domain boundary) to a fixed point.
/// The removed dangling indices (relative to the input list) are reported via
/// the optional report.
inline LatticeUnit prune_bars(const LatticeUnit& unit, double p_threshold,
                              ConnectivityReport* report = nullptr) {
  if (p_threshold < 0.0) throw std::invalid_argument("prune_bars: negative threshold");
  std::vector<char> alive(unit.bars.size(), 1);
  for (size_t i = 0; i < unit.bars.size(); ++i)
    if (unit.bars[i].p < p_threshold) alive[i] = 0;

  bool changed = true;
  std::vector<int> dangling;
  while (changed) {
    changed = false;
    for (size_t i = 0; i < unit.bars.size(); ++i) {
      if (!alive[i]) continue;
      for (const auto* v : {&unit.bars[i].v1, &unit.bars[i].v2}) {
        if (detail::on_domain_boundary(*v, unit.symmetry)) continue;
        bool shared = false;
        for (size_t j = 0; j < unit.bars.size() && !shared; ++j) {
          if (j == i || !alive[j]) continue;
          shared = detail::same_point(*v, unit.bars[j].v1) ||
                   detail::same_point(*v, unit.bars[j].v2);
        }
        if (!shared) {
          alive[i] = 0;
          dangling.push_back(static_cast<int>(i));
          changed = true;
          break;
        }
      }
    }
  }

  LatticeUnit out = unit;
  out.bars.clear();
  for (size_t i = 0; i < unit.bars.size(); ++i)
    if (alive[i]) out.bars.push_back(unit.bars[i]);
  if (out.bars.empty()) throw PostprocessError("prune_bars: all bars pruned");
  if (report) report->dangling_bars = dangling;
  return out;
}

/// Connected components of {rho >= rho_cut} under 8-neighborhood flood fill
/// on a rectangular image (rows x cols).
inline ConnectivityReport connectivity_image(const Eigen::ArrayXXd& img, double rho_cut) {
  if (!(rho_cut > 0.0 && rho_cut < 1.0))
    throw std::invalid_argument("connectivity: rho_cut must be in (0,1)");
  const int rows = static_cast<int>(img.rows()), cols = static_cast<int>(img.cols());
  std::vector<int> label(static_cast<size_t>(rows) * cols, -1);
  ConnectivityReport rep;
  for (int r0 = 0; r0 < rows; ++r0)
    for (int c0 = 0; c0 < cols; ++c0) {
      const size_t idx0 = static_cast<size_t>(r0) * cols + c0;
      if (img(r0, c0) < rho_cut || label[idx0] >= 0) continue;
      const int id = rep.component_count++;
      int count = 0;
      std::deque<std::pair<int, int>> queue{{r0, c0}};
      label[idx0] = id;
      while (!queue.empty()) {
        const auto [r, c] = queue.front();
        queue.pop_front();
        ++count;
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            if (dr == 0 && dc == 0) continue;
            const int rr = r + dr, cc = c + dc;
            if (rr < 0 || rr >= rows || cc < 0 || cc >= cols) continue;
            const size_t idx = static_cast<size_t>(rr) * cols + cc;
            if (img(rr, cc) >= rho_cut && label[idx] < 0) {
              label[idx] = id;
              queue.emplace_back(rr, cc);
            }
          }
      }
      rep.component_sizes.push_back(count);
    }
  return rep;
}

inline ConnectivityReport connectivity(const DensityGrid& grid, double rho_cut = 0.5) {
  Eigen::ArrayXXd img(grid.N, grid.N);
  for (int iy = 0; iy < grid.N; ++iy)
    for (int ix = 0; ix < grid.N; ++ix) img(iy, ix) = grid.at(ix, iy);
  return connectivity_image(img, rho_cut);
}

struct RescaleResult {
  LatticeUnit unit;
  double volume = 0.0;
  bool within_band = false;
};

/// Scale all widths by a common bisected factor (clamped to [p_min, p_max])
/// so the rasterized volume fraction lands in [V_star - 0.002, V_star].
/// If the band is unreachable within the clamps, the closest endpoint is
/// returned with within_band = false.
inline RescaleResult rescale_volume(const LatticeUnit& unit, double V_star, int N,
                                    double p_min = 0.01, double p_max = 0.5) {
  unit.validate();
  auto scaled = [&](double f) {
    LatticeUnit u = unit;
    for (auto& b : u.bars) b.p = std::clamp(b.p * f, p_min, p_max);
    return u;
  };
  auto vol = [&](double f) { return rasterize(scaled(f), N).volume_fraction(); };

  const double v_lo = V_star - 0.002;
  double lo = 1e-3, hi = 1e3;
  const double vol_lo = vol(lo), vol_hi = vol(hi);
  RescaleResult res;
  if (vol_hi < v_lo) {  // even fully widened cannot reach the band
    res.unit = scaled(hi);
    res.volume = vol_hi;
    res.within_band = false;
    return res;
  }
  if (vol_lo > V_star) {  // even fully thinned still exceeds the budget
    res.unit = scaled(lo);
    res.volume = vol_lo;
    res.within_band = false;
    return res;
  }
  // Bisect to the upper edge of the budget band so an already-on-target unit
  // keeps a scale factor of one.
  for (int it = 0; it < 80; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (vol(mid) > V_star)
      hi = mid;
    else
      lo = mid;
  }
  res.unit = scaled(lo);
  res.volume = vol(lo);
  res.within_band = res.volume >= v_lo - 1e-12 && res.volume <= V_star + 1e-12;
  return res;
}

enum class SharedEdge { Right, Top };  // B sits to the right of / above A

namespace detail {

/// Mirror-expand the fundamental bars to the full cell.
inline std::vector<Bar> expand_bars(const LatticeUnit& unit) {
  if (unit.symmetry == SymmetryGroup::None) return unit.bars;
  std::vector<Bar> out;
  auto push_unique = [&](Bar b) {
    for (const auto& e : out) {
      if ((same_point(e.v1, b.v1) && same_point(e.v2, b.v2)) ||
          (same_point(e.v1, b.v2) && same_point(e.v2, b.v1)))
        return;
    }
    out.push_back(b);
  };
  for (const auto& b : unit.bars) {
    for (int mx = 0; mx < 2; ++mx)
      for (int my = 0; my < 2; ++my) {
        Bar c = b;
        if (mx) {
          c.v1.x() = 1.0 - c.v1.x();
          c.v2.x() = 1.0 - c.v2.x();
        }
        if (my) {
          c.v1.y() = 1.0 - c.v1.y();
          c.v2.y() = 1.0 - c.v2.y();
        }
        push_unique(c);
      }
  }
  return out;
}

}  // namespace detail

/// Density of a single capsule at a point (no blending); used to stamp
/// connector bars into assembled grids.
inline double capsule_density(const Eigen::Vector2d& x, const Bar& bar, double gamma) {
  return heaviside(bar_distance(x, bar.v1, bar.v2) - 0.5 * bar.p, gamma);
}

/// Rasterize a 1x2 tile (A left/bottom, B right/top) with connector bars given
/// in the two-cell frame. Returns an image with rows = y voxels.
inline Eigen::ArrayXXd rasterize_pair(const LatticeUnit& A, const LatticeUnit& B, SharedEdge edge,
                                      int N, const std::vector<Bar>& connectors = {}) {
  const DensityGrid ga = rasterize(A, N), gb = rasterize(B, N);
  const int rows = edge == SharedEdge::Right ? N : 2 * N;
  const int cols = edge == SharedEdge::Right ? 2 * N : N;
  Eigen::ArrayXXd img(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const bool inB = edge == SharedEdge::Right ? c >= N : r >= N;
      const int ix = edge == SharedEdge::Right ? (c % N) : c;
      const int iy = edge == SharedEdge::Right ? r : (r % N);
      img(r, c) = inB ? gb.at(ix, iy) : ga.at(ix, iy);
    }
  const double gamma = std::max(A.heaviside_gamma, B.heaviside_gamma);
  for (const auto& bar : connectors) {
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const Eigen::Vector2d x((c + 0.5) / N, (r + 0.5) / N);
        img(r, c) = std::max(img(r, c), capsule_density(x, bar, gamma));
      }
  }
  return img;
}

/// True when the two units already touch across the shared edge at the given
/// density cut (8-neighborhood across the interface).
inline bool interface_connected(const LatticeUnit& A, const LatticeUnit& B, SharedEdge edge,
                                int N, double rho_cut = 0.5) {
  const DensityGrid ga = rasterize(A, N), gb = rasterize(B, N);
  for (int t = 0; t < N; ++t) {
    // Last row/column of A against first row/column of B, diagonals included.
    for (int dt = -1; dt <= 1; ++dt) {
      const int u = t + dt;
      if (u < 0 || u >= N) continue;
      const double a = edge == SharedEdge::Right ? ga.at(N - 1, t) : ga.at(t, N - 1);
      const double b = edge == SharedEdge::Right ? gb.at(0, u) : gb.at(u, 0);
      if (a >= rho_cut && b >= rho_cut) return true;
    }
  }
  return false;
}

struct ConnectorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Connector bars joining two adjacent dissimilar units. If the rasterized
/// interface is already connected the list is empty; otherwise the endpoint
/// pair with the smallest distance across the edge is bridged by one bar whose
/// width is the mean of the parent bars. Connector coordinates live in the
/// two-cell frame (x in [0,2] for a right edge, y in [0,2] for a top edge).
inline std::vector<Bar> connect_adjacent(const LatticeUnit& A, const LatticeUnit& B,
                                         SharedEdge edge, int N = 40) {
  if (interface_connected(A, B, edge, N)) return {};

  const std::vector<Bar> barsA = detail::expand_bars(A);
  const std::vector<Bar> barsB = detail::expand_bars(B);
  const double reach = 0.5;

  // Candidate endpoints within reach of the shared edge, in the 2-cell frame.
  struct Candidate {
    Eigen::Vector2d pos;
    double width;
  };
  std::vector<Candidate> endA, endB;
  auto coord = [&](const Eigen::Vector2d& v) { return edge == SharedEdge::Right ? v.x() : v.y(); };
  for (const auto& b : barsA)
    for (const auto* v : {&b.v1, &b.v2})
      if (coord(*v) >= 1.0 - reach) endA.push_back({*v, b.p});
  for (const auto& b : barsB)
    for (const auto* v : {&b.v1, &b.v2})
      if (coord(*v) <= reach) {
        Eigen::Vector2d shifted = *v;
        (edge == SharedEdge::Right ? shifted.x() : shifted.y()) += 1.0;
        endB.push_back({shifted, b.p});
      }
  if (endA.empty() || endB.empty())
    throw ConnectorError(std::string("connect_adjacent: no candidate endpoints within 0.5 of the ") +
                         (edge == SharedEdge::Right ? "right" : "top") + " edge");

  double best = std::numeric_limits<double>::infinity();
  const Candidate* ca = nullptr;
  const Candidate* cb = nullptr;
  for (const auto& a : endA)
    for (const auto& b : endB) {
      const double d = (a.pos - b.pos).norm();
      if (d < best) {
        best = d;
        ca = &a;
        cb = &b;
      }
    }
  Bar bar;
  bar.v1 = ca->pos;
  bar.v2 = cb->pos;
  bar.p = 0.5 * (ca->width + cb->width);
  bar.connector = true;
  return {bar};
}

}  // namespace latopt

#endif  // LATOPT_POSTPROCESS_HPP
