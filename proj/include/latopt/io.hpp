#ifndef LATOPT_IO_HPP
#define LATOPT_IO_HPP

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "latopt/kelvin.hpp"
#include "latopt/lattice.hpp"

namespace latopt {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// RFC-4180-style CSV: LF line endings, '.' decimal separator.
/// Rows are written top row (iy = N-1) first, matching the PGM orientation.
inline void write_density_csv(const DensityGrid& grid, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_density_csv: cannot open " + path);
  for (int iy = grid.N - 1; iy >= 0; --iy) {
    for (int ix = 0; ix < grid.N; ++ix) {
      if (ix) out << ',';
      out << format_double(grid.at(ix, iy));
    }
    out << '\n';
  }
}

/// Binary PGM (P5, maxval 255), density scaled to 255 and rounded to nearest.
inline void write_density_pgm(const DensityGrid& grid, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_density_pgm: cannot open " + path);
  out << "P5\n" << grid.N << ' ' << grid.N << "\n255\n";
  for (int iy = grid.N - 1; iy >= 0; --iy)
    for (int ix = 0; ix < grid.N; ++ix) {
      const double v = std::min(1.0, std::max(0.0, grid.at(ix, iy)));
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
}

inline void write_pgm_rect(const Eigen::ArrayXXd& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_pgm_rect: cannot open " + path);
  out << "P5\n" << img.cols() << ' ' << img.rows() << "\n255\n";
  for (Eigen::Index r = img.rows() - 1; r >= 0; --r)
    for (Eigen::Index c = 0; c < img.cols(); ++c) {
      const double v = std::min(1.0, std::max(0.0, img(r, c)));
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
}

inline nlohmann::json unit_to_json(const LatticeUnit& unit) {
  nlohmann::json j;
  j["bars"] = nlohmann::json::array();
  for (const auto& b : unit.bars) {
    nlohmann::json jb;
    jb["v1"] = {b.v1.x(), b.v1.y()};
    jb["v2"] = {b.v2.x(), b.v2.y()};
    jb["p"] = b.p;
    if (b.connector) jb["connector"] = true;
    j["bars"].push_back(jb);
  }
  j["ks_k"] = unit.ks_k;
  j["gamma"] = unit.heaviside_gamma;
  j["symmetry"] = unit.symmetry == SymmetryGroup::QuarterMirror ? "quarter-mirror" : "none";
  return j;
}

inline LatticeUnit unit_from_json(const nlohmann::json& j) {
  LatticeUnit unit;
  for (const auto& jb : j.at("bars")) {
    Bar b;
    b.v1 = {jb.at("v1").at(0).get<double>(), jb.at("v1").at(1).get<double>()};
    b.v2 = {jb.at("v2").at(0).get<double>(), jb.at("v2").at(1).get<double>()};
    b.p = jb.at("p").get<double>();
    b.connector = jb.value("connector", false);
    unit.bars.push_back(b);
  }
  unit.ks_k = j.at("ks_k").get<double>();
  unit.heaviside_gamma = j.at("gamma").get<double>();
  const std::string sym = j.at("symmetry").get<std::string>();
  if (sym == "quarter-mirror")
    unit.symmetry = SymmetryGroup::QuarterMirror;
  else if (sym == "none")
    unit.symmetry = SymmetryGroup::None;
  else
    throw std::invalid_argument("unit_from_json: unknown symmetry '" + sym + "'");
  return unit;
}

inline void save_unit(const LatticeUnit& unit, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_unit: cannot open " + path);
  out << unit_to_json(unit).dump(2) << '\n';
}

inline LatticeUnit load_unit(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_unit: cannot open " + path);
  nlohmann::json j;
  in >> j;
  return unit_from_json(j);
}

}  // namespace latopt

#endif  // LATOPT_IO_HPP
