#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "latopt/pipeline.hpp"

using namespace latopt;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitSolver = 3;

PipelineConfig make_config(const std::string& config_path, const std::string& out_dir,
                           int threads) {
  PipelineConfig cfg = load_config(config_path);
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  if (threads > 0) cfg.threads = threads;
  cfg.validate();
  return cfg;
}

/// Macro stages only: FMO, clustering, clustered re-solve, strain loads.
int run_macro(const PipelineConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  const auto path = [&](const std::string& n) { return (fs::path(cfg.output_dir) / n).string(); };

  const FmoProblem macro = build_macro_problem(cfg);
  const FmoSolution free_sol = solve_fmo(macro);
  detail::write_tensor_field_csv(free_sol.field, path("macro_tensors.csv"));
  detail::write_history_csv(free_sol.history, path("fmo_history.csv"));
  const ClusterAssignment asg = hierarchical_cluster(free_sol.field, cfg.K_clusters);
  detail::write_labels_csv(asg.labels, path("cluster_labels.csv"));
  const FmoSolution clus = clustered_fmo(macro, asg);
  detail::write_tensor_field_csv(clus.field, path("macro_tensors_clustered.csv"));
  detail::write_history_csv(clus.history, path("clustered_fmo_history.csv"));
  const ClusterStrainLoads loads = select_cluster_strains(clus, macro.mesh, asg);
  detail::write_strains_csv(loads, path("cluster_strains.csv"));

  nlohmann::json manifest;
  manifest["schema"] = "latopt-manifest-v1";
  manifest["config"] = detail::config_to_json(cfg);
  manifest["macro"]["free_compliance"] = free_sol.compliance;
  manifest["macro"]["clustered_compliance"] = clus.compliance;
  std::ofstream out(path("manifest.json"), std::ios::binary);
  out << manifest.dump(2) << '\n';
  std::printf("macro: free compliance %.6g, clustered (K=%d) %.6g\n", free_sol.compliance,
              cfg.K_clusters, clus.compliance);
  return kExitOk;
}

/// One inverse homogenization from micro.target / micro.strain_load.
int run_micro(const PipelineConfig& cfg) {
  if (!cfg.micro_target || !cfg.micro_strain_load)
    throw ConfigError("micro mode needs micro.target and micro.strain_load in the config");
  fs::create_directories(cfg.output_dir);
  const auto path = [&](const std::string& n) { return (fs::path(cfg.output_dir) / n).string(); };

  InvHomProblem prob = make_micro_problem(cfg, *cfg.micro_target, *cfg.micro_strain_load);
  prob.log_path = path("invhom.csv");
  const InvHomResult res = solve_invhom(prob);
  LatticeUnit unit = prob.unit_template;
  unit.set_widths(res.widths);
  const LatticeUnit pruned = prune_bars(unit, cfg.prune_threshold);
  const RescaleResult rescaled = rescale_volume(pruned, cfg.V_star, cfg.N, cfg.p_min, cfg.p_max);
  save_unit(rescaled.unit, path("unit.json"));
  const DensityGrid grid = rasterize(rescaled.unit, cfg.N);
  write_density_csv(grid, path("unit.csv"));
  write_density_pgm(grid, path("unit.pgm"));

  nlohmann::json manifest;
  manifest["schema"] = "latopt-manifest-v1";
  manifest["config"] = detail::config_to_json(cfg);
  manifest["micro"]["J"] = res.J;
  manifest["micro"]["kappa_ks"] = res.kappa_ks;
  manifest["micro"]["c_b"] = res.c_b;
  manifest["micro"]["f_P"] = res.f_P;
  manifest["micro"]["volume"] = rescaled.volume;
  manifest["micro"]["converged"] = res.converged;
  std::ofstream out(path("manifest.json"), std::ios::binary);
  out << manifest.dump(2) << '\n';
  std::printf("micro: J %.6g, kappa_ks %.6g, volume %.4f\n", res.J, res.kappa_ks, rescaled.volume);
  return kExitOk;
}

int run_full(const PipelineConfig& cfg) {
  const PipelineResult res = run_pipeline(cfg);
  std::printf("pipeline: free %.6g, clustered %.6g, %zu units -> %s\n", res.free_compliance,
              res.clustered_compliance, res.units.size(), cfg.output_dir.c_str());
  return kExitOk;
}

/// Re-assemble from previously written labels and unit JSON files.
int run_assemble(const PipelineConfig& cfg, const std::string& out_dir) {
  const fs::path in_dir(cfg.output_dir);
  std::vector<int> labels;
  {
    std::ifstream in(in_dir / "cluster_labels.csv");
    if (!in) throw ConfigError("assemble: missing cluster_labels.csv in " + cfg.output_dir);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      const auto comma = line.find(',');
      if (comma == std::string::npos) continue;
      labels.push_back(std::stoi(line.substr(comma + 1)));
    }
  }
  std::vector<LatticeUnit> units;
  for (int k = 0;; ++k) {
    const fs::path p = in_dir / ("unit_" + std::to_string(k) + ".json");
    if (!fs::exists(p)) break;
    units.push_back(load_unit(p.string()));
  }
  if (units.empty()) throw ConfigError("assemble: no unit_*.json files in " + cfg.output_dir);

  std::vector<std::string> failures;
  const Eigen::ArrayXXd img =
      assemble_structure(labels, units, cfg.macro_nx, cfg.macro_ny, cfg.N, &failures);
  const fs::path out = out_dir.empty() ? in_dir : fs::path(out_dir);
  fs::create_directories(out);
  write_pgm_rect(img, (out / "assembled.pgm").string());
  for (const auto& f : failures) std::fprintf(stderr, "connector failure: %s\n", f.c_str());
  std::printf("assemble: %dx%d image -> %s\n", static_cast<int>(img.cols()),
              static_cast<int>(img.rows()), (out / "assembled.pgm").string().c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latopt: two-stage lattice structure optimization"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  int threads = 0;
  for (auto* sub : {app.add_subcommand("macro", "macro tensor field optimization + clustering"),
                    app.add_subcommand("micro", "single buckling-aware inverse homogenization"),
                    app.add_subcommand("run", "full two-stage pipeline"),
                    app.add_subcommand("assemble", "tile units into the macro layout")}) {
    sub->add_option("--config", config_path, "configuration file (key = value, or .json)")
        ->required();
    sub->add_option("--out", out_dir, "output directory (overrides output_dir)");
    sub->add_option("--threads", threads, "worker threads for per-cluster solves");
  }

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("assemble")) {
      // assemble reads artifacts from output_dir and writes next to them or to --out
      PipelineConfig cfg = load_config(config_path);
      if (threads > 0) cfg.threads = threads;
      return run_assemble(cfg, out_dir);
    }
    const PipelineConfig cfg = make_config(config_path, out_dir, threads);
    if (app.got_subcommand("macro")) return run_macro(cfg);
    if (app.got_subcommand("micro")) return run_micro(cfg);
    return run_full(cfg);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "solver error: %s\n", e.what());
    return kExitSolver;
  }
}
