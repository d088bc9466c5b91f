#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stfusion/config.hpp"
#include "stfusion/parallel.hpp"
#include "stfusion/prediction.hpp"

namespace fs = std::filesystem;
using namespace stfusion;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string out;
  bool keep_data = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool need_config = true) {
  auto* c = cmd->add_option("--config", args.config_path, "JSON config file");
  if (need_config) c->required();
  cmd->add_option("--seed", args.seed, "override the config seed");
  cmd->add_option("--threads", args.threads, "worker threads (0 = default)");
  cmd->add_option("--out", args.out, "override the config output directory");
}

std::string slurp(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

RunConfig load_run(const CommonArgs& args, std::string* raw_text) {
  *raw_text = slurp(args.config_path);
  RunConfig cfg = parse_config(*raw_text);
  if (args.seed) {
    cfg.seed = *args.seed;
    cfg.study.sim.seed = *args.seed;
  }
  if (args.threads) cfg.threads = *args.threads;
  if (!args.out.empty()) cfg.output_dir = args.out;
  set_num_threads(cfg.threads);
  fs::create_directories(cfg.output_dir);
  return cfg;
}

void write_manifest(const RunConfig& cfg, const std::string& raw,
                    const std::string& command,
                    const std::vector<std::pair<std::string, std::string>>& extra) {
  std::ofstream os(cfg.output_dir + "/run_manifest.txt");
  os << "command " << command << "\n"
     << "config_hash " << config_hash(raw) << "\n"
     << "seed " << cfg.seed << "\n"
     << "threads " << cfg.threads << "\n";
  for (const auto& [k, v] : extra) os << k << " " << v << "\n";
}

FusionModelSpec make_spec(const RunConfig& cfg, const Mesh& mesh,
                          ObservationBatch obs) {
  FusionModelSpec spec;
  spec.K = cfg.model.k_covariates;
  if (cfg.model.field_names.empty()) {
    for (int k = 0; k <= spec.K; ++k) spec.fields.push_back({std::to_string(k + 1)});
  } else {
    for (const auto& n : cfg.model.field_names) spec.fields.push_back({n});
  }
  spec.fixed_effects = build_fixed_effects(cfg.model);
  spec.observations = std::move(obs);
  spec.mesh = &mesh;
  spec.T = cfg.model.t_train;
  spec.vague_variance = cfg.model.vague_variance;
  return spec;
}

int cmd_simulate(const CommonArgs& args) {
  std::string raw;
  RunConfig cfg = load_run(args, &raw);
  SimDataset ds = generate_replicate(cfg.study.sim, 0);

  const std::string dir = cfg.output_dir;
  write_points_csv(dir + "/points.csv", ds.train.points);
  write_blocks_csv(dir + "/blocks.csv", ds.train.blocks);
  save_mesh(ds.mesh, dir + "/sim_mesh.txt");

  {
    std::ofstream os(dir + "/test_truth.csv");
    os << "easting,northing,time,value\n";
    char buf[160];
    for (int i = 0; i < ds.test_truth.rows(); ++i)
      for (int t = 0; t < ds.test_truth.cols(); ++t) {
        std::snprintf(buf, sizeof buf, "%.10g,%.10g,%d,%.10g\n",
                      ds.test_points[i].easting, ds.test_points[i].northing,
                      t + 1, ds.test_truth(i, t));
        os << buf;
      }
  }
  {
    std::ofstream os(dir + "/true_fields.csv");
    os << "field,node,time,value\n";
    char buf[120];
    for (size_t k = 0; k < ds.fields.size(); ++k)
      for (int t = 0; t < ds.fields[k].cols(); ++t)
        for (int i = 0; i < ds.fields[k].rows(); ++i) {
          std::snprintf(buf, sizeof buf, "%zu,%d,%d,%.10g\n", k + 1, i, t + 1,
                        ds.fields[k](i, t));
          os << buf;
        }
  }
  write_manifest(cfg, raw, "simulate",
                 {{"point_rows", std::to_string(ds.train.points.size())},
                  {"block_rows", std::to_string(ds.train.blocks.size())}});
  return kExitOk;
}

int cmd_fit(const CommonArgs& args) {
  std::string raw;
  RunConfig cfg = load_run(args, &raw);
  const Mesh mesh = build_mesh(cfg.mesh);
  ObservationBatch obs =
      load_observations(cfg.data, cfg.model.k_covariates + 1);
  const size_t n_points = obs.points.size(), n_blocks = obs.blocks.size();
  FusionModelSpec spec = make_spec(cfg, mesh, std::move(obs));
  const FemMatrices fem = assemble_fem(mesh);

  std::vector<std::string> warnings;
  const HyperMap map = make_hyper_map(spec, cfg.model.priors);
  FusionFit fitter(spec, fem, map, &warnings);
  FitResult fit = fitter.fit(default_init(spec), cfg.inference.fit_options());

  const std::string dir = cfg.output_dir;
  write_hyper_summary_csv(dir + "/hyper_summary.csv", fit);
  write_latent_csv(dir + "/latent.csv", fit, spec);
  save_fit_state(dir + "/fit_state.bin", fit);
  if (!fit.converged)
    std::cerr << "warning: optimizer hit its evaluation budget before converging\n";
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  write_manifest(cfg, raw, "fit",
                 {{"point_rows", std::to_string(n_points)},
                  {"block_rows", std::to_string(n_blocks)},
                  {"converged", fit.converged ? "true" : "false"},
                  {"hessian_fallback", fit.hessian_fallback ? "true" : "false"},
                  {"evaluations", std::to_string(fit.evaluations)},
                  {"warnings", std::to_string(warnings.size())}});
  return kExitOk;
}

std::vector<PredictionTarget> read_targets(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open targets file " + path);
  std::string line;
  if (!std::getline(is, line) || line.rfind("easting,northing,time", 0) != 0)
    throw ConfigError("targets file must start with header easting,northing,time");
  std::vector<PredictionTarget> targets;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    PredictionTarget t;
    if (std::sscanf(line.c_str(), "%lf,%lf,%d", &t.location.easting,
                    &t.location.northing, &t.time) != 3)
      throw ConfigError("targets line " + std::to_string(lineno) + ": parse error");
    targets.push_back(t);
  }
  return targets;
}

int cmd_predict(const CommonArgs& args, const std::string& fit_path,
                const std::string& targets_path, int raster_ncols,
                int raster_nrows, int raster_time) {
  std::string raw;
  RunConfig cfg = load_run(args, &raw);
  const Mesh mesh = build_mesh(cfg.mesh);
  ObservationBatch obs =
      load_observations(cfg.data, cfg.model.k_covariates + 1);
  FusionModelSpec spec = make_spec(cfg, mesh, std::move(obs));
  const FemMatrices fem = assemble_fem(mesh);
  FitResult fit = load_fit_state(fit_path);
  if (fit.grid.empty() ||
      fit.grid[0].cond_mean.size() !=
          (spec.K + 1) * mesh.n_vertices() * spec.T + spec.n_linear())
    throw ConfigError("fit state does not match the configured model");

  PredictOptions popts;
  popts.mixture_quantiles = cfg.inference.mixture_quantiles;

  // partition targets: in-window, one-day-ahead, skipped
  std::vector<PredictionTarget> in_window, ahead;
  int skipped = 0;
  for (const auto& t : read_targets(targets_path)) {
    bool inside = true;
    try {
      locate(mesh, t.location);
    } catch (const std::exception&) {
      inside = false;
    }
    if (!inside || t.time < 1 || t.time > spec.T + 1) {
      std::cerr << "warning: skipping target (" << t.location.easting << ", "
                << t.location.northing << ", t=" << t.time
                << "): " << (inside ? "time outside 1..T+1" : "outside mesh hull")
                << "\n";
      ++skipped;
      continue;
    }
    (t.time <= spec.T ? in_window : ahead).push_back(t);
  }

  PredictionSurface surf;
  surf.mean.resize(0);
  auto append = [&](const PredictionSurface& s) {
    const auto off = surf.targets.size();
    surf.targets.insert(surf.targets.end(), s.targets.begin(), s.targets.end());
    surf.mean.conservativeResize(off + s.targets.size());
    surf.sd.conservativeResize(off + s.targets.size());
    surf.q025.conservativeResize(off + s.targets.size());
    surf.q975.conservativeResize(off + s.targets.size());
    for (size_t i = 0; i < s.targets.size(); ++i) {
      surf.mean[off + i] = s.mean[i];
      surf.sd[off + i] = s.sd[i];
      surf.q025[off + i] = s.q025[i];
      surf.q975[off + i] = s.q975[i];
    }
  };
  if (!in_window.empty()) append(predict_at(fit, spec, fem, in_window, popts));
  if (!ahead.empty()) append(forecast_one_day(fit, spec, fem, ahead, popts));

  const std::string dir = cfg.output_dir;
  write_prediction_csv(dir + "/predictions.csv", surf);

  if (raster_ncols > 0 && raster_nrows > 0) {
    const Rect& box = mesh.interior_bbox;
    auto lattice = lattice_targets(box, raster_ncols, raster_nrows, raster_time);
    PredictionSurface rs =
        raster_time <= spec.T ? predict_at(fit, spec, fem, lattice, popts)
                              : forecast_one_day(fit, spec, fem, lattice, popts);
    RasterSpec rspec{raster_ncols, raster_nrows, box.xmin, box.ymin,
                     box.width() / raster_ncols};
    Eigen::MatrixXd mean(raster_nrows, raster_ncols), sd(raster_nrows, raster_ncols);
    for (int r = 0; r < raster_nrows; ++r)
      for (int c = 0; c < raster_ncols; ++c) {
        // lattice rows run south to north; rasters store the top row first
        const int i = (raster_nrows - 1 - r) * raster_ncols + c;
        mean(r, c) = rs.mean[i];
        sd(r, c) = rs.sd[i];
      }
    write_esri_ascii(dir + "/prediction_mean.asc", rspec, mean);
    write_esri_ascii(dir + "/prediction_sd.asc", rspec, sd);
  }

  write_manifest(cfg, raw, "predict",
                 {{"targets", std::to_string(surf.targets.size())},
                  {"skipped", std::to_string(skipped)}});
  return kExitOk;
}

int cmd_replicate_study(const CommonArgs& args) {
  std::string raw;
  RunConfig cfg = load_run(args, &raw);
  StudyOptions opts = build_study_options(cfg);
  if (args.keep_data) opts.keep_data_dir = cfg.output_dir + "/data";
  StudyResult res = run_study(cfg.study.sim, opts);

  const std::string dir = cfg.output_dir;
  write_study_params_csv(dir + "/study_params.csv", res);
  write_study_rmspe_csv(dir + "/study_rmspe.csv", res);
  {
    std::ofstream os(dir + "/study_coverage.csv");
    os << "replicate,model,t,scenario,hits,n\n";
    for (const auto& c : res.coverage)
      os << c.replicate << ',' << c.model << ',' << c.t << ',' << c.scenario
         << ',' << c.hits << ',' << c.n << "\n";
  }
  if (res.failures > 0)
    std::cerr << "warning: " << res.failures << " fit(s) failed and were excluded\n";
  write_manifest(cfg, raw, "replicate-study",
                 {{"failures", std::to_string(res.failures)},
                  {"param_rows", std::to_string(res.params.size())},
                  {"rmspe_rows", std::to_string(res.rmspe.size())}});
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian point-grid data fusion for spatio-temporal fields"};
  app.require_subcommand(0, 1);

  bool print_schema = false;
  app.add_flag("--print-schema", print_schema, "print the config schema and exit");

  CommonArgs sim_args, fit_args, pred_args, study_args;
  auto* sim = app.add_subcommand("simulate", "generate a synthetic dataset");
  add_common(sim, sim_args);

  auto* fit = app.add_subcommand("fit", "fit the fusion model to data");
  add_common(fit, fit_args);

  auto* pred = app.add_subcommand("predict", "predict from a saved fit");
  add_common(pred, pred_args);
  std::string fit_path, targets_path;
  int raster_ncols = 0, raster_nrows = 0, raster_time = 1;
  pred->add_option("--fit", fit_path, "fit_state.bin from a fit run")->required();
  pred->add_option("--targets", targets_path,
                   "CSV of prediction targets (easting,northing,time)")
      ->required();
  pred->add_option("--raster-ncols", raster_ncols, "emit rasters with this many columns");
  pred->add_option("--raster-nrows", raster_nrows, "raster rows");
  pred->add_option("--raster-time", raster_time, "raster time slice");

  auto* study = app.add_subcommand("replicate-study", "run the simulation study");
  add_common(study, study_args);
  study->add_flag("--keep-data", study_args.keep_data,
                  "dump per-replicate datasets");

  CLI11_PARSE(app, argc, argv);

  if (print_schema) {
    std::cout << config_schema();
    return kExitOk;
  }
  if (app.get_subcommands().empty()) {
    std::cout << app.help();
    return kExitOk;
  }

  try {
    if (sim->parsed()) return cmd_simulate(sim_args);
    if (fit->parsed()) return cmd_fit(fit_args);
    if (pred->parsed())
      return cmd_predict(pred_args, fit_path, targets_path, raster_ncols,
                         raster_nrows, raster_time);
    if (study->parsed()) return cmd_replicate_study(study_args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return kExitOk;
}
