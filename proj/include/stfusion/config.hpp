#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stfusion/inference.hpp"
#include "stfusion/model.hpp"
#include "stfusion/simulation.hpp"

namespace stfusion {

// Malformed or schema-violating configs throw this; the CLI maps it to the
// validation exit code.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MeshConfig {
  Rect domain{0.0, 5.0, 0.0, 10.0};
  double edge = 1.0;
  double buffer = 1.5;
};

struct FixedEffectConfig {
  std::string type;                  // "linear_trend" | "raster"
  std::vector<double> coefficients;  // linear_trend: per-coordinate slopes
  std::string path;                  // raster: block CSV, nearest-cell lookup
};

struct StandardizeConfig {
  int variable = 0;  // 1-based
  double mean = 0.0;
  double sd = 1.0;
};

struct DataConfig {
  std::string points;
  std::string blocks;  // optional
  std::vector<StandardizeConfig> standardize;
};

struct ModelConfig {
  int k_covariates = 2;
  std::vector<std::string> field_names;  // defaults to 1..K+1
  int t_train = 10;
  double vague_variance = 10.0;
  std::vector<FixedEffectConfig> fixed_effects;
  PriorDefaults priors;
};

struct InferenceConfig {
  OptimOptions optim;
  double grid_step = 1.0;
  int factorial_max_dim = 6;
  int dense_threshold = 0;
  bool latent_sd = false;
  bool mixture_quantiles = true;

  FitOptions fit_options() const {
    FitOptions f;
    f.optim = optim;
    f.grid_step = grid_step;
    f.factorial_max_dim = factorial_max_dim;
    f.dense_threshold = dense_threshold;
    f.with_latent_sd = latent_sd;
    return f;
  }
};

struct StudyConfig {
  SimConfig sim;
  std::vector<int> t_values{3, 7, 10};
  int n_replicates = 10;
  std::vector<std::string> models{"point", "grid", "joint"};
  bool missing_grid_covariates = false;
};

struct RunConfig {
  MeshConfig mesh;
  ModelConfig model;
  DataConfig data;
  InferenceConfig inference;
  StudyConfig study;
  std::string output_dir = "out";
  std::uint64_t seed = 1;
  int threads = 1;
};

// Parses and schema-validates; unknown keys anywhere are an error.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);

// documented schema, printed by --print-schema
std::string config_schema();

// FNV-1a hash of the raw config bytes, for output provenance
std::string config_hash(const std::string& text);

// instantiate library objects from a validated config
Mesh build_mesh(const MeshConfig& cfg);
std::vector<FixedEffect> build_fixed_effects(const ModelConfig& cfg);
// loads CSVs, applies standardization, checks variable ids against K+1
ObservationBatch load_observations(const DataConfig& cfg, int n_variables);
StudyOptions build_study_options(const RunConfig& cfg);

}  // namespace stfusion
