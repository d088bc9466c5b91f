#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stfusion/inference.hpp"
#include "stfusion/model.hpp"

namespace stfusion {

// Generating values for the synthetic study. Index order: covariate fields
// first, response last (variables y_1, y_2, y_3 with K = 2).
struct SimTrueParams {
  HyperVector hyper = HyperVector::zeros(2);
  std::vector<double> alpha{0.5, 0.8, 1.0};
  std::vector<double> theta{-0.2};

  // The generating table lists marginal variances sigma^2 = (1, 0.5, 0.3);
  // HyperVector carries standard deviations.
  SimTrueParams() {
    hyper.range = {4.0, 3.0, 2.0};
    hyper.sd = {1.0, std::sqrt(0.5), std::sqrt(0.3)};
    hyper.ar = {0.4, 0.5, 0.6};
    hyper.tau2_point = {0.09, 0.04, 0.01};
    hyper.tau2_grid = {0.25, 0.16, 0.09};
    hyper.beta = {-0.3, -0.4};
  }
};

struct SimConfig {
  SimTrueParams truth;
  Rect domain{0.0, 5.0, 0.0, 10.0};
  int T = 11;  // simulated days; must cover max(t_train) + 1
  int n_sensors_response = 22;   // y_2 and y_3 share these
  int n_sensors_misaligned = 10; // y_1, disjoint from the response set
  int grid_nx = 5, grid_ny = 10; // block cells over the domain
  int mc_points_per_cell = 2500;
  int n_test = 20;
  double sim_mesh_edge = 0.5;
  double sim_mesh_buffer = 2.0;
  std::uint64_t seed = 1;
};

struct SimDataset {
  ObservationBatch train;            // all simulated days, all variables
  std::vector<Point2> sensors_response, sensors_misaligned;
  std::vector<Point2> test_points;
  Eigen::MatrixXd test_truth;        // n_test x T noise-free response surface
  Eigen::MatrixXd test_obs;          // test_truth + point measurement noise
  Mesh mesh;                         // simulation mesh
  std::vector<Eigen::MatrixXd> fields;  // K+1 matrices, n_vertices x T
};

SimDataset generate_replicate(const SimConfig& cfg, std::uint64_t replicate_seed);

// linear trend used throughout the study: 0.2 * easting + 0.3 * northing
FixedEffect study_trend();

double rmspe(const std::vector<double>& predictions,
             const std::vector<double>& truths);

enum class ModelVariant { PointOnly, GridOnly, Joint };
std::string model_name(ModelVariant m);

struct StudyOptions {
  std::vector<int> t_values{3, 7, 10};
  int n_replicates = 10;
  std::vector<ModelVariant> models{ModelVariant::PointOnly,
                                   ModelVariant::GridOnly, ModelVariant::Joint};
  bool missing_grid_covariates = false;  // robustness: blocks only for y_3
  double fit_mesh_edge = 1.0;
  double fit_mesh_buffer = 1.5;
  FitOptions fit_options;
  std::string keep_data_dir;  // dump per-replicate CSVs here when non-empty
};

struct StudyResult {
  struct ParamRow {
    std::string param, model;
    int t = 0;
    double mean = 0.0, q025 = 0.0, q975 = 0.0, rmse = 0.0;
  };
  struct RmspeRow {
    int replicate = 0;
    std::string model;
    int t = 0;
    std::string scenario;  // "last_day" or "one_day_ahead"
    double rmspe = 0.0;
  };
  struct CoverageRow {
    int replicate = 0;
    std::string model;
    int t = 0;
    std::string scenario;
    int hits = 0, n = 0;
  };
  std::vector<ParamRow> params;
  std::vector<RmspeRow> rmspe;
  std::vector<CoverageRow> coverage;
  int failures = 0;
};

StudyResult run_study(const SimConfig& cfg, const StudyOptions& opts);

// observation subset and model spec for one study fit
ObservationBatch study_observations(const SimDataset& ds, int t_train,
                                    ModelVariant model,
                                    bool missing_grid_covariates);

void write_study_params_csv(const std::string& path, const StudyResult& r);
void write_study_rmspe_csv(const std::string& path, const StudyResult& r);

// true value of a named study parameter (alpha_1, beta_2, sigma2_3, ...)
double study_true_value(const SimTrueParams& truth, const std::string& name);

}  // namespace stfusion
