#pragma once

#include <string>
#include <vector>

#include "stfusion/inference.hpp"
#include "stfusion/model.hpp"

namespace stfusion {

struct PredictionTarget {
  Point2 location;
  int time = 1;  // 1-based; T+1 only via forecast_one_day
};

struct PredictionSurface {
  std::vector<PredictionTarget> targets;
  Eigen::VectorXd mean, sd, q025, q975;
};

struct PredictOptions {
  // per-grid-point Gaussian mixture quantiles; false uses a single Gaussian
  // at the mixture moments (cheaper, slightly narrower intervals)
  bool mixture_quantiles = true;
  // add the response's point measurement-error variance, turning latent-
  // process credible intervals into prediction intervals for new point
  // observations (ignored when the fit has no response point data)
  bool include_noise_variance = false;
};

// Response-surface prediction within the training window, mixing the
// conditional Gaussians over the hyperparameter grid.
PredictionSurface predict_at(const FitResult& fit, const FusionModelSpec& spec,
                             const FemMatrices& fem,
                             const std::vector<PredictionTarget>& targets,
                             const PredictOptions& opts = {});

// One-step-ahead prediction: each latent field propagates as a*eta_T with
// innovation variance (1-a^2)*sigma^2. All targets must have time == T+1.
PredictionSurface forecast_one_day(const FitResult& fit,
                                   const FusionModelSpec& spec,
                                   const FemMatrices& fem,
                                   const std::vector<PredictionTarget>& targets,
                                   const PredictOptions& opts = {});

// fraction of truths inside [q025, q975]
double coverage_95(const PredictionSurface& surface,
                   const std::vector<double>& truths);

// regular lattice of point targets over a rectangle (cell centers)
std::vector<PredictionTarget> lattice_targets(const Rect& box, int ncols,
                                              int nrows, int time_index);

void write_prediction_csv(const std::string& path,
                          const PredictionSurface& surface);

// one ESRI ASCII grid per call; values row-major, top row first
struct RasterSpec {
  int ncols = 0, nrows = 0;
  double xllcorner = 0.0, yllcorner = 0.0, cellsize = 1.0;
  double nodata = -9999.0;
};
void write_esri_ascii(const std::string& path, const RasterSpec& spec,
                      const Eigen::MatrixXd& values);

}  // namespace stfusion
