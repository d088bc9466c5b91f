#pragma once

#include <vector>

#include "stfusion/spde.hpp"

namespace stfusion {

struct Ar1Params {
  double a = 0.0;  // per-step autocorrelation, |a| < 1
  int T = 1;
};

// Tridiagonal precision of a stationary unit-marginal-variance AR(1).
SpMat ar1_precision(const Ar1Params& params);

// log-determinant of ar1_precision(params), analytic
double ar1_precision_logdet(const Ar1Params& params);

struct SpatioTemporalPrecision {
  SpMat Q_st;  // time-major: all nodes at t=0, then t=1, ...
  int n_space = 0;
  int T = 0;
};

// Q_st = Q_time (x) Q_space, time-major block layout.
SpatioTemporalPrecision kron_assemble(const SpMat& Q_time, const SpatialPrecision& Q_space);
SpMat kron_sparse(const SpMat& A, const SpMat& B);

// eta_1 = mu_1; eta_t = a eta_{t-1} + sqrt(1-a^2) mu_t
std::vector<Eigen::VectorXd> simulate_ar1_path(
    const std::vector<Eigen::VectorXd>& spatial_samples, double a);

}  // namespace stfusion
