#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCholesky>

#include <cstdint>
#include <memory>
#include <random>

#include "stfusion/geometry.hpp"

namespace stfusion {

struct MaternParams {
  double range = 1.0;  // rho, distance of ~0.1 correlation
  double sd = 1.0;     // marginal standard deviation
  double nu = 1.0;     // smoothness; only nu = 1 has a sparse precision here
};

double kappa_from_range(double range, double nu);
double range_from_kappa(double kappa, double nu);
double matern_correlation(double d, const MaternParams& params);
double matern_marginal_variance(double kappa, double nu, int d_dim);

struct SpatialPrecision {
  SpMat Q;
  MaternParams params;
  int n = 0;
};

// Q = tau^2 (kappa^2 C + G) C^{-1} (kappa^2 C + G), lumped C, scaled so the
// marginal variance of the field equals params.sd^2. Requires nu == 1.
SpatialPrecision build_precision(const FemMatrices& fem, const MaternParams& params);

// Holds the Cholesky factor so repeated draws share the factorization.
class FieldSampler {
 public:
  explicit FieldSampler(const SpatialPrecision& prec);
  explicit FieldSampler(const SpMat& Q);

  // x = P^T L^{-T} z with z ~ N(0, I); deterministic given seed
  Eigen::VectorXd sample(std::uint64_t seed) const;
  Eigen::VectorXd sample(std::mt19937_64& rng) const;

  int dim() const { return n_; }

 private:
  int n_ = 0;
  std::shared_ptr<Eigen::SimplicialLLT<SpMat>> llt_;
};

Eigen::VectorXd sample_field(const SpatialPrecision& prec, std::uint64_t seed);

}  // namespace stfusion
