#include "stfusion/spde.hpp"

#include <cmath>
#include <stdexcept>

namespace stfusion {

double kappa_from_range(double range, double nu) {
  if (!(range > 0.0) || !(nu > 0.0))
    throw std::invalid_argument("kappa_from_range: range and nu must be > 0");
  return std::sqrt(8.0 * nu) / range;
}

double range_from_kappa(double kappa, double nu) {
  if (!(kappa > 0.0) || !(nu > 0.0))
    throw std::invalid_argument("range_from_kappa: kappa and nu must be > 0");
  return std::sqrt(8.0 * nu) / kappa;
}

double matern_correlation(double d, const MaternParams& params) {
  if (d < 0.0) throw std::invalid_argument("matern_correlation: d must be >= 0");
  const double kappa = kappa_from_range(params.range, params.nu);
  const double z = kappa * d;
  if (z == 0.0) return 1.0;
  const double nu = params.nu;
  return std::pow(2.0, 1.0 - nu) / std::tgamma(nu) * std::pow(z, nu) *
         std::cyl_bessel_k(nu, z);
}

double matern_marginal_variance(double kappa, double nu, int d_dim) {
  if (!(kappa > 0.0) || !(nu > 0.0))
    throw std::invalid_argument("matern_marginal_variance: kappa, nu must be > 0");
  if (d_dim != 2)
    throw std::invalid_argument("matern_marginal_variance: only d = 2 supported");
  return std::tgamma(nu) /
         (std::tgamma(nu + 1.0) * 4.0 * M_PI * std::pow(kappa, 2.0 * nu));
}

SpatialPrecision build_precision(const FemMatrices& fem, const MaternParams& params) {
  if (params.nu != 1.0)
    throw std::invalid_argument("build_precision: only nu = 1 (alpha = 2) supported");
  if (!(params.range > 0.0) || !(params.sd > 0.0))
    throw std::invalid_argument("build_precision: range and sd must be > 0");

  const double kappa = kappa_from_range(params.range, params.nu);
  const int n = static_cast<int>(fem.c_diag.size());

  SpMat K = fem.G;
  for (int i = 0; i < n; ++i) K.coeffRef(i, i) += kappa * kappa * fem.c_diag[i];
  K.makeCompressed();

  Eigen::VectorXd cinv = fem.c_diag.cwiseInverse();
  SpMat Q = K * cinv.asDiagonal() * K;

  // unit-noise SPDE solution has marginal variance 1/(4 pi kappa^2)
  const double sigma_u2 = matern_marginal_variance(kappa, params.nu, 2);
  const double tau2 = sigma_u2 / (params.sd * params.sd);
  Q *= tau2;
  Q.makeCompressed();

  SpatialPrecision out;
  out.Q = std::move(Q);
  out.params = params;
  out.n = n;
  return out;
}

FieldSampler::FieldSampler(const SpatialPrecision& prec) : FieldSampler(prec.Q) {}

FieldSampler::FieldSampler(const SpMat& Q) : n_(static_cast<int>(Q.rows())) {
  llt_ = std::make_shared<Eigen::SimplicialLLT<SpMat>>();
  llt_->compute(Q);
  if (llt_->info() != Eigen::Success)
    throw std::runtime_error("FieldSampler: Cholesky factorization failed");
}

Eigen::VectorXd FieldSampler::sample(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  return sample(rng);
}

Eigen::VectorXd FieldSampler::sample(std::mt19937_64& rng) const {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd z(n_);
  for (int i = 0; i < n_; ++i) z[i] = normal(rng);
  // Q = P^T L L^T P  =>  x = P^T L^{-T} z has covariance Q^{-1}
  Eigen::VectorXd w = llt_->matrixU().solve(z);
  return llt_->permutationPinv() * w;
}

Eigen::VectorXd sample_field(const SpatialPrecision& prec, std::uint64_t seed) {
  return FieldSampler(prec).sample(seed);
}

}  // namespace stfusion
