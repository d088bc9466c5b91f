#include "stfusion/temporal.hpp"

#include <cmath>
#include <stdexcept>

namespace stfusion {

SpMat ar1_precision(const Ar1Params& params) {
  if (!(std::abs(params.a) < 1.0))
    throw std::invalid_argument("ar1_precision: |a| must be < 1");
  if (params.T < 1) throw std::invalid_argument("ar1_precision: T must be >= 1");

  const int T = params.T;
  const double a = params.a;
  SpMat Q(T, T);
  if (T == 1) {
    Q.insert(0, 0) = 1.0;
    Q.makeCompressed();
    return Q;
  }
  const double s = 1.0 / (1.0 - a * a);
  std::vector<Eigen::Triplet<double>> tr;
  tr.reserve(3 * T);
  for (int t = 0; t < T; ++t) {
    const bool interior = t > 0 && t < T - 1;
    tr.emplace_back(t, t, s * (interior ? 1.0 + a * a : 1.0));
    if (t + 1 < T) {
      tr.emplace_back(t, t + 1, -s * a);
      tr.emplace_back(t + 1, t, -s * a);
    }
  }
  Q.setFromTriplets(tr.begin(), tr.end());
  Q.makeCompressed();
  return Q;
}

double ar1_precision_logdet(const Ar1Params& params) {
  if (!(std::abs(params.a) < 1.0))
    throw std::invalid_argument("ar1_precision_logdet: |a| must be < 1");
  // stationary AR(1) correlation matrix has det (1-a^2)^{T-1}
  return -(params.T - 1) * std::log1p(-params.a * params.a);
}

SpMat kron_sparse(const SpMat& A, const SpMat& B) {
  SpMat K(A.rows() * B.rows(), A.cols() * B.cols());
  std::vector<Eigen::Triplet<double>> tr;
  tr.reserve(static_cast<size_t>(A.nonZeros()) * B.nonZeros());
  for (int ka = 0; ka < A.outerSize(); ++ka) {
    for (SpMat::InnerIterator ita(A, ka); ita; ++ita) {
      for (int kb = 0; kb < B.outerSize(); ++kb) {
        for (SpMat::InnerIterator itb(B, kb); itb; ++itb) {
          tr.emplace_back(static_cast<int>(ita.row() * B.rows() + itb.row()),
                          static_cast<int>(ita.col() * B.cols() + itb.col()),
                          ita.value() * itb.value());
        }
      }
    }
  }
  K.setFromTriplets(tr.begin(), tr.end());
  K.makeCompressed();
  return K;
}

SpatioTemporalPrecision kron_assemble(const SpMat& Q_time,
                                      const SpatialPrecision& Q_space) {
  SpatioTemporalPrecision out;
  out.n_space = Q_space.n;
  out.T = static_cast<int>(Q_time.rows());
  out.Q_st = kron_sparse(Q_time, Q_space.Q);
  return out;
}

std::vector<Eigen::VectorXd> simulate_ar1_path(
    const std::vector<Eigen::VectorXd>& spatial_samples, double a) {
  if (!(std::abs(a) < 1.0))
    throw std::invalid_argument("simulate_ar1_path: |a| must be < 1");
  std::vector<Eigen::VectorXd> eta;
  eta.reserve(spatial_samples.size());
  const double innov = std::sqrt(1.0 - a * a);
  for (size_t t = 0; t < spatial_samples.size(); ++t) {
    if (t == 0)
      eta.push_back(spatial_samples[0]);
    else
      eta.push_back(a * eta[t - 1] + innov * spatial_samples[t]);
  }
  return eta;
}

}  // namespace stfusion
