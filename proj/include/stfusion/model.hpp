#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stfusion/observation.hpp"
#include "stfusion/spde.hpp"
#include "stfusion/temporal.hpp"

namespace stfusion {

// A covariate that can be evaluated anywhere on the mesh hull (trend,
// elevation raster, ...). Enters the response linear predictor as theta^T x.
struct FixedEffect {
  std::string name;
  std::function<double(const Point2&, int)> eval;  // (location, 1-based time)
};

struct FieldSpec {
  std::string name;
};

struct FusionModelSpec {
  int K = 0;                        // number of covariate fields
  std::vector<FieldSpec> fields;    // size K+1, response last
  std::vector<FixedEffect> fixed_effects;
  ObservationBatch observations;
  const Mesh* mesh = nullptr;
  int T = 1;
  double vague_variance = 10.0;     // prior variance of intercepts / theta

  int n_fields() const { return K + 1; }
  int n_linear() const { return K + 1 + static_cast<int>(fixed_effects.size()); }
};

// The hyperparameter vector theta. Per-source noise variances are NaN when
// that source has no observations for the variable; beta has size K.
struct HyperVector {
  std::vector<double> range, sd, ar;          // size K+1
  std::vector<double> tau2_point, tau2_grid;  // size K+1
  std::vector<double> beta;                   // size K

  static HyperVector zeros(int K);
};

// Joint Gaussian system over x = [eta_1 ... eta_{K+1} ; alpha ; theta].
// Field k occupies columns [k*nT, (k+1)*nT), time-major; the linear block
// follows with intercepts first.
struct GaussianSystem {
  SpMat Q;                      // prior precision (block diagonal)
  SpMat A;                      // m x dim observation operator
  Eigen::VectorXd noise_prec;   // m, diagonal of D
  Eigen::VectorXd y;
  int n_space = 0, T = 0, K = 0, n_linear = 0;
  double prior_logdet = 0.0;    // log|Q|, computed analytically

  int dim() const { return (K + 1) * n_space * T + n_linear; }
  int m() const { return static_cast<int>(y.size()); }
  int field_offset(int k) const { return k * n_space * T; }
  int linear_offset() const { return (K + 1) * n_space * T; }
};

// Precomputes everything about the observations that does not depend on the
// hyperparameters (barycentric weights, cell vertex sets, fixed-effect
// values), so repeated assembly during optimization is cheap.
class SystemBuilder {
 public:
  SystemBuilder(const FusionModelSpec& spec, const FemMatrices& fem,
                std::vector<std::string>* warnings = nullptr);

  GaussianSystem build(const HyperVector& h) const;

  const FusionModelSpec& spec() const { return *spec_; }
  const FemMatrices& fem() const { return *fem_; }

  // sparse row of the response linear predictor at a point target;
  // shared by assembly (response point rows) and prediction
  Eigen::SparseVector<double> response_point_row(const HyperVector& h,
                                                 const Point2& p,
                                                 int time_index) const;

 private:
  struct RowEntry {
    int col;
    double weight;
    int beta_index;  // -1: plain entry, k >= 0: scaled by beta_k
  };
  struct CachedRow {
    std::vector<RowEntry> entries;
    double value;
    int variable;    // 0-based
    bool is_block;
  };

  void cache_point_row(const PointObs& o);
  void cache_block_row(const BlockObs& o,
                       const BlockOperatorOptions& opts,
                       std::vector<std::string>* warnings);

  const FusionModelSpec* spec_;
  const FemMatrices* fem_;
  std::vector<CachedRow> rows_;
  int dim_ = 0;
};

GaussianSystem assemble_system(const FusionModelSpec& spec, const FemMatrices& fem,
                               const HyperVector& h);

// alpha_hat + theta_hat^T x + sum_k beta_k eta_hat_k + eta_hat_{K+1}
// at a point or block target, given the stacked latent/linear vector.
double linear_predictor(const SystemBuilder& builder, const HyperVector& h,
                        const Eigen::VectorXd& latents, const Point2& p,
                        int time_index);
double linear_predictor_block(const SystemBuilder& builder, const HyperVector& h,
                              const Eigen::VectorXd& latents, const Rect& cell,
                              int time_index);

}  // namespace stfusion
