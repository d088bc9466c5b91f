#pragma once

#include <cstdint>
#include <Eigen/SparseCholesky>
#ifdef STFUSION_USE_CHOLMOD
#include <Eigen/CholmodSupport>
#endif

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "stfusion/model.hpp"

namespace stfusion {

// ---------------------------------------------------------------------------
// Priors
// ---------------------------------------------------------------------------

enum class PriorKind {
  PcRange,    // P(rho < p1) = p2, type-2 Gumbel on 1/rho (d = 2)
  PcSd,       // P(sd > p1) = p2, exponential
  PcAr1Base0, // P(|a| > p1) = p2, shrink toward a = 0
  PcAr1Base1, // P(a > p1) = p2, shrink toward a = 1
  LogNormal,  // p1 = mean of log, p2 = sd of log
  Normal,     // p1 = mean, p2 = sd
  Fixed,      // parameter frozen at its initial value
};

struct PriorSpec {
  PriorKind kind = PriorKind::Fixed;
  double p1 = 0.0;
  double p2 = 0.0;
};

// log density in the natural parameterization; -inf outside the support
double prior_logdensity(const PriorSpec& prior, double value);

// ---------------------------------------------------------------------------
// Hyperparameter map: natural <-> unconstrained transform space
// ---------------------------------------------------------------------------

enum class HyperComponent { Range, Sd, Ar, Tau2Point, Tau2Grid, Beta };

struct HyperEntry {
  HyperComponent comp;
  int index = 0;  // field index, or beta index
  std::string name;
  PriorSpec prior;
};

// Enumerates the free hyperparameters of a model. Transforms: log for
// range/sd/tau2, atanh for a, identity for beta. Entries with a Fixed
// prior never appear.
class HyperMap {
 public:
  void add(const HyperEntry& e) { entries_.push_back(e); }
  int dim() const { return static_cast<int>(entries_.size()); }
  const std::vector<HyperEntry>& entries() const { return entries_; }

  Eigen::VectorXd to_transformed(const HyperVector& h) const;
  HyperVector from_transformed(const Eigen::VectorXd& z, const HyperVector& base) const;

  // sum over entries of log prior(value) + log |d value / d z|
  double log_prior_transformed(const Eigen::VectorXd& z) const;

  static double get(const HyperVector& h, const HyperEntry& e);
  static void set(HyperVector& h, const HyperEntry& e, double v);

 private:
  std::vector<HyperEntry> entries_;
};

// Builds the default hyperparameter map for a model: PC priors on range,
// sd, AR(1) coefficient and noise sds, Normal(0, vague) on beta. Noise
// entries exist only for (variable, support) pairs that have data.
struct PriorDefaults {
  double range_p1 = 0.0, range_alpha = 0.05;  // p1 = 0 -> 0.1 * domain diagonal
  double sd_factor = 2.0, sd_alpha = 0.05;    // P(sd > factor * data_sd) = alpha
  double ar_p1 = 0.8, ar_alpha = 0.5;
  bool ar_base_one = false;
  double beta_sd = 0.0;                       // 0 -> sqrt(vague_variance)
};

HyperMap make_hyper_map(const FusionModelSpec& spec, const PriorDefaults& defaults = {});

// A reasonable feasible starting point derived from the data scale.
HyperVector default_init(const FusionModelSpec& spec);

// ---------------------------------------------------------------------------
// Conditional Gaussian computations
// ---------------------------------------------------------------------------

// Sparse SPD solver for posterior precisions: supernodal CHOLMOD when
// available (about 5x faster on study-sized systems), Eigen's simplicial
// LDLT otherwise. The selected-inverse path always uses the simplicial
// factor, whose pattern the Takahashi recursion needs.
#ifdef STFUSION_USE_CHOLMOD
using PosteriorSolver = Eigen::CholmodSupernodalLLT<SpMat>;
#else
using PosteriorSolver = Eigen::SimplicialLDLT<SpMat>;
#endif

double posterior_solver_logdet(const PosteriorSolver& solver);
bool posterior_solver_ok(const PosteriorSolver& solver);

// Reusable symbolic factorization; the posterior precision pattern is
// identical for every hyperparameter value of the same model.
struct SolverCache {
  PosteriorSolver solver;
  bool analyzed = false;
};

// Posterior of the latent vector given data and one hyperparameter value,
// plus the exact log marginal likelihood (all likelihoods are Gaussian).
class Posterior {
 public:
  Posterior(const SystemBuilder& builder, const HyperVector& h,
            SolverCache* cache = nullptr);

  bool ok() const { return ok_; }
  double log_ml() const { return log_ml_; }
  const Eigen::VectorXd& mean() const { return mean_; }

  // marginal sds via Takahashi partial inversion of the factor,
  // or dense inversion below dense_threshold
  Eigen::VectorXd marginal_sd(int dense_threshold = 0) const;

  // row^T P^{-1} row, the posterior variance of a linear functional
  double functional_variance(const Eigen::SparseVector<double>& row) const;

  const GaussianSystem& system() const { return sys_; }

 private:
  GaussianSystem sys_;
  SpMat P_;
  SolverCache own_cache_;
  SolverCache* cache_;
  Eigen::VectorXd mean_;
  double log_ml_ = 0.0;
  bool ok_ = false;
};

std::pair<Eigen::VectorXd, Eigen::VectorXd> conditional_latent_posterior(
    const GaussianSystem& sys, int dense_threshold = 0);

double log_marginal_likelihood(const SystemBuilder& builder, const HyperVector& h);

// diag of P^{-1} given P = L D L^T (with permutation), on the factor pattern
Eigen::VectorXd takahashi_diagonal(const Eigen::SimplicialLDLT<SpMat>& ldlt);

// ---------------------------------------------------------------------------
// Mode finding and grid exploration
// ---------------------------------------------------------------------------

struct OptimOptions {
  int max_evals = 1200;
  double simplex_tol = 1e-4;
  double objective_tol = 1e-6;
  double init_step = 0.4;
};

struct OptimResult {
  Eigen::VectorXd z;     // minimizer in transform space
  double objective = 0.0;
  int evaluations = 0;
  bool converged = false;
};

// Derivative-free Nelder-Mead minimization.
OptimResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                        const Eigen::VectorXd& init, const OptimOptions& opts);

struct GridPoint {
  Eigen::VectorXd z;
  HyperVector h;
  double log_post = 0.0;
  double weight = 0.0;
  Eigen::VectorXd cond_mean;
  Eigen::VectorXd cond_sd;  // empty unless requested
};

struct ParamSummary {
  double mean = 0.0, q025 = 0.0, q975 = 0.0;
};

struct FitResult {
  HyperVector mode;
  Eigen::VectorXd mode_z;
  double log_ml_mode = 0.0;
  bool converged = true;
  bool hessian_fallback = false;
  int evaluations = 0;
  std::vector<GridPoint> grid;
  std::map<std::string, ParamSummary> hyper_summary;   // natural scale
  std::vector<ParamSummary> linear_summary;            // alphas then thetas
  std::vector<std::string> linear_names;
  Eigen::VectorXd latent_mean;  // mixture over grid points
  Eigen::VectorXd latent_sd;    // empty unless latent sds requested
};

struct FitOptions {
  OptimOptions optim;
  bool with_latent_sd = false;
  int dense_threshold = 0;
  int factorial_max_dim = 6;   // full +-1 factorial up to here, CCD axial above
  double grid_step = 1.0;      // in posterior-sd units
};

class FusionFit {
 public:
  FusionFit(const FusionModelSpec& spec, const FemMatrices& fem,
            const HyperMap& map, std::vector<std::string>* warnings = nullptr);

  // negative log posterior kernel in transform space
  double objective(const Eigen::VectorXd& z) const;

  OptimResult optimize_mode(const HyperVector& init, const OptimOptions& opts = {}) const;
  FitResult explore_grid(const OptimResult& mode, const FitOptions& opts = {}) const;
  FitResult fit(const HyperVector& init, const FitOptions& opts = {}) const;

  const SystemBuilder& builder() const { return builder_; }
  const HyperMap& map() const { return map_; }
  const HyperVector& base() const { return base_; }

 private:
  SystemBuilder builder_;
  HyperMap map_;
  HyperVector base_;
  std::uint64_t id_ = 0;  // distinguishes per-thread solver caches across fits
};

// quantile of a discrete weighted distribution (weights sum to 1)
double weighted_atom_quantile(std::vector<std::pair<double, double>> atoms,
                              double p);
// quantile of a Gaussian mixture, by bisection on the CDF
double gaussian_mixture_quantile(const std::vector<double>& mu,
                                 const std::vector<double>& sd,
                                 const std::vector<double>& w, double p);

// FitResult serialization (formats shared with the CLI)
void write_hyper_summary_csv(const std::string& path, const FitResult& fit);
void write_latent_csv(const std::string& path, const FitResult& fit,
                      const FusionModelSpec& spec);

// binary round trip of everything prediction needs (grid, weights,
// conditional means); summaries are regenerated CSVs, not stored here
void save_fit_state(const std::string& path, const FitResult& fit);
FitResult load_fit_state(const std::string& path);

}  // namespace stfusion
