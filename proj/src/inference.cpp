#include "stfusion/inference.hpp"

#include <algorithm>
#include <cmath>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <Eigen/Dense>

#include "stfusion/parallel.hpp"

namespace stfusion {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLog2Pi = 1.8378770664093454836;
}  // namespace

// ---------------------------------------------------------------------------
// Priors
// ---------------------------------------------------------------------------

namespace {

// solve P(a > u) = alpha for the base-1 PC prior rate by bisection;
// the truncated-exponential CDF in d = sqrt(1-a) is monotone in lambda
double pc_ar1_base1_lambda(double u, double alpha) {
  const double du = std::sqrt(1.0 - u);
  const double dmax = std::sqrt(2.0);
  auto tail = [&](double lam) {
    if (std::abs(lam) < 1e-12) return du / dmax;  // uniform-in-d limit
    return -std::expm1(-lam * du) / -std::expm1(-lam * dmax);
  };
  double lo = -60.0, hi = 60.0;
  if (tail(lo) < alpha || tail(hi) > alpha)
    throw std::invalid_argument("pc_ar1_base1: infeasible (u, alpha)");
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (tail(mid) > alpha ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

double prior_logdensity(const PriorSpec& prior, double value) {
  switch (prior.kind) {
    case PriorKind::PcRange: {
      if (!(value > 0.0)) return kNegInf;
      const double lambda = -std::log(prior.p2) * prior.p1;
      return std::log(lambda) - 2.0 * std::log(value) - lambda / value;
    }
    case PriorKind::PcSd: {
      if (value < 0.0) return kNegInf;
      const double lambda = -std::log(prior.p2) / prior.p1;
      return std::log(lambda) - lambda * value;
    }
    case PriorKind::PcAr1Base0: {
      if (!(std::abs(value) < 1.0)) return kNegInf;
      const double d0 = std::sqrt(-std::log1p(-prior.p1 * prior.p1));
      const double lambda = -std::log(prior.p2) / d0;
      const double a2 = value * value;
      const double d = std::sqrt(-std::log1p(-a2));
      // |d'(a)| -> 1 as a -> 0
      const double jac = d > 1e-12 ? std::abs(value) / ((1.0 - a2) * d)
                                   : 1.0 / (1.0 - a2);
      return std::log(0.5 * lambda) - lambda * d + std::log(jac);
    }
    case PriorKind::PcAr1Base1: {
      if (!(std::abs(value) < 1.0)) return kNegInf;
      const double lambda = pc_ar1_base1_lambda(prior.p1, prior.p2);
      const double d = std::sqrt(1.0 - value);
      const double norm = -std::expm1(-lambda * std::sqrt(2.0));
      return std::log(std::abs(lambda)) - lambda * d - std::log(norm) -
             std::log(2.0 * d);
    }
    case PriorKind::LogNormal: {
      if (!(value > 0.0)) return kNegInf;
      const double z = (std::log(value) - prior.p1) / prior.p2;
      return -0.5 * z * z - std::log(value * prior.p2) - 0.5 * kLog2Pi;
    }
    case PriorKind::Normal: {
      const double z = (value - prior.p1) / prior.p2;
      return -0.5 * z * z - std::log(prior.p2) - 0.5 * kLog2Pi;
    }
    case PriorKind::Fixed:
      return 0.0;
  }
  return kNegInf;
}

// ---------------------------------------------------------------------------
// HyperMap
// ---------------------------------------------------------------------------

double HyperMap::get(const HyperVector& h, const HyperEntry& e) {
  switch (e.comp) {
    case HyperComponent::Range: return h.range[e.index];
    case HyperComponent::Sd: return h.sd[e.index];
    case HyperComponent::Ar: return h.ar[e.index];
    case HyperComponent::Tau2Point: return h.tau2_point[e.index];
    case HyperComponent::Tau2Grid: return h.tau2_grid[e.index];
    case HyperComponent::Beta: return h.beta[e.index];
  }
  return 0.0;
}

void HyperMap::set(HyperVector& h, const HyperEntry& e, double v) {
  switch (e.comp) {
    case HyperComponent::Range: h.range[e.index] = v; break;
    case HyperComponent::Sd: h.sd[e.index] = v; break;
    case HyperComponent::Ar: h.ar[e.index] = v; break;
    case HyperComponent::Tau2Point: h.tau2_point[e.index] = v; break;
    case HyperComponent::Tau2Grid: h.tau2_grid[e.index] = v; break;
    case HyperComponent::Beta: h.beta[e.index] = v; break;
  }
}

namespace {

bool is_log_scale(HyperComponent c) {
  return c == HyperComponent::Range || c == HyperComponent::Sd ||
         c == HyperComponent::Tau2Point || c == HyperComponent::Tau2Grid;
}

double to_z(HyperComponent c, double v) {
  if (is_log_scale(c)) return std::log(v);
  if (c == HyperComponent::Ar) return std::atanh(v);
  return v;
}

double from_z(HyperComponent c, double z) {
  if (is_log_scale(c)) return std::exp(z);
  if (c == HyperComponent::Ar) return std::tanh(z);
  return z;
}

}  // namespace

Eigen::VectorXd HyperMap::to_transformed(const HyperVector& h) const {
  Eigen::VectorXd z(dim());
  for (int i = 0; i < dim(); ++i)
    z[i] = to_z(entries_[i].comp, get(h, entries_[i]));
  return z;
}

HyperVector HyperMap::from_transformed(const Eigen::VectorXd& z,
                                       const HyperVector& base) const {
  HyperVector h = base;
  for (int i = 0; i < dim(); ++i)
    set(h, entries_[i], from_z(entries_[i].comp, z[i]));
  return h;
}

double HyperMap::log_prior_transformed(const Eigen::VectorXd& z) const {
  double lp = 0.0;
  for (int i = 0; i < dim(); ++i) {
    const HyperEntry& e = entries_[i];
    const double v = from_z(e.comp, z[i]);
    if (is_log_scale(e.comp)) {
      if ((e.comp == HyperComponent::Tau2Point || e.comp == HyperComponent::Tau2Grid) &&
          e.prior.kind == PriorKind::PcSd) {
        // PC prior on the noise sd, parameter is the variance
        const double s = std::sqrt(v);
        lp += prior_logdensity(e.prior, s) + std::log(0.5 * s);
      } else {
        lp += prior_logdensity(e.prior, v) + z[i];  // |dv/dz| = v
      }
    } else if (e.comp == HyperComponent::Ar) {
      lp += prior_logdensity(e.prior, v) + std::log1p(-v * v);
    } else {
      lp += prior_logdensity(e.prior, v);
    }
    if (!std::isfinite(lp)) return kNegInf;
  }
  return lp;
}

HyperMap make_hyper_map(const FusionModelSpec& spec, const PriorDefaults& d) {
  // per-variable data scale and source availability
  const int F = spec.K + 1;
  std::vector<bool> has_point(F, false), has_grid(F, false);
  std::vector<std::vector<double>> vals(F);
  for (const auto& o : spec.observations.points) {
    has_point[o.variable_id - 1] = true;
    vals[o.variable_id - 1].push_back(o.value);
  }
  for (const auto& o : spec.observations.blocks) {
    has_grid[o.variable_id - 1] = true;
    vals[o.variable_id - 1].push_back(o.value);
  }
  auto data_sd = [&](int k) {
    const auto& v = vals[k];
    if (v.size() < 2) return 1.0;
    double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / (v.size() - 1));
    return sd > 1e-12 ? sd : 1.0;
  };

  const double rho0 = d.range_p1 > 0.0 ? d.range_p1
                                       : 0.1 * spec.mesh->interior_bbox.diagonal();
  const double beta_sd = d.beta_sd > 0.0 ? d.beta_sd : std::sqrt(spec.vague_variance);

  HyperMap map;
  for (int k = 0; k < F; ++k) {
    const std::string fname = spec.fields[k].name.empty()
                                  ? std::to_string(k + 1)
                                  : spec.fields[k].name;
    map.add({HyperComponent::Range, k, "rho_" + fname,
             {PriorKind::PcRange, rho0, d.range_alpha}});
    map.add({HyperComponent::Sd, k, "sigma_" + fname,
             {PriorKind::PcSd, d.sd_factor * data_sd(k), d.sd_alpha}});
    map.add({HyperComponent::Ar, k, "a_" + fname,
             {d.ar_base_one ? PriorKind::PcAr1Base1 : PriorKind::PcAr1Base0,
              d.ar_p1, d.ar_alpha}});
    if (has_point[k])
      map.add({HyperComponent::Tau2Point, k, "tau2_point_" + fname,
               {PriorKind::PcSd, d.sd_factor * data_sd(k), d.sd_alpha}});
    if (has_grid[k])
      map.add({HyperComponent::Tau2Grid, k, "tau2_grid_" + fname,
               {PriorKind::PcSd, d.sd_factor * data_sd(k), d.sd_alpha}});
  }
  for (int k = 0; k < spec.K; ++k)
    map.add({HyperComponent::Beta, k, "beta_" + std::to_string(k + 1),
             {PriorKind::Normal, 0.0, beta_sd}});
  return map;
}

HyperVector default_init(const FusionModelSpec& spec) {
  const int F = spec.K + 1;
  std::vector<std::vector<double>> vals(F);
  for (const auto& o : spec.observations.points)
    vals[o.variable_id - 1].push_back(o.value);
  for (const auto& o : spec.observations.blocks)
    vals[o.variable_id - 1].push_back(o.value);

  HyperVector h = HyperVector::zeros(spec.K);
  for (int k = 0; k < F; ++k) {
    double sd = 1.0;
    if (vals[k].size() >= 2) {
      double mean = std::accumulate(vals[k].begin(), vals[k].end(), 0.0) / vals[k].size();
      double ss = 0.0;
      for (double x : vals[k]) ss += (x - mean) * (x - mean);
      sd = std::sqrt(ss / (vals[k].size() - 1));
      if (!(sd > 1e-12)) sd = 1.0;
    }
    h.range[k] = 0.2 * spec.mesh->interior_bbox.diagonal();
    h.sd[k] = 0.8 * sd;
    h.ar[k] = 0.3;
    h.tau2_point[k] = 0.1 * sd * sd;
    h.tau2_grid[k] = 0.2 * sd * sd;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Posterior
// ---------------------------------------------------------------------------

double posterior_solver_logdet(const PosteriorSolver& solver) {
#ifdef STFUSION_USE_CHOLMOD
  return solver.logDeterminant();
#else
  return solver.vectorD().array().log().sum();
#endif
}

bool posterior_solver_ok(const PosteriorSolver& solver) {
  if (solver.info() != Eigen::Success) return false;
#ifndef STFUSION_USE_CHOLMOD
  if ((solver.vectorD().array() <= 0.0).any()) return false;  // not SPD
#endif
  return true;
}

Posterior::Posterior(const SystemBuilder& builder, const HyperVector& h,
                     SolverCache* cache)
    : cache_(cache ? cache : &own_cache_) {
  sys_ = builder.build(h);
  P_ = sys_.Q +
       SpMat(sys_.A.transpose() * sys_.noise_prec.asDiagonal() * sys_.A);
  P_.makeCompressed();
  if (!cache_->analyzed) {
    cache_->solver.analyzePattern(P_);
    cache_->analyzed = true;
  }
  cache_->solver.factorize(P_);
  if (!posterior_solver_ok(cache_->solver)) return;

  const Eigen::VectorXd b =
      sys_.A.transpose() * (sys_.noise_prec.asDiagonal() * sys_.y);
  mean_ = cache_->solver.solve(b);

  const double post_logdet = posterior_solver_logdet(cache_->solver);
  const double noise_logdet = sys_.noise_prec.array().log().sum();
  const double quad = sys_.y.dot(sys_.noise_prec.asDiagonal() * sys_.y);
  log_ml_ = -0.5 * sys_.m() * kLog2Pi +
            0.5 * (sys_.prior_logdet + noise_logdet - post_logdet) -
            0.5 * quad + 0.5 * b.dot(mean_);
  ok_ = true;
}

double Posterior::functional_variance(const Eigen::SparseVector<double>& row) const {
  if (!ok_) throw std::runtime_error("Posterior: factorization failed");
  Eigen::VectorXd r(row);
  Eigen::VectorXd v = cache_->solver.solve(r);
  return r.dot(v);
}

Eigen::VectorXd takahashi_diagonal(const Eigen::SimplicialLDLT<SpMat>& ldlt) {
  SpMat L = ldlt.matrixL();
  L.makeCompressed();
  const int n = static_cast<int>(L.rows());
  const Eigen::VectorXd& dvec = ldlt.vectorD();

  // CSC layout of the lower factor, diagonal first in each column
  std::vector<int> colptr(n + 1, 0), rowidx;
  std::vector<double> lval;
  rowidx.reserve(L.nonZeros() + n);
  lval.reserve(L.nonZeros() + n);
  for (int j = 0; j < n; ++j) {
    colptr[j] = static_cast<int>(rowidx.size());
    bool diag_seen = false;
    for (SpMat::InnerIterator it(L, j); it; ++it) {
      if (it.row() == j) {
        diag_seen = true;
        rowidx.push_back(j);
        lval.push_back(1.0);
      } else if (it.row() > j) {
        if (!diag_seen) {  // ensure diagonal slot exists and comes first
          diag_seen = true;
          rowidx.push_back(j);
          lval.push_back(1.0);
        }
        rowidx.push_back(static_cast<int>(it.row()));
        lval.push_back(it.value());
      }
    }
    if (!diag_seen) {
      rowidx.push_back(j);
      lval.push_back(1.0);
    }
  }
  colptr[n] = static_cast<int>(rowidx.size());

  std::vector<double> zval(rowidx.size(), 0.0);
  auto z_at = [&](int r, int c) -> double {  // r >= c
    const int b = colptr[c], e = colptr[c + 1];
    const auto it = std::lower_bound(rowidx.begin() + b, rowidx.begin() + e, r);
    if (it != rowidx.begin() + e && *it == r)
      return zval[it - rowidx.begin()];
    return 0.0;
  };

  for (int j = n - 1; j >= 0; --j) {
    const int b = colptr[j], e = colptr[j + 1];
    // off-diagonals, bottom-up
    for (int p = e - 1; p > b; --p) {
      const int i = rowidx[p];
      double s = 0.0;
      for (int q = b + 1; q < e; ++q) {
        const int k = rowidx[q];
        s += lval[q] * (k >= i ? z_at(k, i) : z_at(i, k));
      }
      zval[p] = -s;
    }
    double s = 0.0;
    for (int q = b + 1; q < e; ++q) s += lval[q] * zval[q];
    zval[b] = 1.0 / dvec[j] - s;
  }

  Eigen::VectorXd diag_perm(n);
  for (int j = 0; j < n; ++j) diag_perm[j] = zval[colptr[j]];

  // P A P^T = L D L^T: undo the fill-reducing permutation
  const auto& perm = ldlt.permutationP().indices();
  Eigen::VectorXd out(n);
  for (int i = 0; i < n; ++i) out[i] = diag_perm[perm[i]];
  return out;
}

Eigen::VectorXd Posterior::marginal_sd(int dense_threshold) const {
  if (!ok_) throw std::runtime_error("Posterior: factorization failed");
  const int n = sys_.dim();
  if (n <= dense_threshold) {
    Eigen::MatrixXd cov = Eigen::MatrixXd(P_).inverse();
    return cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  }
  // the Takahashi recursion runs on the simplicial factor's pattern
  Eigen::SimplicialLDLT<SpMat> ldlt(P_);
  if (ldlt.info() != Eigen::Success)
    throw std::runtime_error("marginal_sd: factorization failed");
  Eigen::VectorXd d = takahashi_diagonal(ldlt);
  return d.cwiseMax(0.0).cwiseSqrt();
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> conditional_latent_posterior(
    const GaussianSystem& sys, int dense_threshold) {
  SpMat P = sys.Q + SpMat(sys.A.transpose() * sys.noise_prec.asDiagonal() * sys.A);
  P.makeCompressed();
  Eigen::SimplicialLDLT<SpMat> ldlt(P);
  if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() <= 0.0).any())
    throw std::runtime_error("conditional_latent_posterior: factorization failed");
  const Eigen::VectorXd b = sys.A.transpose() * (sys.noise_prec.asDiagonal() * sys.y);
  Eigen::VectorXd mean = ldlt.solve(b);
  Eigen::VectorXd sd;
  if (sys.dim() <= dense_threshold) {
    Eigen::MatrixXd Pd(P);
    sd = Pd.inverse().diagonal().cwiseMax(0.0).cwiseSqrt();
  } else {
    sd = takahashi_diagonal(ldlt).cwiseMax(0.0).cwiseSqrt();
  }
  return {std::move(mean), std::move(sd)};
}

double log_marginal_likelihood(const SystemBuilder& builder, const HyperVector& h) {
  Posterior post(builder, h);
  if (!post.ok()) return kNegInf;
  return post.log_ml();
}

// ---------------------------------------------------------------------------
// Nelder-Mead
// ---------------------------------------------------------------------------

OptimResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                        const Eigen::VectorXd& init, const OptimOptions& opts) {
  const int d = static_cast<int>(init.size());
  // adaptive coefficients (Gao & Han) for moderate dimensions
  const double alpha = 1.0;
  const double beta = 1.0 + 2.0 / d;
  const double gamma = 0.75 - 0.5 / d;
  const double delta = 1.0 - 1.0 / d;

  std::vector<Eigen::VectorXd> x(d + 1, init);
  std::vector<double> fx(d + 1);
  int evals = 0;
  auto eval = [&](const Eigen::VectorXd& p) {
    ++evals;
    const double v = f(p);
    return std::isfinite(v) ? v : 1e300;
  };
  for (int i = 1; i <= d; ++i) x[i][i - 1] += opts.init_step;
  for (int i = 0; i <= d; ++i) fx[i] = eval(x[i]);

  std::vector<int> order(d + 1);
  OptimResult res;
  while (true) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return fx[a] < fx[b]; });
    const int best = order[0], worst = order[d], second = order[d - 1];

    double diam = 0.0;
    for (int i = 0; i <= d; ++i)
      diam = std::max(diam, (x[i] - x[best]).lpNorm<Eigen::Infinity>());
    if ((diam < opts.simplex_tol && fx[worst] - fx[best] < opts.objective_tol) ||
        evals >= opts.max_evals) {
      res.z = x[best];
      res.objective = fx[best];
      res.evaluations = evals;
      res.converged = evals < opts.max_evals;
      return res;
    }

    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(d);
    for (int i = 0; i <= d; ++i)
      if (i != worst) centroid += x[i];
    centroid /= d;

    const Eigen::VectorXd xr = centroid + alpha * (centroid - x[worst]);
    const double fr = eval(xr);
    if (fr < fx[best]) {
      const Eigen::VectorXd xe = centroid + beta * (xr - centroid);
      const double fe = eval(xe);
      if (fe < fr) { x[worst] = xe; fx[worst] = fe; }
      else { x[worst] = xr; fx[worst] = fr; }
    } else if (fr < fx[second]) {
      x[worst] = xr;
      fx[worst] = fr;
    } else {
      const bool outside = fr < fx[worst];
      Eigen::VectorXd xc;
      if (outside)
        xc = centroid + gamma * (xr - centroid);
      else
        xc = centroid - gamma * (centroid - x[worst]);
      const double fc = eval(xc);
      if (fc < std::min(fr, fx[worst])) {
        x[worst] = xc;
        fx[worst] = fc;
      } else {
        for (int i = 0; i <= d; ++i) {
          if (i == best) continue;
          x[i] = x[best] + delta * (x[i] - x[best]);
          fx[i] = eval(x[i]);
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// FusionFit
// ---------------------------------------------------------------------------

FusionFit::FusionFit(const FusionModelSpec& spec, const FemMatrices& fem,
                     const HyperMap& map, std::vector<std::string>* warnings)
    : builder_(spec, fem, warnings), map_(map), base_(default_init(spec)) {
  static std::atomic<std::uint64_t> next_id{1};
  id_ = next_id.fetch_add(1, std::memory_order_relaxed);
}

double FusionFit::objective(const Eigen::VectorXd& z) const {
  const double lp = map_.log_prior_transformed(z);
  if (!std::isfinite(lp)) return std::numeric_limits<double>::infinity();
  const HyperVector h = map_.from_transformed(z, base_);
  // The posterior sparsity pattern is model-specific, so the per-thread
  // symbolic factorization is keyed on a unique fit id; a raw address would
  // alias when successive fits reuse the same storage.
  thread_local SolverCache cache;
  thread_local std::uint64_t cache_owner = 0;
  if (cache_owner != id_) {
    cache.analyzed = false;
    cache_owner = id_;
  }
  SolverCache* c = &cache;
  Posterior post(builder_, h, c);
  if (!post.ok()) return std::numeric_limits<double>::infinity();
  return -(post.log_ml() + lp);
}

OptimResult FusionFit::optimize_mode(const HyperVector& init,
                                     const OptimOptions& opts) const {
  const_cast<FusionFit*>(this)->base_ = init;
  const Eigen::VectorXd z0 = map_.to_transformed(init);
  if (!std::isfinite(objective(z0)))
    throw std::invalid_argument("optimize_mode: infeasible initial point");
  return nelder_mead([this](const Eigen::VectorXd& z) { return objective(z); }, z0,
                     opts);
}

double weighted_atom_quantile(std::vector<std::pair<double, double>> atoms, double p) {
  std::sort(atoms.begin(), atoms.end());
  double cum = 0.0;
  for (const auto& [v, w] : atoms) {
    cum += w;
    if (cum >= p) return v;
  }
  return atoms.back().first;
}

double gaussian_mixture_quantile(const std::vector<double>& mu,
                                 const std::vector<double>& sd,
                                 const std::vector<double>& w, double p) {
  auto cdf = [&](double x) {
    double s = 0.0;
    for (size_t i = 0; i < mu.size(); ++i)
      s += w[i] * 0.5 * std::erfc(-(x - mu[i]) / (sd[i] * std::sqrt(2.0) + 1e-300));
    return s;
  };
  double lo = 1e300, hi = -1e300;
  for (size_t i = 0; i < mu.size(); ++i) {
    lo = std::min(lo, mu[i] - 10.0 * sd[i] - 1e-8);
    hi = std::max(hi, mu[i] + 10.0 * sd[i] + 1e-8);
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (cdf(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

FitResult FusionFit::explore_grid(const OptimResult& mode, const FitOptions& opts) const {
  const int d = map_.dim();
  FitResult fit;
  fit.mode_z = mode.z;
  fit.mode = map_.from_transformed(mode.z, base_);
  fit.converged = mode.converged;
  fit.evaluations = mode.evaluations;
  fit.log_ml_mode = log_marginal_likelihood(builder_, fit.mode);

  // per-axis scale from a diagonal numerical Hessian at the mode
  const double hstep = 0.05;
  Eigen::VectorXd scale(d);
  const double f0 = mode.objective;
  for (int i = 0; i < d; ++i) {
    Eigen::VectorXd zp = mode.z, zm = mode.z;
    zp[i] += hstep;
    zm[i] -= hstep;
    const double hess = (objective(zp) + objective(zm) - 2.0 * f0) / (hstep * hstep);
    if (std::isfinite(hess) && hess > 1e-8) {
      scale[i] = std::clamp(1.0 / std::sqrt(hess), 0.05, 3.0);
    } else {
      scale[i] = 1.0;
      fit.hessian_fallback = true;
    }
  }

  // design: full +-1 factorial for small dim, center + axial points above
  std::vector<Eigen::VectorXd> deltas;
  if (d <= opts.factorial_max_dim) {
    const int npts = static_cast<int>(std::pow(3.0, d));
    for (int c = 0; c < npts; ++c) {
      Eigen::VectorXd delta(d);
      int rem = c;
      for (int i = 0; i < d; ++i) {
        delta[i] = static_cast<double>(rem % 3 - 1);
        rem /= 3;
      }
      deltas.push_back(delta);
    }
  } else {
    deltas.push_back(Eigen::VectorXd::Zero(d));
    for (int i = 0; i < d; ++i)
      for (double s : {1.0, -1.0}) {
        Eigen::VectorXd delta = Eigen::VectorXd::Zero(d);
        delta[i] = s;
        deltas.push_back(delta);
      }
  }

  const int G = static_cast<int>(deltas.size());
  fit.grid.resize(G);
  const bool want_sd = opts.with_latent_sd;
  const auto& lin_names_spec = builder_.spec();
  const int n_linear = lin_names_spec.n_linear();
  const int lin_off = (lin_names_spec.K + 1) * lin_names_spec.mesh->n_vertices() *
                      lin_names_spec.T;

  std::vector<std::vector<double>> lin_var(G, std::vector<double>(n_linear, 0.0));
  parallel_for(G, [&](int g) {
    GridPoint& gp = fit.grid[g];
    gp.z = mode.z + opts.grid_step * deltas[g].cwiseProduct(scale);
    gp.h = map_.from_transformed(gp.z, base_);
    const double lp = map_.log_prior_transformed(gp.z);
    Posterior post(builder_, gp.h);
    if (!post.ok() || !std::isfinite(lp)) {
      gp.log_post = kNegInf;
      gp.cond_mean = Eigen::VectorXd::Zero(lin_off + n_linear);
      return;
    }
    gp.log_post = post.log_ml() + lp;
    gp.cond_mean = post.mean();
    if (want_sd) gp.cond_sd = post.marginal_sd(opts.dense_threshold);
    for (int j = 0; j < n_linear; ++j) {
      Eigen::SparseVector<double> e(lin_off + n_linear);
      e.coeffRef(lin_off + j) = 1.0;
      lin_var[g][j] = post.functional_variance(e);
    }
  });

  // normalized weights, summed in design order for determinism
  double lp_max = kNegInf;
  for (const auto& gp : fit.grid) lp_max = std::max(lp_max, gp.log_post);
  double wsum = 0.0;
  for (auto& gp : fit.grid) {
    gp.weight = std::isfinite(gp.log_post) ? std::exp(gp.log_post - lp_max) : 0.0;
    wsum += gp.weight;
  }
  if (!(wsum > 0.0)) throw std::runtime_error("explore_grid: all grid points infeasible");
  for (auto& gp : fit.grid) gp.weight /= wsum;

  // latent mixture moments
  const int dim = static_cast<int>(fit.grid[0].cond_mean.size());
  fit.latent_mean = Eigen::VectorXd::Zero(dim);
  for (const auto& gp : fit.grid) fit.latent_mean += gp.weight * gp.cond_mean;
  if (want_sd) {
    Eigen::VectorXd second = Eigen::VectorXd::Zero(dim);
    for (const auto& gp : fit.grid)
      second += gp.weight *
                (gp.cond_sd.array().square() + gp.cond_mean.array().square()).matrix();
    fit.latent_sd =
        (second - fit.latent_mean.cwiseProduct(fit.latent_mean)).cwiseMax(0.0).cwiseSqrt();
  }

  // hyperparameter summaries: means from the weighted atoms on the natural
  // scale; quantiles from a Gaussian mixture in transform space (component
  // sd = the per-axis Laplace scale), pushed through the monotone transform
  for (int i = 0; i < d; ++i) {
    const HyperEntry& e = map_.entries()[i];
    std::vector<double> zmu(G), zsd(G, scale[i]), w(G);
    double mean = 0.0;
    for (int g = 0; g < G; ++g) {
      zmu[g] = fit.grid[g].z[i];
      w[g] = fit.grid[g].weight;
      mean += w[g] * from_z(e.comp, zmu[g]);
    }
    const double zlo = gaussian_mixture_quantile(zmu, zsd, w, 0.025);
    const double zhi = gaussian_mixture_quantile(zmu, zsd, w, 0.975);
    const double lo = from_z(e.comp, zlo), hi = from_z(e.comp, zhi);
    fit.hyper_summary[e.name] = {mean, std::min(lo, mean), std::max(hi, mean)};
    if (e.comp == HyperComponent::Sd) {
      double m2 = 0.0;
      for (int g = 0; g < G; ++g) {
        const double v = from_z(e.comp, zmu[g]);
        m2 += w[g] * v * v;
      }
      fit.hyper_summary["sigma2" + e.name.substr(5)] = {
          m2, std::min(lo * lo, m2), std::max(hi * hi, m2)};
    }
  }

  // linear parameters: Gaussian mixture over grid points
  const auto& spec = builder_.spec();
  for (int j = 0; j < n_linear; ++j) {
    std::vector<double> mu(G), sd(G), w(G);
    double mean = 0.0;
    for (int g = 0; g < G; ++g) {
      mu[g] = fit.grid[g].cond_mean[lin_off + j];
      sd[g] = std::sqrt(std::max(0.0, lin_var[g][j]));
      w[g] = fit.grid[g].weight;
      mean += w[g] * mu[g];
    }
    fit.linear_summary.push_back({mean, gaussian_mixture_quantile(mu, sd, w, 0.025),
                                  gaussian_mixture_quantile(mu, sd, w, 0.975)});
    if (j <= spec.K)
      fit.linear_names.push_back("alpha_" + std::to_string(j + 1));
    else
      fit.linear_names.push_back("theta_" + std::to_string(j - spec.K));
  }
  return fit;
}

FitResult FusionFit::fit(const HyperVector& init, const FitOptions& opts) const {
  const OptimResult mode = optimize_mode(init, opts.optim);
  return explore_grid(mode, opts);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

void write_hyper_summary_csv(const std::string& path, const FitResult& fit) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "param,mean,q025,q975\n";
  char buf[200];
  for (const auto& [name, s] : fit.hyper_summary) {
    std::snprintf(buf, sizeof buf, "%s,%.10g,%.10g,%.10g\n", name.c_str(), s.mean,
                  s.q025, s.q975);
    os << buf;
  }
  for (size_t j = 0; j < fit.linear_summary.size(); ++j) {
    const auto& s = fit.linear_summary[j];
    std::snprintf(buf, sizeof buf, "%s,%.10g,%.10g,%.10g\n",
                  fit.linear_names[j].c_str(), s.mean, s.q025, s.q975);
    os << buf;
  }
}

void write_latent_csv(const std::string& path, const FitResult& fit,
                      const FusionModelSpec& spec) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "field,node,time,mean,sd\n";
  const int n = spec.mesh->n_vertices();
  char buf[200];
  for (int k = 0; k <= spec.K; ++k) {
    const std::string fname =
        spec.fields[k].name.empty() ? std::to_string(k + 1) : spec.fields[k].name;
    for (int t = 0; t < spec.T; ++t) {
      for (int i = 0; i < n; ++i) {
        const int idx = k * n * spec.T + t * n + i;
        const double sd = fit.latent_sd.size() ? fit.latent_sd[idx] : 0.0;
        std::snprintf(buf, sizeof buf, "%s,%d,%d,%.10g,%.10g\n", fname.c_str(), i,
                      t + 1, fit.latent_mean[idx], sd);
        os << buf;
      }
    }
  }
}

namespace {

void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
void put_vec(std::ostream& os, const Eigen::VectorXd& v) {
  put_u64(os, static_cast<std::uint64_t>(v.size()));
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}
Eigen::VectorXd get_vec(std::istream& is) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(get_u64(is)));
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
  return v;
}
void put_dvec(std::ostream& os, const std::vector<double>& v) {
  put_u64(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}
std::vector<double> get_dvec(std::istream& is) {
  std::vector<double> v(get_u64(is));
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
  return v;
}
void put_hyper(std::ostream& os, const HyperVector& h) {
  put_dvec(os, h.range);
  put_dvec(os, h.sd);
  put_dvec(os, h.ar);
  put_dvec(os, h.tau2_point);
  put_dvec(os, h.tau2_grid);
  put_dvec(os, h.beta);
}
HyperVector get_hyper(std::istream& is) {
  HyperVector h;
  h.range = get_dvec(is);
  h.sd = get_dvec(is);
  h.ar = get_dvec(is);
  h.tau2_point = get_dvec(is);
  h.tau2_grid = get_dvec(is);
  h.beta = get_dvec(is);
  return h;
}

constexpr std::uint64_t kFitStateMagic = 0x5354465553464954ULL;  // "STFUSFIT"

}  // namespace

void save_fit_state(const std::string& path, const FitResult& fit) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path);
  put_u64(os, kFitStateMagic);
  put_hyper(os, fit.mode);
  put_vec(os, fit.mode_z);
  put_vec(os, Eigen::VectorXd::Constant(1, fit.log_ml_mode));
  put_u64(os, (fit.converged ? 1u : 0u) | (fit.hessian_fallback ? 2u : 0u));
  put_u64(os, static_cast<std::uint64_t>(fit.evaluations));
  put_u64(os, fit.grid.size());
  for (const auto& gp : fit.grid) {
    put_vec(os, gp.z);
    put_hyper(os, gp.h);
    put_vec(os, Eigen::VectorXd::Constant(1, gp.log_post));
    put_vec(os, Eigen::VectorXd::Constant(1, gp.weight));
    put_vec(os, gp.cond_mean);
    put_vec(os, gp.cond_sd);
  }
  put_vec(os, fit.latent_mean);
  put_vec(os, fit.latent_sd);
  if (!os) throw std::runtime_error("write failed: " + path);
}

FitResult load_fit_state(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  if (get_u64(is) != kFitStateMagic)
    throw std::runtime_error(path + " is not a fit-state file");
  FitResult fit;
  fit.mode = get_hyper(is);
  fit.mode_z = get_vec(is);
  fit.log_ml_mode = get_vec(is)[0];
  const std::uint64_t flags = get_u64(is);
  fit.converged = flags & 1u;
  fit.hessian_fallback = flags & 2u;
  fit.evaluations = static_cast<int>(get_u64(is));
  fit.grid.resize(get_u64(is));
  for (auto& gp : fit.grid) {
    gp.z = get_vec(is);
    gp.h = get_hyper(is);
    gp.log_post = get_vec(is)[0];
    gp.weight = get_vec(is)[0];
    gp.cond_mean = get_vec(is);
    gp.cond_sd = get_vec(is);
  }
  fit.latent_mean = get_vec(is);
  fit.latent_sd = get_vec(is);
  if (!is) throw std::runtime_error("truncated fit-state file: " + path);
  return fit;
}

}  // namespace stfusion
