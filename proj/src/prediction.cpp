#include "stfusion/prediction.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <Eigen/SparseCholesky>

namespace stfusion {

namespace {

PredictionSurface predict_impl(const FitResult& fit, const FusionModelSpec& spec,
                               const FemMatrices& fem,
                               const std::vector<PredictionTarget>& targets,
                               const PredictOptions& opts, bool forecast) {
  if (fit.grid.empty()) throw std::invalid_argument("predict: empty fit grid");
  const int T = spec.T;
  for (const auto& tg : targets) {
    if (forecast) {
      if (tg.time != T + 1)
        throw std::invalid_argument("forecast_one_day: targets must be at T+1");
    } else if (tg.time < 1 || tg.time > T) {
      throw std::invalid_argument("predict_at: time outside training window");
    }
  }

  SystemBuilder builder(spec, fem);
  const int G = static_cast<int>(fit.grid.size());
  const int nT = spec.mesh->n_vertices() * T;
  const int lin_off = (spec.K + 1) * nT;
  const int N = static_cast<int>(targets.size());

  // per grid point, per target: conditional mean and variance of the
  // response linear predictor (Eq. 12 combination)
  Eigen::MatrixXd pmean(G, N), pvar(G, N);
  pmean.setZero();
  pvar.setZero();

  for (int g = 0; g < G; ++g) {
    const GridPoint& gp = fit.grid[g];
    if (!(gp.weight > 0.0)) continue;
    GaussianSystem sys = builder.build(gp.h);
    SpMat P = sys.Q +
              SpMat(sys.A.transpose() * sys.noise_prec.asDiagonal() * sys.A);
    P.makeCompressed();
    PosteriorSolver solver;
    solver.compute(P);
    if (!posterior_solver_ok(solver))
      throw std::runtime_error("predict: factorization failed at a grid point");

    // forecast: spatial precisions for per-field innovation variance
    std::vector<Eigen::SimplicialLDLT<SpMat>> spatial(forecast ? spec.K + 1 : 0);
    if (forecast) {
      for (int k = 0; k <= spec.K; ++k) {
        MaternParams mp{gp.h.range[k], gp.h.sd[k], 1.0};
        spatial[k].compute(build_precision(fem, mp).Q);
      }
    }

    for (int i = 0; i < N; ++i) {
      const auto& tg = targets[i];
      Eigen::SparseVector<double> row =
          builder.response_point_row(gp.h, tg.location, forecast ? T : tg.time);
      double innovation = 0.0;
      if (forecast) {
        // latent entries decay by a_k; fixed effects move to T+1
        for (Eigen::SparseVector<double>::InnerIterator it(row); it; ++it) {
          if (it.index() < lin_off) {
            const int k = static_cast<int>(it.index()) / nT;
            it.valueRef() *= gp.h.ar[k];
          } else if (it.index() >= lin_off + spec.K + 1) {
            const int j = static_cast<int>(it.index()) - lin_off - spec.K - 1;
            it.valueRef() = spec.fixed_effects[j].eval(tg.location, T + 1);
          }
        }
        // independent innovations, weighted like the fields they perturb
        const Barycentric bc = locate(*spec.mesh, tg.location);
        for (int k = 0; k <= spec.K; ++k) {
          const double coef = k < spec.K ? gp.h.beta[k] : 1.0;
          Eigen::VectorXd w = Eigen::VectorXd::Zero(spec.mesh->n_vertices());
          for (int v = 0; v < 3; ++v) w[bc.vertex[v]] += bc.weight[v];
          const double svar = w.dot(spatial[k].solve(w));
          innovation +=
              coef * coef * (1.0 - gp.h.ar[k] * gp.h.ar[k]) * svar;
        }
      }
      if (opts.include_noise_variance) {
        const double tau2 = gp.h.tau2_point[spec.K];
        if (std::isfinite(tau2)) innovation += tau2;
      }
      Eigen::VectorXd r(row);
      pmean(g, i) = r.dot(gp.cond_mean);
      pvar(g, i) = std::max(0.0, r.dot(solver.solve(r))) + innovation;
    }
  }

  PredictionSurface out;
  out.targets = targets;
  out.mean.resize(N);
  out.sd.resize(N);
  out.q025.resize(N);
  out.q975.resize(N);
  std::vector<double> mu(G), sd(G), w(G);
  for (int g = 0; g < G; ++g) w[g] = fit.grid[g].weight;
  for (int i = 0; i < N; ++i) {
    double m = 0.0, second = 0.0;
    for (int g = 0; g < G; ++g) {
      mu[g] = pmean(g, i);
      sd[g] = std::sqrt(pvar(g, i));
      m += w[g] * mu[g];
      second += w[g] * (pvar(g, i) + mu[g] * mu[g]);
    }
    out.mean[i] = m;
    out.sd[i] = std::sqrt(std::max(0.0, second - m * m));
    if (opts.mixture_quantiles) {
      out.q025[i] = gaussian_mixture_quantile(mu, sd, w, 0.025);
      out.q975[i] = gaussian_mixture_quantile(mu, sd, w, 0.975);
    } else {
      out.q025[i] = m - 1.959963984540054 * out.sd[i];
      out.q975[i] = m + 1.959963984540054 * out.sd[i];
    }
  }
  return out;
}

}  // namespace

PredictionSurface predict_at(const FitResult& fit, const FusionModelSpec& spec,
                             const FemMatrices& fem,
                             const std::vector<PredictionTarget>& targets,
                             const PredictOptions& opts) {
  return predict_impl(fit, spec, fem, targets, opts, false);
}

PredictionSurface forecast_one_day(const FitResult& fit,
                                   const FusionModelSpec& spec,
                                   const FemMatrices& fem,
                                   const std::vector<PredictionTarget>& targets,
                                   const PredictOptions& opts) {
  return predict_impl(fit, spec, fem, targets, opts, true);
}

double coverage_95(const PredictionSurface& surface,
                   const std::vector<double>& truths) {
  const int n = static_cast<int>(truths.size());
  if (n == 0 || surface.mean.size() != n)
    throw std::invalid_argument("coverage_95: empty or misaligned input");
  int hits = 0;
  for (int i = 0; i < n; ++i)
    if (truths[i] >= surface.q025[i] && truths[i] <= surface.q975[i]) ++hits;
  return static_cast<double>(hits) / n;
}

std::vector<PredictionTarget> lattice_targets(const Rect& box, int ncols,
                                              int nrows, int time_index) {
  if (ncols < 1 || nrows < 1)
    throw std::invalid_argument("lattice_targets: grid shape must be positive");
  std::vector<PredictionTarget> t;
  t.reserve(static_cast<size_t>(ncols) * nrows);
  const double dx = box.width() / ncols, dy = box.height() / nrows;
  for (int r = 0; r < nrows; ++r)
    for (int c = 0; c < ncols; ++c)
      t.push_back({{box.xmin + (c + 0.5) * dx, box.ymin + (r + 0.5) * dy},
                   time_index});
  return t;
}

void write_prediction_csv(const std::string& path,
                          const PredictionSurface& surface) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "easting,northing,time,mean,sd,q025,q975\n";
  char buf[240];
  for (size_t i = 0; i < surface.targets.size(); ++i) {
    const auto& tg = surface.targets[i];
    std::snprintf(buf, sizeof buf, "%.10g,%.10g,%d,%.10g,%.10g,%.10g,%.10g\n",
                  tg.location.easting, tg.location.northing, tg.time,
                  surface.mean[i], surface.sd[i], surface.q025[i],
                  surface.q975[i]);
    os << buf;
  }
}

void write_esri_ascii(const std::string& path, const RasterSpec& spec,
                      const Eigen::MatrixXd& values) {
  if (values.rows() != spec.nrows || values.cols() != spec.ncols)
    throw std::invalid_argument("write_esri_ascii: shape mismatch");
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  char buf[64];
  os << "ncols " << spec.ncols << "\n"
     << "nrows " << spec.nrows << "\n";
  std::snprintf(buf, sizeof buf, "xllcorner %.10g\n", spec.xllcorner);
  os << buf;
  std::snprintf(buf, sizeof buf, "yllcorner %.10g\n", spec.yllcorner);
  os << buf;
  std::snprintf(buf, sizeof buf, "cellsize %.10g\n", spec.cellsize);
  os << buf;
  std::snprintf(buf, sizeof buf, "NODATA_value %.10g\n", spec.nodata);
  os << buf;
  for (int r = 0; r < spec.nrows; ++r) {
    for (int c = 0; c < spec.ncols; ++c) {
      std::snprintf(buf, sizeof buf, c ? " %.10g" : "%.10g", values(r, c));
      os << buf;
    }
    os << "\n";
  }
}

}  // namespace stfusion
