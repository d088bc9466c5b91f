#include "stfusion/simulation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>

#include "stfusion/prediction.hpp"

namespace stfusion {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Point2 uniform_point(const Rect& box, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ux(box.xmin, box.xmax);
  std::uniform_real_distribution<double> uy(box.ymin, box.ymax);
  return {ux(rng), uy(rng)};
}

// sample points keeping a minimum separation from earlier draws and from
// the points already in `avoid`
std::vector<Point2> sample_locations(int n, const Rect& box,
                                     const std::vector<Point2>& avoid,
                                     double min_sep, std::mt19937_64& rng) {
  std::vector<Point2> out;
  int attempts = 0;
  while (static_cast<int>(out.size()) < n) {
    if (++attempts > 100000)
      throw std::runtime_error("sample_locations: cannot place sensors");
    const Point2 p = uniform_point(box, rng);
    auto close = [&](const Point2& q) {
      return std::hypot(p.easting - q.easting, p.northing - q.northing) < min_sep;
    };
    if (std::any_of(avoid.begin(), avoid.end(), close) ||
        std::any_of(out.begin(), out.end(), close))
      continue;
    out.push_back(p);
  }
  return out;
}

double interp(const Mesh& mesh, const Eigen::MatrixXd& field,
              const Barycentric& bc, int t) {
  double v = 0.0;
  for (int i = 0; i < 3; ++i) v += bc.weight[i] * field(bc.vertex[i], t);
  return v;
}

}  // namespace

FixedEffect study_trend() {
  return {"trend",
          [](const Point2& p, int) { return 0.2 * p.easting + 0.3 * p.northing; }};
}

SimDataset generate_replicate(const SimConfig& cfg, std::uint64_t replicate_seed) {
  if (cfg.T < 2) throw std::invalid_argument("generate_replicate: T must be >= 2");
  std::mt19937_64 rng(splitmix64(cfg.seed * 0x100000001b3ULL + replicate_seed));

  SimDataset ds;
  ds.mesh = build_structured_mesh(cfg.domain, cfg.sim_mesh_edge, cfg.sim_mesh_buffer);
  const FemMatrices fem = assemble_fem(ds.mesh);
  const int n = ds.mesh.n_vertices();
  const auto& th = cfg.truth;

  // latent fields: i.i.d. spatial draws chained into stationary AR(1) paths
  ds.fields.resize(3);
  for (int k = 0; k < 3; ++k) {
    const SpatialPrecision prec =
        build_precision(fem, {th.hyper.range[k], th.hyper.sd[k], 1.0});
    FieldSampler sampler(prec);
    std::vector<Eigen::VectorXd> draws(cfg.T);
    for (int t = 0; t < cfg.T; ++t) draws[t] = sampler.sample(rng);
    const auto path = simulate_ar1_path(draws, th.hyper.ar[k]);
    ds.fields[k].resize(n, cfg.T);
    for (int t = 0; t < cfg.T; ++t) ds.fields[k].col(t) = path[t];
  }

  // sensor / test layouts; response and misaligned sets are disjoint,
  // test points avoid the response sensors
  const double min_sep = 1e-3 * cfg.domain.diagonal();
  ds.sensors_response = sample_locations(cfg.n_sensors_response, cfg.domain, {},
                                         min_sep, rng);
  ds.sensors_misaligned = sample_locations(cfg.n_sensors_misaligned, cfg.domain,
                                           ds.sensors_response, min_sep, rng);
  ds.test_points =
      sample_locations(cfg.n_test, cfg.domain, ds.sensors_response, min_sep, rng);

  const FixedEffect trend = study_trend();
  auto predictor = [&](const Barycentric& bc, const Point2& p, int t) {
    return th.alpha[2] + th.theta[0] * trend.eval(p, t + 1) +
           th.hyper.beta[0] * interp(ds.mesh, ds.fields[0], bc, t) +
           th.hyper.beta[1] * interp(ds.mesh, ds.fields[1], bc, t) +
           interp(ds.mesh, ds.fields[2], bc, t);
  };

  std::normal_distribution<double> gauss;
  auto noise = [&](double var) { return std::sqrt(var) * gauss(rng); };

  // point observations: y_1 at the misaligned set, y_2/y_3 at the response set
  for (const auto& p : ds.sensors_misaligned) {
    const Barycentric bc = locate(ds.mesh, p);
    for (int t = 0; t < cfg.T; ++t)
      ds.train.points.push_back(
          {1, p, t + 1,
           th.alpha[0] + interp(ds.mesh, ds.fields[0], bc, t) +
               noise(th.hyper.tau2_point[0])});
  }
  for (const auto& p : ds.sensors_response) {
    const Barycentric bc = locate(ds.mesh, p);
    for (int t = 0; t < cfg.T; ++t) {
      ds.train.points.push_back(
          {2, p, t + 1,
           th.alpha[1] + interp(ds.mesh, ds.fields[1], bc, t) +
               noise(th.hyper.tau2_point[1])});
      ds.train.points.push_back(
          {3, p, t + 1, predictor(bc, p, t) + noise(th.hyper.tau2_point[2])});
    }
  }

  // block observations: Monte Carlo average over uniform points per cell,
  // reduced to a vertex weight vector so all days reuse the same points
  const double cw = cfg.domain.width() / cfg.grid_nx;
  const double ch = cfg.domain.height() / cfg.grid_ny;
  for (int gy = 0; gy < cfg.grid_ny; ++gy) {
    for (int gx = 0; gx < cfg.grid_nx; ++gx) {
      const Rect cell{cfg.domain.xmin + gx * cw, cfg.domain.xmin + (gx + 1) * cw,
                      cfg.domain.ymin + gy * ch, cfg.domain.ymin + (gy + 1) * ch};
      Eigen::VectorXd w = Eigen::VectorXd::Zero(n);
      double xbar = 0.0;
      for (int m = 0; m < cfg.mc_points_per_cell; ++m) {
        const Point2 p = uniform_point(cell, rng);
        const Barycentric bc = locate(ds.mesh, p);
        for (int i = 0; i < 3; ++i) w[bc.vertex[i]] += bc.weight[i];
        xbar += trend.eval(p, 1);
      }
      w /= cfg.mc_points_per_cell;
      xbar /= cfg.mc_points_per_cell;

      for (int t = 0; t < cfg.T; ++t) {
        const double f1 = w.dot(ds.fields[0].col(t));
        const double f2 = w.dot(ds.fields[1].col(t));
        const double f3 = w.dot(ds.fields[2].col(t));
        ds.train.blocks.push_back(
            {1, cell, t + 1, th.alpha[0] + f1 + noise(th.hyper.tau2_grid[0])});
        ds.train.blocks.push_back(
            {2, cell, t + 1, th.alpha[1] + f2 + noise(th.hyper.tau2_grid[1])});
        ds.train.blocks.push_back(
            {3, cell, t + 1,
             th.alpha[2] + th.theta[0] * xbar + th.hyper.beta[0] * f1 +
                 th.hyper.beta[1] * f2 + f3 + noise(th.hyper.tau2_grid[2])});
      }
    }
  }

  // held-out response surface: noise-free, plus a noisy version mimicking
  // what a sensor at that location would have measured
  ds.test_truth.resize(cfg.n_test, cfg.T);
  ds.test_obs.resize(cfg.n_test, cfg.T);
  for (int i = 0; i < cfg.n_test; ++i) {
    const Barycentric bc = locate(ds.mesh, ds.test_points[i]);
    for (int t = 0; t < cfg.T; ++t) {
      ds.test_truth(i, t) = predictor(bc, ds.test_points[i], t);
      ds.test_obs(i, t) = ds.test_truth(i, t) + noise(th.hyper.tau2_point[2]);
    }
  }
  return ds;
}

double rmspe(const std::vector<double>& predictions,
             const std::vector<double>& truths) {
  if (predictions.empty() || predictions.size() != truths.size())
    throw std::invalid_argument("rmspe: empty or misaligned input");
  double ss = 0.0;
  for (size_t i = 0; i < predictions.size(); ++i) {
    const double d = predictions[i] - truths[i];
    ss += d * d;
  }
  return std::sqrt(ss / predictions.size());
}

std::string model_name(ModelVariant m) {
  switch (m) {
    case ModelVariant::PointOnly: return "point";
    case ModelVariant::GridOnly: return "grid";
    case ModelVariant::Joint: return "joint";
  }
  return "?";
}

ObservationBatch study_observations(const SimDataset& ds, int t_train,
                                    ModelVariant model,
                                    bool missing_grid_covariates) {
  ObservationBatch out;
  for (const auto& o : ds.train.points) {
    if (o.time_index > t_train) continue;
    if (model == ModelVariant::GridOnly && o.variable_id == 3) continue;
    out.points.push_back(o);
  }
  if (model != ModelVariant::PointOnly) {
    for (const auto& o : ds.train.blocks) {
      if (o.time_index > t_train) continue;
      if (missing_grid_covariates && o.variable_id != 3) continue;
      out.blocks.push_back(o);
    }
  }
  return out;
}

double study_true_value(const SimTrueParams& truth, const std::string& name) {
  const auto split = name.rfind('_');
  if (split == std::string::npos)
    throw std::invalid_argument("study_true_value: bad name " + name);
  const std::string base = name.substr(0, split);
  const int k = std::stoi(name.substr(split + 1)) - 1;
  if (base == "alpha") return truth.alpha.at(k);
  if (base == "theta") return truth.theta.at(k);
  if (base == "beta") return truth.hyper.beta.at(k);
  if (base == "rho") return truth.hyper.range.at(k);
  if (base == "sigma") return truth.hyper.sd.at(k);
  if (base == "sigma2") return truth.hyper.sd.at(k) * truth.hyper.sd.at(k);
  if (base == "a") return truth.hyper.ar.at(k);
  if (base == "tau2_point") return truth.hyper.tau2_point.at(k);
  if (base == "tau2_grid") return truth.hyper.tau2_grid.at(k);
  throw std::invalid_argument("study_true_value: unknown parameter " + name);
}

StudyResult run_study(const SimConfig& cfg, const StudyOptions& opts) {
  for (int t : opts.t_values)
    if (t + 1 > cfg.T)
      throw std::invalid_argument("run_study: config must simulate t_train + 1 days");

  const Mesh fit_mesh =
      build_structured_mesh(cfg.domain, opts.fit_mesh_edge, opts.fit_mesh_buffer);
  const FemMatrices fit_fem = assemble_fem(fit_mesh);

  StudyResult res;
  struct Acc {
    double mean = 0.0, q025 = 0.0, q975 = 0.0, err2 = 0.0;
    int n = 0;
  };
  std::map<std::tuple<std::string, std::string, int>, Acc> acc;

  for (int r = 0; r < opts.n_replicates; ++r) {
    const SimDataset ds = generate_replicate(cfg, static_cast<std::uint64_t>(r));
    if (!opts.keep_data_dir.empty()) {
      namespace fs = std::filesystem;
      fs::create_directories(opts.keep_data_dir);
      const std::string stem =
          opts.keep_data_dir + "/replicate_" + std::to_string(r);
      write_points_csv(stem + "_points.csv", ds.train.points);
      write_blocks_csv(stem + "_blocks.csv", ds.train.blocks);
    }

    for (int t : opts.t_values) {
      for (ModelVariant model : opts.models) {
        FusionModelSpec spec;
        spec.K = 2;
        spec.fields = {{"1"}, {"2"}, {"3"}};
        spec.fixed_effects = {study_trend()};
        spec.observations =
            study_observations(ds, t, model, opts.missing_grid_covariates);
        spec.mesh = &fit_mesh;
        spec.T = t;

        FitResult fit;
        try {
          const HyperMap map = make_hyper_map(spec);
          FusionFit fitter(spec, fit_fem, map);
          fit = fitter.fit(default_init(spec), opts.fit_options);
        } catch (const std::exception&) {
          ++res.failures;
          continue;
        }

        const std::string mname = model_name(model);
        auto record = [&](const std::string& pname, const ParamSummary& s) {
          double tv;
          try {
            tv = study_true_value(cfg.truth, pname);
          } catch (const std::exception&) {
            return;  // parameter absent from the generating model
          }
          Acc& a = acc[{pname, mname, t}];
          a.mean += s.mean;
          a.q025 += s.q025;
          a.q975 += s.q975;
          a.err2 += (s.mean - tv) * (s.mean - tv);
          ++a.n;
        };
        for (const auto& [pname, s] : fit.hyper_summary) record(pname, s);
        for (size_t j = 0; j < fit.linear_summary.size(); ++j)
          record(fit.linear_names[j], fit.linear_summary[j]);

        // scenario (i): last training day; scenario (ii): one day ahead
        for (int scenario = 0; scenario < 2; ++scenario) {
          std::vector<PredictionTarget> targets;
          for (const auto& p : ds.test_points)
            targets.push_back({p, t + scenario});
          // evaluated against noisy held-out y values, so intervals carry
          // the point measurement-error variance as well
          PredictOptions popts;
          popts.include_noise_variance = true;
          PredictionSurface surf;
          try {
            surf = scenario == 0
                       ? predict_at(fit, spec, fit_fem, targets, popts)
                       : forecast_one_day(fit, spec, fit_fem, targets, popts);
          } catch (const std::exception&) {
            ++res.failures;
            continue;
          }
          std::vector<double> pred(surf.mean.data(),
                                   surf.mean.data() + surf.mean.size());
          std::vector<double> truth(cfg.n_test);
          for (int i = 0; i < cfg.n_test; ++i)
            truth[i] = ds.test_obs(i, t - 1 + scenario);
          const std::string sname = scenario == 0 ? "last_day" : "one_day_ahead";
          res.rmspe.push_back({r, mname, t, sname, rmspe(pred, truth)});
          int hits = 0;
          for (int i = 0; i < cfg.n_test; ++i)
            if (truth[i] >= surf.q025[i] && truth[i] <= surf.q975[i]) ++hits;
          res.coverage.push_back({r, mname, t, sname, hits, cfg.n_test});
        }
      }
    }
  }

  for (const auto& [key, a] : acc) {
    if (a.n == 0) continue;
    res.params.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key),
                          a.mean / a.n, a.q025 / a.n, a.q975 / a.n,
                          std::sqrt(a.err2 / a.n)});
  }
  return res;
}

void write_study_params_csv(const std::string& path, const StudyResult& r) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "param,model,t,mean,q025,q975,rmse\n";
  char buf[240];
  for (const auto& row : r.params) {
    std::snprintf(buf, sizeof buf, "%s,%s,%d,%.10g,%.10g,%.10g,%.10g\n",
                  row.param.c_str(), row.model.c_str(), row.t, row.mean,
                  row.q025, row.q975, row.rmse);
    os << buf;
  }
}

void write_study_rmspe_csv(const std::string& path, const StudyResult& r) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "replicate,model,t,scenario,rmspe\n";
  char buf[200];
  for (const auto& row : r.rmspe) {
    std::snprintf(buf, sizeof buf, "%d,%s,%d,%s,%.10g\n", row.replicate,
                  row.model.c_str(), row.t, row.scenario.c_str(), row.rmspe);
    os << buf;
  }
}

}  // namespace stfusion
