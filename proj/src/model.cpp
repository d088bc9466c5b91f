#include "stfusion/model.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/SparseCholesky>

namespace stfusion {

HyperVector HyperVector::zeros(int K) {
  HyperVector h;
  h.range.assign(K + 1, 1.0);
  h.sd.assign(K + 1, 1.0);
  h.ar.assign(K + 1, 0.0);
  h.tau2_point.assign(K + 1, std::nan(""));
  h.tau2_grid.assign(K + 1, std::nan(""));
  h.beta.assign(K, 0.0);
  return h;
}

SystemBuilder::SystemBuilder(const FusionModelSpec& spec, const FemMatrices& fem,
                             std::vector<std::string>* warnings)
    : spec_(&spec), fem_(&fem) {
  if (!spec.mesh) throw std::invalid_argument("SystemBuilder: spec.mesh is null");
  if (static_cast<int>(spec.fields.size()) != spec.K + 1)
    throw std::invalid_argument("SystemBuilder: fields.size() must be K+1");
  const int nT = spec.mesh->n_vertices() * spec.T;
  dim_ = (spec.K + 1) * nT + spec.n_linear();

  BlockOperatorOptions opts;
  rows_.reserve(spec.observations.points.size() + spec.observations.blocks.size());
  for (const auto& o : spec.observations.points) cache_point_row(o);
  for (const auto& o : spec.observations.blocks) cache_block_row(o, opts, warnings);
}

void SystemBuilder::cache_point_row(const PointObs& o) {
  const auto& spec = *spec_;
  const Mesh& mesh = *spec.mesh;
  const int n = mesh.n_vertices();
  const int k = o.variable_id - 1;
  if (k < 0 || k > spec.K)
    throw std::runtime_error("observation references unknown variable id " +
                             std::to_string(o.variable_id));
  if (o.time_index < 1 || o.time_index > spec.T)
    throw std::runtime_error("observation time index out of range");

  CachedRow row;
  row.value = o.value;
  row.variable = k;
  row.is_block = false;
  const Barycentric b = locate(mesh, o.location);
  const int toff = (o.time_index - 1) * n;
  const int lin = (spec.K + 1) * n * spec.T;

  auto add_bary = [&](int field, int beta_index) {
    const int foff = field * n * spec.T + toff;
    for (int j = 0; j < 3; ++j)
      if (b.weight[j] != 0.0)
        row.entries.push_back({foff + b.vertex[j], b.weight[j], beta_index});
  };

  add_bary(k, -1);                       // own latent field
  row.entries.push_back({lin + k, 1.0, -1});  // intercept alpha_k
  if (k == spec.K) {
    for (int j = 0; j < spec.K; ++j) add_bary(j, j);  // beta_j eta_j
    for (size_t e = 0; e < spec.fixed_effects.size(); ++e) {
      const double x = spec.fixed_effects[e].eval(o.location, o.time_index);
      if (x != 0.0)
        row.entries.push_back({lin + spec.K + 1 + static_cast<int>(e), x, -1});
    }
  }
  rows_.push_back(std::move(row));
}

void SystemBuilder::cache_block_row(const BlockObs& o, const BlockOperatorOptions& opts,
                                    std::vector<std::string>* warnings) {
  const auto& spec = *spec_;
  const Mesh& mesh = *spec.mesh;
  const int n = mesh.n_vertices();
  const int k = o.variable_id - 1;
  if (k < 0 || k > spec.K)
    throw std::runtime_error("observation references unknown variable id " +
                             std::to_string(o.variable_id));
  if (o.time_index < 1 || o.time_index > spec.T)
    throw std::runtime_error("observation time index out of range");
  if (!(o.cell.area() > 0.0))
    throw std::runtime_error("block observation cell has non-positive area");

  CachedRow row;
  row.value = o.value;
  row.variable = k;
  row.is_block = true;
  const int toff = (o.time_index - 1) * n;
  const int lin = (spec.K + 1) * n * spec.T;

  // vertex ids and equal weights, or centroid barycentric fallback
  std::vector<std::pair<int, double>> w;
  const auto ids = vertices_in_cell(mesh, o.cell);
  std::vector<Point2> support;
  if (!ids.empty()) {
    const double ww = 1.0 / static_cast<double>(ids.size());
    for (int id : ids) {
      w.emplace_back(id, ww);
      support.push_back(mesh.vertices[id]);
    }
  } else if (opts.centroid_fallback) {
    if (warnings)
      warnings->push_back("block cell [" + std::to_string(o.cell.xmin) + "," +
                          std::to_string(o.cell.xmax) +
                          "] contains no mesh vertex, using centroid");
    const Barycentric b = locate(mesh, o.cell.centroid());
    for (int j = 0; j < 3; ++j)
      if (b.weight[j] != 0.0) w.emplace_back(b.vertex[j], b.weight[j]);
    support.push_back(o.cell.centroid());
  } else {
    throw std::runtime_error("block cell contains no mesh vertex");
  }

  auto add_field = [&](int field, int beta_index) {
    const int foff = field * n * spec.T + toff;
    for (const auto& [id, ww] : w) row.entries.push_back({foff + id, ww, beta_index});
  };

  add_field(k, -1);
  row.entries.push_back({lin + k, 1.0, -1});
  if (k == spec.K) {
    for (int j = 0; j < spec.K; ++j) add_field(j, j);
    for (size_t e = 0; e < spec.fixed_effects.size(); ++e) {
      double x = 0.0;
      if (!ids.empty()) {
        // block average of the fixed effect over the same vertex set
        for (int id : ids) x += spec.fixed_effects[e].eval(mesh.vertices[id], o.time_index);
        x /= static_cast<double>(ids.size());
      } else {
        x = spec.fixed_effects[e].eval(o.cell.centroid(), o.time_index);
      }
      if (x != 0.0)
        row.entries.push_back({lin + spec.K + 1 + static_cast<int>(e), x, -1});
    }
  }
  rows_.push_back(std::move(row));
}

GaussianSystem SystemBuilder::build(const HyperVector& h) const {
  const auto& spec = *spec_;
  const int n = spec.mesh->n_vertices();
  const int T = spec.T;
  const int nT = n * T;
  const int F = spec.K + 1;

  GaussianSystem sys;
  sys.n_space = n;
  sys.T = T;
  sys.K = spec.K;
  sys.n_linear = spec.n_linear();

  // prior precision: per-field Kronecker blocks + vague linear block
  std::vector<Eigen::Triplet<double>> qt;
  double logdet = 0.0;
  for (int k = 0; k < F; ++k) {
    if (!(std::abs(h.ar[k]) < 1.0))
      throw std::invalid_argument("assemble_system: |a| must be < 1");
    const SpatialPrecision qs = build_precision(*fem_, {h.range[k], h.sd[k], 1.0});
    const SpMat qtime = ar1_precision({h.ar[k], T});
    const SpMat qst = kron_sparse(qtime, qs.Q);
    const int off = k * nT;
    for (int c = 0; c < qst.outerSize(); ++c)
      for (SpMat::InnerIterator it(qst, c); it; ++it)
        qt.emplace_back(static_cast<int>(it.row()) + off,
                        static_cast<int>(it.col()) + off, it.value());
    // log|Qt (x) Qs| = n log|Qt| + T log|Qs|
    Eigen::SimplicialLDLT<SpMat> small(qs.Q);
    if (small.info() != Eigen::Success)
      throw std::runtime_error("assemble_system: spatial precision not SPD");
    logdet += n * ar1_precision_logdet({h.ar[k], T}) +
              T * small.vectorD().array().log().sum();
  }
  const double lin_prec = 1.0 / spec.vague_variance;
  for (int j = 0; j < sys.n_linear; ++j) {
    qt.emplace_back(F * nT + j, F * nT + j, lin_prec);
    logdet += std::log(lin_prec);
  }
  sys.Q.resize(dim_, dim_);
  sys.Q.setFromTriplets(qt.begin(), qt.end());
  sys.Q.makeCompressed();
  sys.prior_logdet = logdet;

  // observation operator and noise
  const int m = static_cast<int>(rows_.size());
  sys.y.resize(m);
  sys.noise_prec.resize(m);
  std::vector<Eigen::Triplet<double>> at;
  for (int i = 0; i < m; ++i) {
    const CachedRow& r = rows_[i];
    sys.y[i] = r.value;
    const double tau2 = r.is_block ? h.tau2_grid[r.variable] : h.tau2_point[r.variable];
    if (!(tau2 > 0.0))
      throw std::invalid_argument("assemble_system: missing noise variance for variable " +
                                  std::to_string(r.variable + 1) +
                                  (r.is_block ? " (grid)" : " (point)"));
    sys.noise_prec[i] = 1.0 / tau2;
    for (const auto& e : r.entries) {
      const double v = e.beta_index < 0 ? e.weight : e.weight * h.beta[e.beta_index];
      at.emplace_back(i, e.col, v);  // kept even when beta == 0 so the
                                     // posterior sparsity pattern is stable
    }
  }
  sys.A.resize(m, dim_);
  sys.A.setFromTriplets(at.begin(), at.end());
  return sys;
}

Eigen::SparseVector<double> SystemBuilder::response_point_row(const HyperVector& h,
                                                              const Point2& p,
                                                              int time_index) const {
  const auto& spec = *spec_;
  const Mesh& mesh = *spec.mesh;
  const int n = mesh.n_vertices();
  if (time_index < 1 || time_index > spec.T)
    throw std::invalid_argument("response_point_row: time index out of range");

  Eigen::SparseVector<double> row(dim_);
  const Barycentric b = locate(mesh, p);
  const int toff = (time_index - 1) * n;
  const int lin = (spec.K + 1) * n * spec.T;

  for (int j = 0; j < 3; ++j)
    if (b.weight[j] != 0.0) {
      row.coeffRef(spec.K * n * spec.T + toff + b.vertex[j]) += b.weight[j];
      for (int k = 0; k < spec.K; ++k)
        row.coeffRef(k * n * spec.T + toff + b.vertex[j]) += h.beta[k] * b.weight[j];
    }
  row.coeffRef(lin + spec.K) = 1.0;
  for (size_t e = 0; e < spec.fixed_effects.size(); ++e) {
    const double x = spec.fixed_effects[e].eval(p, time_index);
    if (x != 0.0) row.coeffRef(lin + spec.K + 1 + static_cast<int>(e)) = x;
  }
  return row;
}

GaussianSystem assemble_system(const FusionModelSpec& spec, const FemMatrices& fem,
                               const HyperVector& h) {
  return SystemBuilder(spec, fem).build(h);
}

double linear_predictor(const SystemBuilder& builder, const HyperVector& h,
                        const Eigen::VectorXd& latents, const Point2& p,
                        int time_index) {
  const auto row = builder.response_point_row(h, p, time_index);
  if (latents.size() != row.size())
    throw std::invalid_argument("linear_predictor: latent vector dimension mismatch");
  return row.dot(latents);
}

double linear_predictor_block(const SystemBuilder& builder, const HyperVector& h,
                              const Eigen::VectorXd& latents, const Rect& cell,
                              int time_index) {
  const auto& spec = builder.spec();
  const Mesh& mesh = *spec.mesh;
  const auto ids = vertices_in_cell(mesh, cell);
  if (ids.empty())
    return linear_predictor(builder, h, latents, cell.centroid(), time_index);
  double s = 0.0;
  for (int id : ids)
    s += linear_predictor(builder, h, latents, mesh.vertices[id], time_index);
  return s / static_cast<double>(ids.size());
}

}  // namespace stfusion
