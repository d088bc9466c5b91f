#include "stfusion/config.hpp"

#include <cmath>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

#include <json.hpp>

namespace stfusion {

namespace {

using nlohmann::json;

void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
}

// every key must be consumed by the schema; typos fail loudly
void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& where) {
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key))
      throw ConfigError("unknown key \"" + key + "\" in " + where);
}

template <class T>
T get_or(const json& j, const std::string& key, const T& fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad type for \"" + key + "\"");
  }
}

Rect parse_rect(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 4)
    throw ConfigError(where + " must be [xmin, xmax, ymin, ymax]");
  Rect r{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(),
         j[3].get<double>()};
  if (!(r.xmax > r.xmin) || !(r.ymax > r.ymin))
    throw ConfigError(where + ": empty rectangle");
  return r;
}

MeshConfig parse_mesh(const json& j) {
  require_object(j, "mesh");
  check_keys(j, {"domain", "edge", "buffer"}, "mesh");
  MeshConfig m;
  if (j.contains("domain")) m.domain = parse_rect(j.at("domain"), "mesh.domain");
  m.edge = get_or(j, "edge", m.edge);
  m.buffer = get_or(j, "buffer", m.buffer);
  if (!(m.edge > 0.0) || m.buffer < 0.0)
    throw ConfigError("mesh: edge must be positive, buffer non-negative");
  return m;
}

PriorDefaults parse_priors(const json& j) {
  require_object(j, "model.priors");
  check_keys(j,
             {"range_rho0", "range_alpha", "sd_factor", "sd_alpha", "ar_u",
              "ar_alpha", "ar_base_one", "beta_sd"},
             "model.priors");
  PriorDefaults p;
  p.range_p1 = get_or(j, "range_rho0", p.range_p1);
  p.range_alpha = get_or(j, "range_alpha", p.range_alpha);
  p.sd_factor = get_or(j, "sd_factor", p.sd_factor);
  p.sd_alpha = get_or(j, "sd_alpha", p.sd_alpha);
  p.ar_p1 = get_or(j, "ar_u", p.ar_p1);
  p.ar_alpha = get_or(j, "ar_alpha", p.ar_alpha);
  p.ar_base_one = get_or(j, "ar_base_one", p.ar_base_one);
  p.beta_sd = get_or(j, "beta_sd", p.beta_sd);
  for (double alpha : {p.range_alpha, p.sd_alpha, p.ar_alpha})
    if (!(alpha > 0.0 && alpha < 1.0))
      throw ConfigError("model.priors: tail probabilities must lie in (0, 1)");
  if (!(p.ar_p1 > 0.0 && p.ar_p1 < 1.0))
    throw ConfigError("model.priors: ar_u must lie in (0, 1)");
  return p;
}

FixedEffectConfig parse_fixed_effect(const json& j, int index) {
  const std::string where = "model.fixed_effects[" + std::to_string(index) + "]";
  require_object(j, where);
  check_keys(j, {"type", "coefficients", "path"}, where);
  FixedEffectConfig f;
  f.type = get_or<std::string>(j, "type", "");
  f.coefficients = get_or(j, "coefficients", std::vector<double>{});
  f.path = get_or<std::string>(j, "path", "");
  if (f.type == "linear_trend") {
    if (f.coefficients.size() != 2)
      throw ConfigError(where + ": linear_trend needs [easting, northing] slopes");
  } else if (f.type == "raster") {
    if (f.path.empty()) throw ConfigError(where + ": raster needs a path");
  } else {
    throw ConfigError(where + ": type must be linear_trend or raster");
  }
  return f;
}

ModelConfig parse_model(const json& j) {
  require_object(j, "model");
  check_keys(j,
             {"k_covariates", "field_names", "t_train", "vague_variance",
              "fixed_effects", "priors"},
             "model");
  ModelConfig m;
  m.k_covariates = get_or(j, "k_covariates", m.k_covariates);
  m.field_names = get_or(j, "field_names", m.field_names);
  m.t_train = get_or(j, "t_train", m.t_train);
  m.vague_variance = get_or(j, "vague_variance", m.vague_variance);
  if (m.k_covariates < 0 || m.t_train < 1 || !(m.vague_variance > 0.0))
    throw ConfigError("model: k_covariates >= 0, t_train >= 1, vague_variance > 0");
  if (!m.field_names.empty() &&
      static_cast<int>(m.field_names.size()) != m.k_covariates + 1)
    throw ConfigError("model.field_names must have k_covariates + 1 entries");
  if (j.contains("fixed_effects")) {
    const auto& fe = j.at("fixed_effects");
    if (!fe.is_array()) throw ConfigError("model.fixed_effects must be an array");
    for (size_t i = 0; i < fe.size(); ++i)
      m.fixed_effects.push_back(parse_fixed_effect(fe[i], static_cast<int>(i)));
  }
  if (j.contains("priors")) m.priors = parse_priors(j.at("priors"));
  return m;
}

DataConfig parse_data(const json& j) {
  require_object(j, "data");
  check_keys(j, {"points", "blocks", "standardize"}, "data");
  DataConfig d;
  d.points = get_or<std::string>(j, "points", "");
  d.blocks = get_or<std::string>(j, "blocks", "");
  if (j.contains("standardize")) {
    const auto& st = j.at("standardize");
    if (!st.is_array()) throw ConfigError("data.standardize must be an array");
    for (const auto& e : st) {
      require_object(e, "data.standardize[]");
      check_keys(e, {"variable", "mean", "sd"}, "data.standardize[]");
      StandardizeConfig s;
      s.variable = get_or(e, "variable", 0);
      s.mean = get_or(e, "mean", 0.0);
      s.sd = get_or(e, "sd", 1.0);
      if (s.variable < 1 || !(s.sd > 0.0))
        throw ConfigError("data.standardize: variable >= 1 and sd > 0 required");
      d.standardize.push_back(s);
    }
  }
  return d;
}

InferenceConfig parse_inference(const json& j) {
  require_object(j, "inference");
  check_keys(j,
             {"max_evals", "simplex_tol", "objective_tol", "init_step",
              "grid_step", "factorial_max_dim", "dense_threshold", "latent_sd",
              "mixture_quantiles"},
             "inference");
  InferenceConfig c;
  c.optim.max_evals = get_or(j, "max_evals", c.optim.max_evals);
  c.optim.simplex_tol = get_or(j, "simplex_tol", c.optim.simplex_tol);
  c.optim.objective_tol = get_or(j, "objective_tol", c.optim.objective_tol);
  c.optim.init_step = get_or(j, "init_step", c.optim.init_step);
  c.grid_step = get_or(j, "grid_step", c.grid_step);
  c.factorial_max_dim = get_or(j, "factorial_max_dim", c.factorial_max_dim);
  c.dense_threshold = get_or(j, "dense_threshold", c.dense_threshold);
  c.latent_sd = get_or(j, "latent_sd", c.latent_sd);
  c.mixture_quantiles = get_or(j, "mixture_quantiles", c.mixture_quantiles);
  if (c.optim.max_evals < 1 || !(c.grid_step > 0.0))
    throw ConfigError("inference: max_evals >= 1, grid_step > 0");
  return c;
}

StudyConfig parse_study(const json& j) {
  require_object(j, "study");
  check_keys(j,
             {"t_values", "n_replicates", "models", "missing_grid_covariates",
              "t_total", "n_sensors_response", "n_sensors_misaligned", "grid_nx",
              "grid_ny", "mc_points_per_cell", "n_test", "sim_mesh_edge",
              "sim_mesh_buffer"},
             "study");
  StudyConfig s;
  s.t_values = get_or(j, "t_values", s.t_values);
  s.n_replicates = get_or(j, "n_replicates", s.n_replicates);
  s.models = get_or(j, "models", s.models);
  s.missing_grid_covariates =
      get_or(j, "missing_grid_covariates", s.missing_grid_covariates);
  s.sim.T = get_or(j, "t_total", s.sim.T);
  s.sim.n_sensors_response =
      get_or(j, "n_sensors_response", s.sim.n_sensors_response);
  s.sim.n_sensors_misaligned =
      get_or(j, "n_sensors_misaligned", s.sim.n_sensors_misaligned);
  s.sim.grid_nx = get_or(j, "grid_nx", s.sim.grid_nx);
  s.sim.grid_ny = get_or(j, "grid_ny", s.sim.grid_ny);
  s.sim.mc_points_per_cell =
      get_or(j, "mc_points_per_cell", s.sim.mc_points_per_cell);
  s.sim.n_test = get_or(j, "n_test", s.sim.n_test);
  s.sim.sim_mesh_edge = get_or(j, "sim_mesh_edge", s.sim.sim_mesh_edge);
  s.sim.sim_mesh_buffer = get_or(j, "sim_mesh_buffer", s.sim.sim_mesh_buffer);
  if (s.n_replicates < 1 || s.t_values.empty())
    throw ConfigError("study: n_replicates >= 1 and at least one t value");
  for (int t : s.t_values)
    if (t < 1 || t + 1 > s.sim.T)
      throw ConfigError("study: each t must satisfy 1 <= t and t + 1 <= t_total");
  for (const auto& m : s.models)
    if (m != "point" && m != "grid" && m != "joint")
      throw ConfigError("study.models entries must be point, grid or joint");
  if (s.sim.n_sensors_response < 1 || s.sim.n_sensors_misaligned < 0 ||
      s.sim.grid_nx < 1 || s.sim.grid_ny < 1 || s.sim.mc_points_per_cell < 1 ||
      s.sim.n_test < 1)
    throw ConfigError("study: counts must be positive");
  return s;
}

}  // namespace

RunConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  require_object(j, "config");
  check_keys(j,
             {"mesh", "model", "data", "inference", "study", "output_dir",
              "seed", "threads"},
             "config");
  RunConfig c;
  if (j.contains("mesh")) c.mesh = parse_mesh(j.at("mesh"));
  if (j.contains("model")) c.model = parse_model(j.at("model"));
  if (j.contains("data")) c.data = parse_data(j.at("data"));
  if (j.contains("inference")) c.inference = parse_inference(j.at("inference"));
  if (j.contains("study")) c.study = parse_study(j.at("study"));
  c.output_dir = get_or(j, "output_dir", c.output_dir);
  c.seed = get_or(j, "seed", c.seed);
  c.threads = get_or(j, "threads", c.threads);
  if (c.threads < 0) throw ConfigError("threads must be non-negative");
  c.study.sim.domain = c.mesh.domain;
  c.study.sim.seed = c.seed;
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string config_schema() {
  return R"({
  "mesh": {
    "domain": [0.0, 5.0, 0.0, 10.0],   // [xmin, xmax, ymin, ymax]
    "edge": 1.0,                       // target triangle edge length
    "buffer": 1.5                      // boundary extension width
  },
  "model": {
    "k_covariates": 2,                 // latent covariate fields; response is k+1
    "field_names": ["1", "2", "3"],    // optional, k_covariates + 1 entries
    "t_train": 10,                     // training days (1-based time indices)
    "vague_variance": 10.0,            // prior variance of intercepts/trend
    "fixed_effects": [                 // optional
      {"type": "linear_trend", "coefficients": [0.2, 0.3]},
      {"type": "raster", "path": "covariate_blocks.csv"}
    ],
    "priors": {                        // optional, penalized-complexity defaults
      "range_rho0": 0.0,               // 0 -> 0.1 * domain diagonal
      "range_alpha": 0.05,             // P(range < range_rho0)
      "sd_factor": 2.0,                // sigma0 = sd_factor * per-variable data sd
      "sd_alpha": 0.05,                // P(sd > sigma0)
      "ar_u": 0.8,                     // P(|a| > ar_u) = ar_alpha
      "ar_alpha": 0.5,
      "ar_base_one": false,            // true: shrink toward a = 1 instead of 0
      "beta_sd": 0.0                   // 0 -> sqrt(vague_variance)
    }
  },
  "data": {
    "points": "points.csv",            // variable,easting,northing,time,value
    "blocks": "blocks.csv",            // optional; variable,xmin,xmax,ymin,ymax,time,value
    "standardize": [                   // optional per-variable rescaling
      {"variable": 1, "mean": 0.0, "sd": 1.0}
    ]
  },
  "inference": {
    "max_evals": 1200,                 // optimizer evaluation budget
    "simplex_tol": 1e-4,
    "objective_tol": 1e-6,
    "init_step": 0.4,                  // initial simplex step (transform scale)
    "grid_step": 1.0,                  // grid spacing in posterior-sd units
    "factorial_max_dim": 6,            // full factorial design up to here
    "dense_threshold": 0,              // dense marginal variances below this dim
    "latent_sd": false,                // emit latent-field posterior sds
    "mixture_quantiles": true          // per-grid-point mixture quantiles
  },
  "study": {                           // replicate-study settings
    "t_values": [3, 7, 10],
    "n_replicates": 10,
    "models": ["point", "grid", "joint"],
    "missing_grid_covariates": false,  // robustness: blocks only for the response
    "t_total": 11,                     // simulated days, >= max(t_values) + 1
    "n_sensors_response": 22,
    "n_sensors_misaligned": 10,
    "grid_nx": 5,
    "grid_ny": 10,
    "mc_points_per_cell": 2500,
    "n_test": 20,
    "sim_mesh_edge": 0.5,
    "sim_mesh_buffer": 2.0
  },
  "output_dir": "out",
  "seed": 1,
  "threads": 1                         // 0 = library default
}
// Comments are for documentation only; the config file itself must be plain JSON.
)";
}

std::string config_hash(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Mesh build_mesh(const MeshConfig& cfg) {
  return build_structured_mesh(cfg.domain, cfg.edge, cfg.buffer);
}

namespace {

// nearest-cell (by centroid) lookup into a block CSV, time-invariant
FixedEffect raster_effect(const std::string& path) {
  auto blocks = std::make_shared<std::vector<BlockObs>>(ingest_blocks(path));
  if (blocks->empty()) throw ConfigError("raster " + path + " has no rows");
  return {"raster:" + path, [blocks](const Point2& p, int) {
            double best = std::numeric_limits<double>::infinity();
            double value = 0.0;
            for (const auto& b : *blocks) {
              if (b.time_index != (*blocks)[0].time_index) continue;
              const Point2 c = b.cell.centroid();
              const double d = std::hypot(p.easting - c.easting,
                                          p.northing - c.northing);
              if (d < best) {
                best = d;
                value = b.value;
              }
            }
            return value;
          }};
}

}  // namespace

std::vector<FixedEffect> build_fixed_effects(const ModelConfig& cfg) {
  std::vector<FixedEffect> out;
  for (const auto& f : cfg.fixed_effects) {
    if (f.type == "linear_trend") {
      const double ce = f.coefficients[0], cn = f.coefficients[1];
      out.push_back({"linear_trend", [ce, cn](const Point2& p, int) {
                       return ce * p.easting + cn * p.northing;
                     }});
    } else {
      out.push_back(raster_effect(f.path));
    }
  }
  return out;
}

ObservationBatch load_observations(const DataConfig& cfg, int n_variables) {
  if (cfg.points.empty() && cfg.blocks.empty())
    throw ConfigError("data: at least one of points/blocks is required");
  ObservationBatch batch;
  if (!cfg.points.empty()) batch.points = ingest_points(cfg.points);
  if (!cfg.blocks.empty()) batch.blocks = ingest_blocks(cfg.blocks);
  for (const auto& o : batch.points)
    if (o.variable_id > n_variables)
      throw ConfigError("points: variable id exceeds k_covariates + 1");
  for (const auto& o : batch.blocks)
    if (o.variable_id > n_variables)
      throw ConfigError("blocks: variable id exceeds k_covariates + 1");
  for (const auto& s : cfg.standardize) {
    for (auto& o : batch.points)
      if (o.variable_id == s.variable) o.value = (o.value - s.mean) / s.sd;
    for (auto& o : batch.blocks)
      if (o.variable_id == s.variable) o.value = (o.value - s.mean) / s.sd;
  }
  return batch;
}

StudyOptions build_study_options(const RunConfig& cfg) {
  StudyOptions opts;
  opts.t_values = cfg.study.t_values;
  opts.n_replicates = cfg.study.n_replicates;
  opts.models.clear();
  for (const auto& m : cfg.study.models) {
    if (m == "point") opts.models.push_back(ModelVariant::PointOnly);
    else if (m == "grid") opts.models.push_back(ModelVariant::GridOnly);
    else opts.models.push_back(ModelVariant::Joint);
  }
  opts.missing_grid_covariates = cfg.study.missing_grid_covariates;
  opts.fit_mesh_edge = cfg.mesh.edge;
  opts.fit_mesh_buffer = cfg.mesh.buffer;
  opts.fit_options = cfg.inference.fit_options();
  return opts;
}

}  // namespace stfusion
