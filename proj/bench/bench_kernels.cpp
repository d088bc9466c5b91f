// Compares the OpenMP-parallel kernels against the serial reference on the
// hot paths (grid-point posterior evaluations and block-operator assembly)
// and checks that both produce identical results.

#include <chrono>
#include <cstdio>
#include <random>

#include "stfusion/inference.hpp"
#include "stfusion/parallel.hpp"
#include "stfusion/simulation.hpp"

using namespace stfusion;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace

int main(int argc, char** argv) {
  const int threads = argc > 1 ? std::atoi(argv[1]) : 4;
  const int n_evals = argc > 2 ? std::atoi(argv[2]) : 24;

  SimConfig cfg;
  cfg.T = 8;
  cfg.mc_points_per_cell = 500;
  const SimDataset ds = generate_replicate(cfg, 0);

  const Mesh mesh = build_structured_mesh(cfg.domain, 1.0, 1.5);
  const FemMatrices fem = assemble_fem(mesh);

  FusionModelSpec spec;
  spec.K = 2;
  spec.fields = {{"1"}, {"2"}, {"3"}};
  spec.fixed_effects = {study_trend()};
  spec.observations = study_observations(ds, 7, ModelVariant::Joint, false);
  spec.mesh = &mesh;
  spec.T = 7;

  const SystemBuilder builder(spec, fem);
  const HyperVector h0 = default_init(spec);

  // i.i.d. jitters of the hyperparameters, one per evaluation slot
  const HyperMap map = make_hyper_map(spec);
  const Eigen::VectorXd z0 = map.to_transformed(h0);
  std::mt19937_64 rng(42);
  std::normal_distribution<double> jitter(0.0, 0.05);
  std::vector<Eigen::VectorXd> zs(n_evals);
  for (auto& z : zs) {
    z = z0;
    for (int i = 0; i < z.size(); ++i) z[i] += jitter(rng);
  }

  std::vector<double> serial_ml(n_evals), parallel_ml(n_evals);
  auto eval = [&](std::vector<double>& out, int i) {
    Posterior post(builder, map.from_transformed(zs[i], h0));
    out[i] = post.ok() ? post.log_ml() : -1e300;
  };

  set_num_threads(1);
  auto t0 = std::chrono::steady_clock::now();
  serial_for(n_evals, [&](int i) { eval(serial_ml, i); });
  const double t_serial = seconds_since(t0);

  set_num_threads(threads);
  t0 = std::chrono::steady_clock::now();
  parallel_for(n_evals, [&](int i) { eval(parallel_ml, i); });
  const double t_parallel = seconds_since(t0);

  double max_diff = 0.0;
  for (int i = 0; i < n_evals; ++i)
    max_diff = std::max(max_diff, std::abs(serial_ml[i] - parallel_ml[i]));

  std::printf("posterior evaluations: %d (dim %d)\n", n_evals,
              builder.build(h0).dim());
  std::printf("serial    %8.3f s  (%.1f ms/eval)\n", t_serial,
              1e3 * t_serial / n_evals);
  std::printf("parallel  %8.3f s  (%.1f ms/eval, %d threads, speedup %.2fx)\n",
              t_parallel, 1e3 * t_parallel / n_evals, threads,
              t_serial / t_parallel);
  std::printf("max |serial - parallel| log-ml difference: %.3g\n", max_diff);
  return max_diff == 0.0 ? 0 : 1;
}
