// Builds a small random model and prints the relaxation trace for one input.
//
//   demo_relax [seed]

#include <cstdio>
#include <cstdlib>

#include "raymoe/network.hpp"
#include "raymoe/rng.hpp"

int main(int argc, char** argv) {
  using namespace raymoe;
  const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 0;

  TopologyConfig tc;
  tc.input_dim = 64;
  const Model m = init_params(build_topology(tc, seed), derive_seed(seed, 1));

  Rng rng(derive_seed(seed, 2));
  std::vector<double> x(tc.input_dim);
  for (double& v : x) v = rng.uniform01();

  const auto res = relax(m, x);
  std::printf("%zu parameters, %zu live experts\n", m.total_parameter_count(), m.topology->live_expert_count());
  for (const auto& s : res.trace.steps) {
    std::printf("t=%zu theta=%.4f active=%zu output_sum=%.6f\n", s.t, s.theta, s.active_count, s.output_sum);
  }
  std::printf("stopped by %s after %zu steps; used %zu parameters (%.1f%% of live experts active)\n",
              to_string(res.trace.terminated_by), res.trace.steps_taken, res.trace.used_parameter_count,
              100.0 * res.trace.active_block_fraction);
  std::printf("prediction %zu\n", kernels::argmax(res.logits));
}
