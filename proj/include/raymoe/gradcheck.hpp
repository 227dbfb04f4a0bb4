#pragma once

// Central-difference verification of tape gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "raymoe/autodiff.hpp"
#include "raymoe/network.hpp"
#include "raymoe/rng.hpp"
#include "raymoe/training.hpp"

namespace raymoe {

struct GradCheckResult {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  double max_rel_error = 0.0;
  std::size_t worst_index = npos;
  std::string worst_parameter;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t parameter_count = 0;
  double loss = 0.0;
};

using GradientTamper = std::function<void(std::span<double>)>;

/// max over parameters of |analytic - central| / max(1e-8, |central|).
/// `tamper`, when set, edits the analytic gradient before comparison
/// (negative control).
template <class M>
GradCheckResult grad_check(const M& model, std::span<const double> x, std::size_t label, double h = 1e-5,
                           const GradientTamper& tamper = {}) {
  GradCheckResult res;
  const auto base = model.parameters();
  res.parameter_count = base.size();
  if (base.empty()) return res;

  std::vector<double> analytic(base.size(), 0.0);
  ad::Tape tape;
  res.loss = sample_loss_and_gradient(model, x, label, tape, analytic);
  if (tamper) tamper(analytic);

  M probe = model;
  auto p = probe.parameters();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + h;
    const double up = sample_loss(probe, x, label);
    p[i] = orig - h;
    const double down = sample_loss(probe, x, label);
    p[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(numeric));
    if (res.worst_index == GradCheckResult::npos || err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_index = i;
      res.analytic = analytic[i];
      res.numeric = numeric;
    }
  }
  res.worst_parameter = parameter_name(model, res.worst_index);
  return res;
}

struct GradCheckProblem {
  Model model;
  std::vector<double> x;
  std::size_t label = 0;
};

/// Built-in tiny problem: 2 layers x 2 experts of 4 gates, two input modules
/// (2 and 4 neurons), 8 random features in [0, 1), 3 classes.
inline GradCheckProblem tiny_gradcheck_problem(std::uint64_t seed) {
  TopologyConfig tc;
  tc.input_dim = 8;
  tc.layers = 2;
  tc.experts_per_layer = 2;
  tc.neurons_per_expert = 4;
  tc.num_classes = 3;
  tc.input_modules = 2;
  tc.module_size_step = 2;
  tc.sparsity = 0.25;
  RelaxationConfig rc;
  rc.theta0 = 1.0;
  rc.theta_out = 0.5;
  rc.t_max = 8;
  GradCheckProblem prob{init_params(build_topology(tc, derive_seed(seed, 1)), derive_seed(seed, 2), rc), {}, 0};
  Rng rng(derive_seed(seed, 3));
  prob.x.resize(tc.input_dim);
  for (double& v : prob.x) v = rng.uniform01();
  prob.label = static_cast<std::size_t>(rng.uniform_index(tc.num_classes));
  return prob;
}

}  // namespace raymoe
