#pragma once

// Dense MLP baseline: `depth` hidden ReLU layers of equal width and linear
// logits. Parameters are one flat array, per layer W (out x in, row-major)
// followed by b.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "raymoe/autodiff.hpp"
#include "raymoe/errors.hpp"
#include "raymoe/kernels.hpp"
#include "raymoe/rng.hpp"
#include "raymoe/sample.hpp"

namespace raymoe {

struct MlpBaseline {
  /// sizes[0] = input_dim, sizes.back() = classes.
  std::vector<std::size_t> sizes;
  std::vector<double> params;

  std::size_t depth() const noexcept { return sizes.size() < 2 ? 0 : sizes.size() - 2; }
  std::size_t width() const noexcept { return sizes.size() > 2 ? sizes[1] : 0; }
  std::size_t total_parameter_count() const noexcept { return params.size(); }
  std::span<double> parameters() noexcept { return params; }
  std::span<const double> parameters() const noexcept { return params; }

  /// Offset of layer l's weights (l = 0 is input -> first hidden).
  std::size_t weight_offset(std::size_t l) const noexcept {
    std::size_t off = 0;
    for (std::size_t k = 0; k < l; ++k) off += sizes[k + 1] * sizes[k] + sizes[k + 1];
    return off;
  }
};

constexpr std::size_t mlp_parameter_count(std::size_t input_dim, std::size_t width, std::size_t depth,
                                          std::size_t classes) noexcept {
  if (depth == 0) return input_dim * classes + classes;
  return input_dim * width + width + (depth - 1) * (width * width + width) + width * classes + classes;
}

/// Width whose parameter count is closest to `budget` (ties -> narrower).
/// Throws ConfigError if even width 1 exceeds the budget by more than 10%,
/// or if the closest count misses the budget by more than 10%.
inline std::size_t solve_baseline_width(std::size_t budget, std::size_t input_dim, std::size_t classes,
                                        std::size_t depth) {
  if (depth == 0) throw ConfigError("baseline depth must be >= 1");
  const std::size_t minimal = mlp_parameter_count(input_dim, 1, depth, classes);
  if (static_cast<double>(minimal) > 1.1 * static_cast<double>(budget)) {
    throw ConfigError("baseline budget " + std::to_string(budget) + " is infeasible: the smallest " +
                      std::to_string(depth) + "-hidden-layer MLP has " + std::to_string(minimal) + " parameters");
  }
  auto miss = [&](std::size_t w) {
    const auto c = static_cast<double>(mlp_parameter_count(input_dim, w, depth, classes));
    return std::abs(c - static_cast<double>(budget));
  };
  std::size_t best = 1;
  for (std::size_t w = 2; mlp_parameter_count(input_dim, w - 1, depth, classes) <= budget; ++w) {
    if (miss(w) < miss(best)) best = w;
  }
  if (miss(best) > 0.1 * static_cast<double>(budget)) {
    throw ConfigError("no baseline width reaches budget " + std::to_string(budget) + " within 10% (closest: " +
                      std::to_string(mlp_parameter_count(input_dim, best, depth, classes)) + ")");
  }
  return best;
}

/// Parameter-matched MLP; Uniform(+-1/sqrt(fan_in)) weights, zero biases.
inline MlpBaseline build_baseline(std::size_t total_param_budget, std::size_t input_dim, std::size_t classes,
                                  std::size_t depth, std::uint64_t seed) {
  const std::size_t width = solve_baseline_width(total_param_budget, input_dim, classes, depth);
  MlpBaseline net;
  net.sizes.push_back(input_dim);
  for (std::size_t k = 0; k < depth; ++k) net.sizes.push_back(width);
  net.sizes.push_back(classes);
  net.params.assign(mlp_parameter_count(input_dim, width, depth, classes), 0.0);
  Rng rng(seed);
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < net.sizes.size(); ++l) {
    const std::size_t in = net.sizes[l];
    const std::size_t out = net.sizes[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (std::size_t k = 0; k < in * out; ++k) net.params[off + k] = rng.uniform(-bound, bound);
    off += in * out + out;
  }
  return net;
}

inline std::vector<double> baseline_logits(const MlpBaseline& net, std::span<const double> x) {
  if (x.size() != net.sizes.front()) throw ConfigError("baseline: input dimension mismatch");
  std::vector<double> cur(x.begin(), x.end());
  std::vector<double> next;
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < net.sizes.size(); ++l) {
    const std::size_t in = net.sizes[l];
    const std::size_t out = net.sizes[l + 1];
    next.assign(out, 0.0);
    kernels::matvec({net.params.data() + off, in * out}, out, in, cur, next);
    for (std::size_t i = 0; i < out; ++i) next[i] = next[i] + net.params[off + in * out + i];
    if (l + 2 < net.sizes.size()) {
      for (double& v : next) v = v > 0.0 ? v : 0.0;
    }
    off += in * out + out;
    cur.swap(next);
  }
  return cur;
}

inline ad::Var record_baseline_on_tape(const MlpBaseline& net, std::span<const double> x, ad::Tape& tape,
                                       std::span<double> grad) {
  if (grad.size() != net.params.size()) throw ConfigError("baseline: gradient buffer size mismatch");
  ad::Var cur = tape.constant(x);
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < net.sizes.size(); ++l) {
    const std::size_t in = net.sizes[l];
    const std::size_t out = net.sizes[l + 1];
    ad::ParamRef w{net.params.data() + off, grad.data() + off, out, in};
    ad::ParamRef b{net.params.data() + off + in * out, grad.data() + off + in * out, out, 1};
    cur = tape.add_bias(tape.matvec(w, cur), b);
    if (l + 2 < net.sizes.size()) cur = tape.relu(cur);
    off += in * out + out;
  }
  return cur;
}

inline std::string parameter_name(const MlpBaseline& net, std::size_t index) {
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < net.sizes.size(); ++l) {
    const std::size_t in = net.sizes[l];
    const std::size_t out = net.sizes[l + 1];
    if (index < off + in * out) {
      const std::size_t k = index - off;
      return "layer[" + std::to_string(l) + "].W[" + std::to_string(k / in) + "," + std::to_string(k % in) + "]";
    }
    if (index < off + in * out + out) return "layer[" + std::to_string(l) + "].b[" + std::to_string(index - off - in * out) + "]";
    off += in * out + out;
  }
  return "param[" + std::to_string(index) + "]";
}

// Learner interface (shared with Model, see training.hpp).

inline double sample_loss(const MlpBaseline& net, std::span<const double> x, std::size_t label) {
  return kernels::cross_entropy(baseline_logits(net, x), label);
}

inline double sample_loss_and_gradient(const MlpBaseline& net, std::span<const double> x, std::size_t label,
                                       ad::Tape& tape, std::span<double> grad) {
  tape.clear();
  ad::Var loss = tape.cross_entropy(record_baseline_on_tape(net, x, tape, grad), label);
  tape.backward(loss);
  return tape.scalar_value(loss);
}

/// Dense: every parameter is used for every sample.
inline SampleRecord evaluate_sample(const MlpBaseline& net, std::span<const double> x, std::size_t label) {
  const auto logits = baseline_logits(net, x);
  SampleRecord r;
  r.label = label;
  r.prediction = kernels::argmax(logits);
  r.correct = r.prediction == label;
  r.loss = kernels::cross_entropy(logits, label);
  r.used_params = net.total_parameter_count();
  r.active_block_pct = 100.0;
  r.steps = 0;
  r.final_theta = 0.0;
  r.terminated_by = "dense";
  return r;
}

}  // namespace raymoe
