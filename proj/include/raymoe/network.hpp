#pragma once

// Threshold-gated relaxation over a wired expert hierarchy.
//
// Each live expert i owns W_i (neurons x fan_in) and b_i. Its firing rate is
// the sum of its slots, r_i = sum(z_i). At step t with threshold theta(t) an
// expert fires iff r_i(t) > theta(t) and then emits
//
//     s_i(t) = (r_i(t) - theta(t)) * softmax(W_i z_i(t-1) + b_i),
//
// one gate value per outgoing connection. Updates are synchronous: every
// expert reads the slots as they were after step t-1. A slot keeps the last
// value its source wrote (initially 0), and input-fed slots hold the constant
// input activations N_j * softmax(W_in_j x + b_in_j). theta starts at theta0
// and is multiplied by `decay` after every step; relaxation stops as soon as
// the output slots sum to at least theta_out, or after t_max steps.
// Logits are W_out z_out + b_out on the final output slots.
//
// Parameter layout (one flat array, this order):
//   input module j:  nonzero weights in pattern order, then bias (N_j)
//   live expert e (layer, index order): W row-major (neurons x fan_in), then bias
//   output: W_out row-major (classes x output_slots), then b_out

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "raymoe/autodiff.hpp"
#include "raymoe/errors.hpp"
#include "raymoe/kernels.hpp"
#include "raymoe/rng.hpp"
#include "raymoe/topology.hpp"

namespace raymoe {

struct RelaxationConfig {
  double theta0 = 1.0;
  double decay = 0.9;
  double theta_out = 0.5;
  std::size_t t_max = 64;

  friend bool operator==(const RelaxationConfig&, const RelaxationConfig&) = default;

  // theta0 = 0 is accepted: it is the fully-open limit in which every
  // reachable block computes.
  void validate() const {
    std::vector<std::string> errs;
    if (!(theta0 >= 0.0) || !std::isfinite(theta0)) errs.emplace_back("theta0 must be finite and >= 0");
    if (!(decay > 0.0 && decay < 1.0)) errs.emplace_back("decay must lie in (0, 1)");
    if (!(theta_out > 0.0)) errs.emplace_back("theta_out must be > 0");
    if (t_max < 1) errs.emplace_back("t_max must be >= 1");
    if (!errs.empty()) {
      std::string msg = "invalid relaxation config:";
      for (const auto& e : errs) msg += "\n  " + e;
      throw ConfigError(msg);
    }
  }
};

struct ParameterLayout {
  struct Block {
    std::size_t weight = 0;
    std::size_t bias = 0;
  };
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  std::vector<Block> input_modules;
  /// Indexed by expert id; dead experts have weight == bias == npos.
  std::vector<Block> experts;
  Block output;
  std::size_t input_count = 0;
  std::size_t output_count = 0;
  std::size_t total = 0;

  static ParameterLayout of(const Topology& t) {
    ParameterLayout lay;
    std::size_t off = 0;
    for (const auto& m : t.input_modules) {
      lay.input_modules.push_back({off, off + m.nonzeros.size()});
      off += m.nonzeros.size() + m.neuron_count;
    }
    lay.input_count = off;
    const std::size_t n = t.config.neurons_per_expert;
    for (const auto& e : t.experts) {
      if (e.dead) {
        lay.experts.push_back({npos, npos});
        continue;
      }
      lay.experts.push_back({off, off + n * e.fan_in});
      off += n * e.fan_in + n;
    }
    lay.output = {off, off + static_cast<std::size_t>(t.num_classes) * t.output_slots};
    lay.output_count = static_cast<std::size_t>(t.num_classes) * t.output_slots + t.num_classes;
    off += lay.output_count;
    lay.total = off;
    return lay;
  }
};

/// Topology plus every trainable parameter and the relaxation schedule.
struct Model {
  std::shared_ptr<const Topology> topology;
  RelaxationConfig relaxation;
  ParameterLayout layout;
  std::vector<double> params;

  std::size_t total_parameter_count() const noexcept { return params.size(); }

  std::span<double> parameters() noexcept { return params; }
  std::span<const double> parameters() const noexcept { return params; }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, drawn in
/// layout order. Input modules use the mean nonzeros per row as fan-in.
inline Model init_params(std::shared_ptr<const Topology> topology, std::uint64_t seed,
                         RelaxationConfig relaxation = {}) {
  if (!topology) throw ConfigError("init_params: null topology");
  relaxation.validate();
  const Topology& t = *topology;
  Model m;
  m.relaxation = relaxation;
  m.layout = ParameterLayout::of(t);
  m.params.assign(m.layout.total, 0.0);
  Rng rng(seed);
  auto fill = [&](std::size_t offset, std::size_t count, double fan_in) {
    const double bound = 1.0 / std::sqrt(fan_in);
    for (std::size_t k = 0; k < count; ++k) m.params[offset + k] = rng.uniform(-bound, bound);
  };
  for (std::size_t j = 0; j < t.input_modules.size(); ++j) {
    const auto& mod = t.input_modules[j];
    fill(m.layout.input_modules[j].weight, mod.nonzeros.size(),
         static_cast<double>(mod.nonzeros.size()) / mod.neuron_count);
  }
  const std::size_t n = t.config.neurons_per_expert;
  for (std::size_t e = 0; e < t.experts.size(); ++e) {
    if (t.experts[e].dead) continue;
    fill(m.layout.experts[e].weight, n * t.experts[e].fan_in, t.experts[e].fan_in);
  }
  if (t.output_slots > 0) {
    fill(m.layout.output.weight, static_cast<std::size_t>(t.num_classes) * t.output_slots, t.output_slots);
  }
  m.topology = std::move(topology);
  return m;
}

inline Model init_params(const Topology& t, std::uint64_t seed, RelaxationConfig relaxation = {}) {
  return init_params(std::make_shared<const Topology>(t), seed, relaxation);
}

/// Readable identifier of a flat parameter index, e.g. "expert[17].W[3,2]".
inline std::string parameter_name(const Model& m, std::size_t index) {
  const Topology& t = *m.topology;
  const auto& lay = m.layout;
  for (std::size_t j = 0; j < t.input_modules.size(); ++j) {
    const auto& b = lay.input_modules[j];
    const auto& mod = t.input_modules[j];
    if (index >= b.weight && index < b.bias) {
      const auto& nz = mod.nonzeros[index - b.weight];
      return "input[" + std::to_string(j) + "].W[" + std::to_string(nz.row) + "," + std::to_string(nz.col) + "]";
    }
    if (index >= b.bias && index < b.bias + mod.neuron_count) {
      return "input[" + std::to_string(j) + "].b[" + std::to_string(index - b.bias) + "]";
    }
  }
  const std::size_t n = t.config.neurons_per_expert;
  for (std::size_t e = 0; e < t.experts.size(); ++e) {
    const auto& b = lay.experts[e];
    if (b.weight == ParameterLayout::npos) continue;
    const std::size_t fan_in = t.experts[e].fan_in;
    if (index >= b.weight && index < b.bias) {
      const std::size_t k = index - b.weight;
      return "expert[" + std::to_string(e) + "].W[" + std::to_string(k / fan_in) + "," +
             std::to_string(k % fan_in) + "]";
    }
    if (index >= b.bias && index < b.bias + n) {
      return "expert[" + std::to_string(e) + "].b[" + std::to_string(index - b.bias) + "]";
    }
  }
  if (index >= lay.output.weight && index < lay.output.bias) {
    const std::size_t k = index - lay.output.weight;
    return "output.W[" + std::to_string(k / t.output_slots) + "," + std::to_string(k % t.output_slots) + "]";
  }
  if (index >= lay.output.bias && index < lay.total) return "output.b[" + std::to_string(index - lay.output.bias) + "]";
  return "param[" + std::to_string(index) + "]";
}

enum class Termination { output_threshold, t_max };

inline const char* to_string(Termination t) noexcept {
  return t == Termination::output_threshold ? "output_threshold" : "t_max";
}

struct StepRecord {
  std::size_t t = 0;
  double theta = 0.0;
  std::size_t active_count = 0;
  double output_sum = 0.0;

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct RelaxationTrace {
  std::vector<StepRecord> steps;
  Termination terminated_by = Termination::t_max;
  std::size_t steps_taken = 0;
  std::size_t used_parameter_count = 0;
  double active_block_fraction = 0.0;
  /// Per expert id: fired at least once.
  std::vector<std::uint8_t> active_ever;

  double final_theta() const noexcept { return steps.empty() ? 0.0 : steps.back().theta; }

  friend bool operator==(const RelaxationTrace&, const RelaxationTrace&) = default;
};

/// Per-step mutable state. `theta` is the threshold the next step will use
/// and `t` counts the steps already taken.
template <class Slot>
struct BasicRelaxationState {
  std::size_t t = 0;
  double theta = 0.0;
  std::vector<std::vector<Slot>> expert_slots;
  std::vector<Slot> output_slots;
  std::vector<std::uint8_t> active_ever;
  std::vector<std::uint8_t> active_now;
  double output_sum = 0.0;
};

using RelaxationState = BasicRelaxationState<double>;

/// Used-parameter count: input and output structures always, plus every
/// expert that fired at least once.
inline std::size_t count_used_parameters(const Model& m, std::span<const std::uint8_t> active_ever) {
  const Topology& t = *m.topology;
  std::size_t used = m.layout.input_count + m.layout.output_count;
  const std::size_t n = t.config.neurons_per_expert;
  for (std::size_t e = 0; e < t.experts.size(); ++e) {
    if (e < active_ever.size() && active_ever[e] && !t.experts[e].dead) used += n * t.experts[e].fan_in + n;
  }
  return used;
}

inline std::size_t count_used_parameters(const Model& m, const RelaxationTrace& trace) {
  return count_used_parameters(m, trace.active_ever);
}

namespace detail {

/// Tape-free arithmetic; slots hold plain values.
class PlainBackend {
 public:
  using Slot = double;

  explicit PlainBackend(const Model& m) : m_(m) {}

  static Slot zero() noexcept { return 0.0; }
  static double value(Slot s) noexcept { return s; }

  /// Activations of input module j, one slot per neuron.
  std::vector<Slot> input_module(std::size_t j, std::span<const double> x) {
    const auto& mod = m_.topology->input_modules[j];
    const auto& blk = m_.layout.input_modules[j];
    std::vector<double> y(mod.neuron_count);
    kernels::sparse_matvec({m_.params.data() + blk.weight, mod.nonzeros.size()}, mod.nonzeros, x, y);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] + m_.params[blk.bias + i];
    kernels::softmax(y, y);
    const double scale = static_cast<double>(mod.neuron_count);
    for (double& v : y) v = scale * v;
    return y;
  }

  /// Gate values of firing expert e; r is its firing rate (> theta).
  void fire(std::size_t e, std::span<const Slot> z, double r, double theta, std::span<Slot> gates) {
    const auto& blk = m_.layout.experts[e];
    const std::size_t n = gates.size();
    const double a0 = r + (-theta);
    const double a = a0 > 0.0 ? a0 : 0.0;
    kernels::matvec({m_.params.data() + blk.weight, n * z.size()}, n, z.size(), z, gates);
    for (std::size_t i = 0; i < n; ++i) gates[i] = gates[i] + m_.params[blk.bias + i];
    kernels::softmax(gates, gates);
    for (std::size_t i = 0; i < n; ++i) gates[i] = a * gates[i];
  }

  std::vector<double> logits(std::span<const Slot> out) {
    const Topology& t = *m_.topology;
    const auto& blk = m_.layout.output;
    std::vector<double> y(t.num_classes);
    kernels::matvec({m_.params.data() + blk.weight, y.size() * out.size()}, y.size(), out.size(), out, y);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] + m_.params[blk.bias + i];
    return y;
  }

 private:
  const Model& m_;
};

/// Records every computation of active blocks on a tape; slots are element
/// references, so carried-over slot values pass gradients straight through.
class TapeBackend {
 public:
  using Slot = ad::Element;

  TapeBackend(const Model& m, ad::Tape& tape, std::span<double> grad) : m_(m), tape_(tape), grad_(grad) {
    if (grad_.size() != m_.params.size()) {
      throw ConfigError("gradient buffer has " + std::to_string(grad_.size()) + " entries, model has " +
                        std::to_string(m_.params.size()));
    }
  }

  static Slot zero() noexcept { return ad::Element::zero(); }
  double value(Slot s) const { return tape_.element_value(s); }

  std::vector<Slot> input_module(std::size_t j, std::span<const double> x) {
    const auto& mod = m_.topology->input_modules[j];
    const auto& blk = m_.layout.input_modules[j];
    ad::SparseParamRef w{m_.params.data() + blk.weight, grad_.data() + blk.weight, mod.nonzeros, mod.neuron_count,
                         x.size()};
    ad::Var pre = tape_.add_bias(tape_.sparse_matvec(w, x), dense(blk.bias, mod.neuron_count, 1));
    ad::Var act = tape_.scale(static_cast<double>(mod.neuron_count), tape_.softmax(pre));
    return elements(act);
  }

  void fire(std::size_t e, std::span<const Slot> z, double r, double theta, std::span<Slot> gates) {
    const auto& blk = m_.layout.experts[e];
    const std::size_t n = gates.size();
    ad::Var zin = tape_.gather(z);
    ad::Var rate = tape_.sum(zin);
    if (tape_.scalar_value(rate) != r) throw std::logic_error("TapeBackend: firing rate mismatch");
    ad::Var gate = tape_.relu(tape_.shift(rate, -theta));
    ad::Var f = tape_.add_bias(tape_.matvec(dense(blk.weight, n, z.size()), zin), dense(blk.bias, n, 1));
    ad::Var s = tape_.scale(gate, tape_.softmax(f));
    for (std::size_t i = 0; i < n; ++i) gates[i] = Slot{s.node, static_cast<std::uint32_t>(i)};
  }

  ad::Var logits_var(std::span<const Slot> out) {
    const Topology& t = *m_.topology;
    const auto& blk = m_.layout.output;
    ad::Var zout = tape_.gather(out);
    return tape_.add_bias(tape_.matvec(dense(blk.weight, t.num_classes, out.size()), zout),
                          dense(blk.bias, t.num_classes, 1));
  }

 private:
  ad::ParamRef dense(std::size_t offset, std::size_t rows, std::size_t cols) const {
    return {m_.params.data() + offset, grad_.data() + offset, rows, cols};
  }
  static std::vector<Slot> elements(ad::Var v) {
    std::vector<Slot> out(v.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = Slot{v.node, static_cast<std::uint32_t>(i)};
    return out;
  }

  const Model& m_;
  ad::Tape& tape_;
  std::span<double> grad_;
};

template <class Backend>
BasicRelaxationState<typename Backend::Slot> initial_state(const Model& m, std::span<const double> x, Backend& be) {
  const Topology& t = *m.topology;
  if (x.size() != t.config.input_dim) {
    throw ConfigError("input has " + std::to_string(x.size()) + " features, model expects " +
                      std::to_string(t.config.input_dim));
  }
  BasicRelaxationState<typename Backend::Slot> s;
  s.theta = m.relaxation.theta0;
  s.expert_slots.resize(t.experts.size());
  for (std::size_t e = 0; e < t.experts.size(); ++e) s.expert_slots[e].assign(t.experts[e].fan_in, Backend::zero());
  s.output_slots.assign(t.output_slots, Backend::zero());
  s.active_ever.assign(t.experts.size(), 0);
  s.active_now.assign(t.experts.size(), 0);
  for (std::size_t j = 0; j < t.input_modules.size(); ++j) {
    const auto act = be.input_module(j, x);
    const auto& targets = t.input_modules[j].targets;
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const Target& tg = targets[k];
      if (tg.kind == TargetKind::output) {
        s.output_slots[tg.slot] = act[k];
      } else {
        s.expert_slots[tg.block][tg.slot] = act[k];
      }
    }
  }
  std::vector<double> vals(s.output_slots.size());
  for (std::size_t k = 0; k < vals.size(); ++k) vals[k] = be.value(s.output_slots[k]);
  s.output_sum = kernels::sum(vals);
  return s;
}

/// One synchronous step; returns the number of experts that fired.
template <class Backend>
std::size_t step(const Model& m, BasicRelaxationState<typename Backend::Slot>& s, Backend& be) {
  using Slot = typename Backend::Slot;
  const Topology& t = *m.topology;
  const double theta = s.theta;
  auto next_experts = s.expert_slots;
  auto next_output = s.output_slots;
  std::fill(s.active_now.begin(), s.active_now.end(), 0);

  std::vector<double> zval;
  std::vector<Slot> gates(t.config.neurons_per_expert);
  std::size_t fired = 0;
  for (std::size_t e = 0; e < t.experts.size(); ++e) {
    const Expert& ex = t.experts[e];
    if (ex.dead) continue;
    const auto& z = s.expert_slots[e];
    zval.resize(z.size());
    for (std::size_t k = 0; k < z.size(); ++k) zval[k] = be.value(z[k]);
    const double r = kernels::sum(zval);
    if (!(r > theta)) continue;
    be.fire(e, z, r, theta, gates);
    ++fired;
    s.active_now[e] = 1;
    s.active_ever[e] = 1;
    for (std::size_t g = 0; g < ex.gate_targets.size(); ++g) {
      const Target& tg = ex.gate_targets[g];
      if (tg.kind == TargetKind::output) {
        next_output[tg.slot] = gates[g];
      } else {
        next_experts[tg.block][tg.slot] = gates[g];
      }
    }
  }
  s.expert_slots = std::move(next_experts);
  s.output_slots = std::move(next_output);
  zval.resize(s.output_slots.size());
  for (std::size_t k = 0; k < zval.size(); ++k) zval[k] = be.value(s.output_slots[k]);
  s.output_sum = kernels::sum(zval);
  s.t += 1;
  s.theta = theta * m.relaxation.decay;
  return fired;
}

template <class Backend>
RelaxationTrace run(const Model& m, BasicRelaxationState<typename Backend::Slot>& s, Backend& be) {
  RelaxationTrace trace;
  const auto& cfg = m.relaxation;
  trace.terminated_by = Termination::t_max;
  while (s.t < cfg.t_max) {
    const double theta = s.theta;
    const std::size_t fired = step(m, s, be);
    trace.steps.push_back({s.t, theta, fired, s.output_sum});
    if (s.output_sum >= cfg.theta_out) {
      trace.terminated_by = Termination::output_threshold;
      break;
    }
  }
  trace.steps_taken = s.t;
  trace.active_ever = s.active_ever;
  trace.used_parameter_count = count_used_parameters(m, trace.active_ever);
  const std::size_t live = m.topology->live_expert_count();
  std::size_t active = 0;
  for (std::size_t e = 0; e < s.active_ever.size(); ++e) active += s.active_ever[e] ? 1 : 0;
  trace.active_block_fraction = live == 0 ? 0.0 : static_cast<double>(active) / static_cast<double>(live);
  return trace;
}

}  // namespace detail

/// Input-module activations, one vector per module (each sums to its neuron count).
inline std::vector<std::vector<double>> input_forward(const Model& m, std::span<const double> x) {
  const Topology& t = *m.topology;
  if (x.size() != t.config.input_dim) {
    throw ConfigError("input has " + std::to_string(x.size()) + " features, model expects " +
                      std::to_string(t.config.input_dim));
  }
  detail::PlainBackend be(m);
  std::vector<std::vector<double>> out;
  for (std::size_t j = 0; j < t.input_modules.size(); ++j) out.push_back(be.input_module(j, x));
  return out;
}

/// State before the first step: input slots filled, theta = theta0.
inline RelaxationState initial_state(const Model& m, std::span<const double> x) {
  detail::PlainBackend be(m);
  return detail::initial_state(m, x, be);
}

inline RelaxationState relax_step(const Model& m, RelaxationState s) {
  detail::PlainBackend be(m);
  detail::step(m, s, be);
  return s;
}

struct RelaxResult {
  std::vector<double> logits;
  RelaxationTrace trace;
};

inline RelaxResult relax(const Model& m, std::span<const double> x) {
  detail::PlainBackend be(m);
  auto s = detail::initial_state(m, x, be);
  RelaxResult out;
  out.trace = detail::run(m, s, be);
  out.logits = be.logits(s.output_slots);
  return out;
}

/// Argmax of the logits; ties go to the lowest class index.
inline std::size_t predict(const Model& m, std::span<const double> x) { return kernels::argmax(relax(m, x).logits); }

struct TapedRelaxResult {
  ad::Var logits;
  RelaxationTrace trace;
};

/// Same control flow and arithmetic as relax(), recorded on `tape`.
/// Parameter gradients accumulate into `grad` (sized like m.params) on backward().
inline TapedRelaxResult record_relax_on_tape(const Model& m, std::span<const double> x, ad::Tape& tape,
                                             std::span<double> grad) {
  detail::TapeBackend be(m, tape, grad);
  auto s = detail::initial_state(m, x, be);
  TapedRelaxResult out;
  out.trace = detail::run(m, s, be);
  out.logits = be.logits_var(s.output_slots);
  return out;
}

}  // namespace raymoe
