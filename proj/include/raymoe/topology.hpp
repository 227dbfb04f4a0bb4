#pragma once

// Seeded wiring of the layered expert hierarchy.
//
// Sources are input-module neurons (layer 0) and expert gates (layers 1..L).
// Every source owns exactly one outgoing connection, which lands on a fresh
// slot of its target: slots are numbered densely in arrival order, so each
// slot of each block (and of the output layer, layer L+1) has exactly one
// source and a block's fan-in equals its in-degree.
//
// Generation order, and therefore RNG consumption order, is fixed:
//   for each input module j = 1..M:
//     sparse weight pattern, then the targets of its neurons in order
//   for each expert in (layer, index) order, for each gate in order:
//     its target
// Experts that receive no connection are dead: they own no parameters and
// emit no connections (their gates get no targets).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "raymoe/errors.hpp"
#include "raymoe/kernels.hpp"
#include "raymoe/rng.hpp"

namespace raymoe {

using kernels::Nonzero;

struct TopologyConfig {
  std::uint32_t input_dim = 0;
  std::uint32_t layers = 4;
  std::uint32_t experts_per_layer = 16;
  std::uint32_t neurons_per_expert = 16;
  double p = 0.5;
  std::uint32_t num_classes = 10;
  double sparsity = 0.01;
  /// Input module j (1-based) has module_size_step * j neurons.
  std::uint32_t input_modules = 6;
  std::uint32_t module_size_step = 5;

  friend bool operator==(const TopologyConfig&, const TopologyConfig&) = default;

  /// Throws ConfigError listing every problem found.
  void validate() const {
    std::vector<std::string> errs;
    if (input_dim < 1) errs.emplace_back("input_dim must be >= 1");
    if (layers < 2) errs.emplace_back("layers must be >= 2");
    if (experts_per_layer < 1) errs.emplace_back("experts_per_layer must be >= 1");
    if (neurons_per_expert < 1) errs.emplace_back("neurons_per_expert must be >= 1");
    if (!(p > 0.0 && p <= 1.0)) errs.emplace_back("p must lie in (0, 1]");
    if (num_classes < 1) errs.emplace_back("num_classes must be >= 1");
    if (!(sparsity > 0.0 && sparsity <= 1.0)) errs.emplace_back("sparsity must lie in (0, 1]");
    if (input_modules < 1) errs.emplace_back("input_modules must be >= 1");
    if (module_size_step < 1) errs.emplace_back("module_size_step must be >= 1");
    if (!errs.empty()) {
      std::string msg = "invalid topology config:";
      for (const auto& e : errs) msg += "\n  " + e;
      throw ConfigError(msg);
    }
  }
};

enum class TargetKind : std::uint8_t { expert = 0, output = 1 };

struct Target {
  TargetKind kind = TargetKind::output;
  /// Global expert id ((layer-1) * experts_per_layer + index); 0 for the output layer.
  std::uint32_t block = 0;
  std::uint32_t slot = 0;

  friend bool operator==(const Target&, const Target&) = default;
};

struct InputModule {
  std::uint32_t neuron_count = 0;
  /// Sorted by (row, col); row < neuron_count, col < input_dim.
  std::vector<Nonzero> nonzeros;
  std::vector<Target> targets;

  friend bool operator==(const InputModule&, const InputModule&) = default;
};

struct Expert {
  std::uint32_t layer = 1;
  std::uint32_t fan_in = 0;
  bool dead = true;
  std::vector<Target> gate_targets;

  friend bool operator==(const Expert&, const Expert&) = default;
};

struct Topology {
  static constexpr int kVersion = 1;

  TopologyConfig config;
  std::uint64_t seed = 0;
  std::vector<InputModule> input_modules;
  std::vector<Expert> experts;
  std::uint32_t output_slots = 0;
  std::uint32_t num_classes = 0;

  friend bool operator==(const Topology&, const Topology&) = default;

  std::uint32_t layers() const noexcept { return config.layers; }
  std::uint32_t output_layer() const noexcept { return config.layers + 1; }
  std::size_t expert_id(std::uint32_t layer, std::uint32_t index) const noexcept {
    return static_cast<std::size_t>(layer - 1) * config.experts_per_layer + index;
  }
  std::uint32_t target_layer(const Target& t) const {
    return t.kind == TargetKind::output ? output_layer() : experts.at(t.block).layer;
  }
  std::size_t live_expert_count() const noexcept {
    return static_cast<std::size_t>(
        std::count_if(experts.begin(), experts.end(), [](const Expert& e) { return !e.dead; }));
  }
  std::size_t input_neuron_count() const noexcept {
    std::size_t n = 0;
    for (const auto& m : input_modules) n += m.neuron_count;
    return n;
  }
};

namespace detail {

/// Samples max(round(sparsity * rows * cols), rows) distinct positions with at
/// least one per row: one uniform column per row first, then the remainder
/// uniformly without replacement over the positions not yet taken.
inline std::vector<Nonzero> sample_sparse_pattern(std::uint32_t rows, std::uint32_t cols,
                                                  double sparsity, Rng& rng) {
  const std::uint64_t cells = static_cast<std::uint64_t>(rows) * cols;
  auto wanted = static_cast<std::uint64_t>(std::llround(sparsity * static_cast<double>(cells)));
  wanted = std::clamp<std::uint64_t>(wanted, rows, cells);

  std::unordered_set<std::uint64_t> taken;
  taken.reserve(static_cast<std::size_t>(wanted) * 2);
  for (std::uint32_t r = 0; r < rows; ++r) {
    taken.insert(static_cast<std::uint64_t>(r) * cols + rng.uniform_index(cols));
  }
  while (taken.size() < wanted) taken.insert(rng.uniform_index(cells));

  std::vector<Nonzero> out;
  out.reserve(taken.size());
  for (std::uint64_t cell : taken) {
    out.push_back({static_cast<std::uint32_t>(cell / cols), static_cast<std::uint32_t>(cell % cols)});
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Builds the wiring graph deterministically from (config, seed).
///
/// Input neuron: layer 1 with probability p, otherwise one of layers 2..L
/// uniformly (each (1-p)/(L-1)). Gate of an expert in layer l < L: layer l+1
/// with probability p, otherwise uniformly one of {l+2, ..., L, output}. Gates
/// of layer L go to the output layer. Within a chosen layer the expert is
/// uniform.
inline Topology build_topology(const TopologyConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);

  Topology topo;
  topo.config = config;
  topo.seed = seed;
  topo.num_classes = config.num_classes;
  const std::uint32_t L = config.layers;
  const std::uint32_t E = config.experts_per_layer;

  topo.experts.resize(static_cast<std::size_t>(L) * E);
  for (std::uint32_t l = 1; l <= L; ++l) {
    for (std::uint32_t i = 0; i < E; ++i) topo.experts[topo.expert_id(l, i)].layer = l;
  }

  auto connect_to_layer = [&](std::uint32_t layer) -> Target {
    if (layer > L) return Target{TargetKind::output, 0, topo.output_slots++};
    const auto id = topo.expert_id(layer, static_cast<std::uint32_t>(rng.uniform_index(E)));
    return Target{TargetKind::expert, static_cast<std::uint32_t>(id), topo.experts[id].fan_in++};
  };

  topo.input_modules.resize(config.input_modules);
  for (std::uint32_t j = 0; j < config.input_modules; ++j) {
    InputModule& mod = topo.input_modules[j];
    mod.neuron_count = config.module_size_step * (j + 1);
    mod.nonzeros = detail::sample_sparse_pattern(mod.neuron_count, config.input_dim, config.sparsity, rng);
    mod.targets.reserve(mod.neuron_count);
    for (std::uint32_t k = 0; k < mod.neuron_count; ++k) {
      std::uint32_t layer = 1;
      if (rng.uniform01() >= config.p) layer = 2 + static_cast<std::uint32_t>(rng.uniform_index(L - 1));
      mod.targets.push_back(connect_to_layer(layer));
    }
  }

  for (std::uint32_t l = 1; l <= L; ++l) {
    for (std::uint32_t i = 0; i < E; ++i) {
      Expert& ex = topo.experts[topo.expert_id(l, i)];
      ex.dead = ex.fan_in == 0;
      if (ex.dead) continue;
      ex.gate_targets.reserve(config.neurons_per_expert);
      for (std::uint32_t g = 0; g < config.neurons_per_expert; ++g) {
        std::uint32_t layer = L + 1;
        if (l < L) {
          // Beyond-next destinations {l+2, ..., L, output} number L - l.
          layer = rng.uniform01() < config.p
                      ? l + 1
                      : l + 2 + static_cast<std::uint32_t>(rng.uniform_index(L - l));
        }
        ex.gate_targets.push_back(connect_to_layer(layer));
      }
    }
  }
  return topo;
}

enum class ViolationKind { structure, acyclicity, last_layer_routing, slot_coverage, dead_flag, sparsity };

struct Violation {
  ViolationKind kind;
  std::string message;
};

/// Checks every structural invariant; empty result iff valid. Dead blocks are legal.
inline std::vector<Violation> validate(const Topology& t) {
  std::vector<Violation> out;
  auto add = [&](ViolationKind k, std::string msg) { out.push_back({k, std::move(msg)}); };
  const auto& cfg = t.config;
  const std::size_t n_experts = static_cast<std::size_t>(cfg.layers) * cfg.experts_per_layer;
  if (t.experts.size() != n_experts) {
    add(ViolationKind::structure, "expected " + std::to_string(n_experts) + " experts, found " +
                                      std::to_string(t.experts.size()));
    return out;
  }
  if (t.num_classes != cfg.num_classes) add(ViolationKind::structure, "num_classes disagrees with config");

  std::vector<std::vector<int>> expert_hits(n_experts);
  for (std::size_t e = 0; e < n_experts; ++e) expert_hits[e].assign(t.experts[e].fan_in, 0);
  std::vector<int> output_hits(t.output_slots, 0);

  auto check_target = [&](const Target& tg, std::uint32_t src_layer, const std::string& who) {
    if (tg.kind == TargetKind::output) {
      if (tg.slot >= t.output_slots) {
        add(ViolationKind::slot_coverage, who + " targets output slot " + std::to_string(tg.slot) + " out of range");
      } else {
        ++output_hits[tg.slot];
      }
      return;
    }
    if (tg.kind != TargetKind::expert || tg.block >= n_experts) {
      add(ViolationKind::structure, who + " targets an unknown block");
      return;
    }
    if (t.experts[tg.block].layer <= src_layer) {
      add(ViolationKind::acyclicity, who + " (layer " + std::to_string(src_layer) + ") targets expert " +
                                         std::to_string(tg.block) + " in layer " +
                                         std::to_string(t.experts[tg.block].layer));
    }
    if (tg.slot >= t.experts[tg.block].fan_in) {
      add(ViolationKind::slot_coverage, who + " targets slot " + std::to_string(tg.slot) + " of expert " +
                                            std::to_string(tg.block) + " beyond its fan-in");
    } else {
      ++expert_hits[tg.block][tg.slot];
    }
  };

  for (std::size_t j = 0; j < t.input_modules.size(); ++j) {
    const InputModule& m = t.input_modules[j];
    const std::string who = "input module " + std::to_string(j);
    if (m.targets.size() != m.neuron_count) add(ViolationKind::structure, who + ": target count != neuron_count");
    std::vector<int> row_nnz(m.neuron_count, 0);
    for (std::size_t k = 0; k < m.nonzeros.size(); ++k) {
      const auto& nz = m.nonzeros[k];
      if (nz.row >= m.neuron_count || nz.col >= cfg.input_dim) {
        add(ViolationKind::sparsity, who + ": nonzero out of bounds");
        continue;
      }
      if (k > 0 && !(m.nonzeros[k - 1] < nz)) add(ViolationKind::sparsity, who + ": nonzeros not sorted/unique");
      ++row_nnz[nz.row];
    }
    for (std::uint32_t r = 0; r < m.neuron_count; ++r) {
      if (row_nnz[r] == 0) add(ViolationKind::sparsity, who + ": row " + std::to_string(r) + " has no nonzero");
    }
    for (std::size_t k = 0; k < m.targets.size(); ++k) {
      check_target(m.targets[k], 0, who + " neuron " + std::to_string(k));
    }
  }

  for (std::size_t e = 0; e < n_experts; ++e) {
    const Expert& ex = t.experts[e];
    const std::string who = "expert " + std::to_string(e);
    const auto expected_layer = static_cast<std::uint32_t>(e / cfg.experts_per_layer + 1);
    if (ex.layer != expected_layer) add(ViolationKind::structure, who + ": layer index disagrees with position");
    if (ex.dead != (ex.fan_in == 0)) add(ViolationKind::dead_flag, who + ": dead flag disagrees with fan_in");
    const std::size_t gates = ex.dead ? 0 : cfg.neurons_per_expert;
    if (ex.gate_targets.size() != gates) {
      add(ViolationKind::structure, who + ": has " + std::to_string(ex.gate_targets.size()) +
                                        " gate targets, expected " + std::to_string(gates));
    }
    for (std::size_t g = 0; g < ex.gate_targets.size(); ++g) {
      const Target& tg = ex.gate_targets[g];
      if (ex.layer == cfg.layers && tg.kind != TargetKind::output) {
        add(ViolationKind::last_layer_routing, who + " gate " + std::to_string(g) + ": last layer must route to output");
      }
      check_target(tg, ex.layer, who + " gate " + std::to_string(g));
    }
  }

  for (std::size_t e = 0; e < n_experts; ++e) {
    for (std::size_t s = 0; s < expert_hits[e].size(); ++s) {
      if (expert_hits[e][s] != 1) {
        add(ViolationKind::slot_coverage, "expert " + std::to_string(e) + " slot " + std::to_string(s) + " has " +
                                              std::to_string(expert_hits[e][s]) + " sources");
      }
    }
  }
  for (std::size_t s = 0; s < output_hits.size(); ++s) {
    if (output_hits[s] != 1) {
      add(ViolationKind::slot_coverage,
          "output slot " + std::to_string(s) + " has " + std::to_string(output_hits[s]) + " sources");
    }
  }
  return out;
}

/// Experts reachable from an input neuron through live experts.
inline std::vector<bool> reachable_experts(const Topology& t) {
  std::vector<bool> reach(t.experts.size(), false);
  for (const auto& m : t.input_modules) {
    for (const auto& tg : m.targets) {
      if (tg.kind == TargetKind::expert) reach[tg.block] = true;
    }
  }
  // Targets are strictly deeper and experts are stored in layer order.
  for (std::size_t e = 0; e < t.experts.size(); ++e) {
    if (!reach[e] || t.experts[e].dead) continue;
    for (const auto& tg : t.experts[e].gate_targets) {
      if (tg.kind == TargetKind::expert) reach[tg.block] = true;
    }
  }
  return reach;
}

struct ReachabilityStats {
  std::size_t dead_block_count = 0;
  /// histogram[layer-1][f] = number of experts of that layer with fan_in f.
  std::vector<std::vector<std::size_t>> per_layer_fan_in_histogram;
  std::size_t output_fan_in = 0;
  std::size_t skip_connection_count = 0;
};

inline ReachabilityStats reachability_stats(const Topology& t) {
  ReachabilityStats st;
  st.per_layer_fan_in_histogram.resize(t.config.layers);
  for (const auto& ex : t.experts) {
    if (ex.dead) ++st.dead_block_count;
    auto& h = st.per_layer_fan_in_histogram[ex.layer - 1];
    if (h.size() <= ex.fan_in) h.resize(ex.fan_in + 1, 0);
    ++h[ex.fan_in];
    for (const auto& tg : ex.gate_targets) {
      if (t.target_layer(tg) > ex.layer + 1) ++st.skip_connection_count;
    }
  }
  for (const auto& m : t.input_modules) {
    for (const auto& tg : m.targets) {
      if (t.target_layer(tg) > 1) ++st.skip_connection_count;
    }
  }
  st.output_fan_in = t.output_slots;
  return st;
}

// Serialization -------------------------------------------------------------
//
// Versioned JSON, keys in this fixed order:
//   {version, seed, config{input_dim, layers, experts_per_layer,
//    neurons_per_expert, p, num_classes, sparsity, input_modules,
//    module_size_step},
//    input_modules[{neuron_count, nonzeros[[row,col]...],
//                   targets[[dest_kind, dest_id, slot]...]}],
//    experts[{layer, fan_in, dead, gate_targets[[dest_kind, dest_id, slot]...]}],
//    output_slots, num_classes}
// dest_kind is 0 for an expert (dest_id = global expert id) and 1 for the
// output layer (dest_id = 0).

inline nlohmann::ordered_json to_json(const TopologyConfig& c) {
  nlohmann::ordered_json j;
  j["input_dim"] = c.input_dim;
  j["layers"] = c.layers;
  j["experts_per_layer"] = c.experts_per_layer;
  j["neurons_per_expert"] = c.neurons_per_expert;
  j["p"] = c.p;
  j["num_classes"] = c.num_classes;
  j["sparsity"] = c.sparsity;
  j["input_modules"] = c.input_modules;
  j["module_size_step"] = c.module_size_step;
  return j;
}

inline nlohmann::ordered_json to_json(const Topology& t) {
  auto targets_json = [](const std::vector<Target>& ts) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& tg : ts) arr.push_back({static_cast<int>(tg.kind), tg.block, tg.slot});
    return arr;
  };
  nlohmann::ordered_json j;
  j["version"] = Topology::kVersion;
  j["seed"] = t.seed;
  j["config"] = to_json(t.config);
  auto mods = nlohmann::ordered_json::array();
  for (const auto& m : t.input_modules) {
    nlohmann::ordered_json mj;
    mj["neuron_count"] = m.neuron_count;
    auto nz = nlohmann::ordered_json::array();
    for (const auto& e : m.nonzeros) nz.push_back({e.row, e.col});
    mj["nonzeros"] = std::move(nz);
    mj["targets"] = targets_json(m.targets);
    mods.push_back(std::move(mj));
  }
  j["input_modules"] = std::move(mods);
  auto exs = nlohmann::ordered_json::array();
  for (const auto& e : t.experts) {
    nlohmann::ordered_json ej;
    ej["layer"] = e.layer;
    ej["fan_in"] = e.fan_in;
    ej["dead"] = e.dead;
    ej["gate_targets"] = targets_json(e.gate_targets);
    exs.push_back(std::move(ej));
  }
  j["experts"] = std::move(exs);
  j["output_slots"] = t.output_slots;
  j["num_classes"] = t.num_classes;
  return j;
}

inline std::string serialize(const Topology& t) { return to_json(t).dump(); }

namespace detail {

template <class Json>
const Json& require(const Json& j, const char* key, const std::string& section) {
  if (!j.is_object() || !j.contains(key)) throw ParseError(section, std::string("missing field '") + key + "'");
  return j.at(key);
}

template <class T, class Json>
T read_field(const Json& j, const char* key, const std::string& section) {
  try {
    return require(j, key, section).template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(section, std::string("field '") + key + "': " + e.what());
  }
}

inline constexpr const char* kTopologySections[] = {"version", "seed",   "config",      "input_modules",
                                                    "experts", "output_slots", "num_classes"};

}  // namespace detail

inline TopologyConfig topology_config_from_json(const nlohmann::json& j, const std::string& section = "config") {
  TopologyConfig c;
  c.input_dim = detail::read_field<std::uint32_t>(j, "input_dim", section);
  c.layers = detail::read_field<std::uint32_t>(j, "layers", section);
  c.experts_per_layer = detail::read_field<std::uint32_t>(j, "experts_per_layer", section);
  c.neurons_per_expert = detail::read_field<std::uint32_t>(j, "neurons_per_expert", section);
  c.p = detail::read_field<double>(j, "p", section);
  c.num_classes = detail::read_field<std::uint32_t>(j, "num_classes", section);
  c.sparsity = detail::read_field<double>(j, "sparsity", section);
  c.input_modules = detail::read_field<std::uint32_t>(j, "input_modules", section);
  c.module_size_step = detail::read_field<std::uint32_t>(j, "module_size_step", section);
  return c;
}

inline Topology topology_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("topology", "document is not a JSON object");
  for (const char* key : detail::kTopologySections) {
    if (!j.contains(key)) throw ParseError(key, "missing section");
  }
  const int version = detail::read_field<int>(j, "version", "version");
  if (version != Topology::kVersion) {
    throw ParseError("version", "unsupported topology version " + std::to_string(version) + " (this build reads " +
                                    std::to_string(Topology::kVersion) + ")");
  }
  auto read_targets = [](const nlohmann::json& arr, const std::string& section) {
    std::vector<Target> out;
    if (!arr.is_array()) throw ParseError(section, "targets must be an array");
    for (const auto& tj : arr) {
      if (!tj.is_array() || tj.size() != 3) throw ParseError(section, "target must be [dest_kind, dest_id, slot]");
      const int kind = tj[0].get<int>();
      if (kind != 0 && kind != 1) throw ParseError(section, "unknown dest_kind " + std::to_string(kind));
      out.push_back({static_cast<TargetKind>(kind), tj[1].get<std::uint32_t>(), tj[2].get<std::uint32_t>()});
    }
    return out;
  };

  Topology t;
  try {
    t.seed = j.at("seed").get<std::uint64_t>();
    t.config = topology_config_from_json(j.at("config"));
    for (const auto& mj : j.at("input_modules")) {
      InputModule m;
      m.neuron_count = detail::read_field<std::uint32_t>(mj, "neuron_count", "input_modules");
      for (const auto& nz : detail::require(mj, "nonzeros", "input_modules")) {
        m.nonzeros.push_back({nz.at(0).get<std::uint32_t>(), nz.at(1).get<std::uint32_t>()});
      }
      m.targets = read_targets(detail::require(mj, "targets", "input_modules"), "input_modules");
      t.input_modules.push_back(std::move(m));
    }
    for (const auto& ej : j.at("experts")) {
      Expert e;
      e.layer = detail::read_field<std::uint32_t>(ej, "layer", "experts");
      e.fan_in = detail::read_field<std::uint32_t>(ej, "fan_in", "experts");
      e.dead = detail::read_field<bool>(ej, "dead", "experts");
      e.gate_targets = read_targets(detail::require(ej, "gate_targets", "experts"), "experts");
      t.experts.push_back(std::move(e));
    }
    t.output_slots = j.at("output_slots").get<std::uint32_t>();
    t.num_classes = j.at("num_classes").get<std::uint32_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("topology", e.what());
  }
  auto violations = validate(t);
  if (!violations.empty()) throw ParseError("topology", "invalid topology: " + violations.front().message);
  return t;
}

/// Parses a serialized topology. A truncated document is reported against the
/// last section whose key made it into the text.
inline Topology deserialize(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    // Config repeats some section names, so take the key that occurs last.
    std::string section = detail::kTopologySections[0];
    bool any = false;
    std::size_t latest = 0;
    for (const char* key : detail::kTopologySections) {
      const auto pos = text.rfind(std::string("\"") + key + "\"");
      if (pos != std::string_view::npos && (!any || pos > latest)) {
        section = key;
        latest = pos;
        any = true;
      }
    }
    throw ParseError(section, std::string(any ? "truncated or malformed section" : "no sections found") + " (" +
                                  e.what() + ")");
  }
  return topology_from_json(j);
}

/// FNV-1a 64-bit hash of the canonical serialization.
inline std::uint64_t topology_hash(const Topology& t) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : serialize(t)) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace raymoe
