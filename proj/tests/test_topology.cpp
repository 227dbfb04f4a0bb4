#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "raymoe/topology.hpp"
#include "stats_support.hpp"

using namespace raymoe;

namespace {

TopologyConfig default_config(std::uint32_t input_dim = 784) {
  TopologyConfig c;
  c.input_dim = input_dim;
  return c;
}

bool has_kind(const std::vector<Violation>& v, ViolationKind k) {
  return std::any_of(v.begin(), v.end(), [&](const Violation& x) { return x.kind == k; });
}

}  // namespace

TEST(Topology, DefaultInputModulesHave105Neurons) {
  const Topology t = build_topology(default_config(), 1);
  ASSERT_EQ(t.input_modules.size(), 6u);
  for (std::uint32_t j = 0; j < 6; ++j) EXPECT_EQ(t.input_modules[j].neuron_count, 5 * (j + 1));
  EXPECT_EQ(t.input_neuron_count(), 105u);
  EXPECT_EQ(t.experts.size(), 64u);
}

TEST(Topology, SparsePatternCountsAndRows) {
  const Topology t = build_topology(default_config(), 2);
  for (const auto& m : t.input_modules) {
    // round(0.01 * N * 784) always exceeds N here, so the count is exact.
    EXPECT_EQ(m.nonzeros.size(), static_cast<std::size_t>(std::llround(0.01 * m.neuron_count * 784)));
    std::set<std::uint32_t> rows;
    for (const auto& nz : m.nonzeros) rows.insert(nz.row);
    EXPECT_EQ(rows.size(), m.neuron_count);
    EXPECT_TRUE(std::is_sorted(m.nonzeros.begin(), m.nonzeros.end()));
    EXPECT_EQ(std::adjacent_find(m.nonzeros.begin(), m.nonzeros.end()), m.nonzeros.end());
  }
}

TEST(Topology, SparseFloorIsOnePerRow) {
  TopologyConfig c = default_config(3);
  const Topology t = build_topology(c, 3);
  for (const auto& m : t.input_modules) EXPECT_EQ(m.nonzeros.size(), m.neuron_count);
}

TEST(Topology, SameSeedIsByteIdentical) {
  EXPECT_EQ(serialize(build_topology(default_config(), 42)), serialize(build_topology(default_config(), 42)));
  EXPECT_NE(serialize(build_topology(default_config(), 42)), serialize(build_topology(default_config(), 43)));
}

TEST(Topology, LastLayerRoutesToOutputAndOutputFanInIsLarge) {
  const Topology t = build_topology(default_config(), 5);
  std::size_t from_last = 0;
  for (const auto& e : t.experts) {
    if (e.layer != 4) continue;
    for (const auto& g : e.gate_targets) {
      EXPECT_EQ(g.kind, TargetKind::output);
      ++from_last;
    }
  }
  const auto st = reachability_stats(t);
  EXPECT_EQ(from_last, 16u * (16u - st.per_layer_fan_in_histogram[3][0]));
  EXPECT_GE(st.output_fan_in, from_last);
  EXPECT_EQ(st.output_fan_in, t.output_slots);
}

TEST(Topology, DeadExpertsHaveNoGatesAndAreLegal) {
  TopologyConfig c = default_config(20);
  c.input_modules = 1;
  c.module_size_step = 2;
  c.neurons_per_expert = 2;
  const Topology t = build_topology(c, 7);
  ASSERT_GT(reachability_stats(t).dead_block_count, 0u);
  for (const auto& e : t.experts) {
    EXPECT_EQ(e.dead, e.fan_in == 0);
    if (e.dead) {
      EXPECT_TRUE(e.gate_targets.empty());
    }
  }
  EXPECT_TRUE(validate(t).empty());
}

TEST(Topology, CorruptedBackwardEdgeGivesOneAcyclicityViolation) {
  Topology t = build_topology(default_config(), 11);
  // Swap a layer-1 gate (-> layer 2 expert Y) with one of Y's own gates: Y
  // then feeds itself while every slot keeps exactly one source.
  bool done = false;
  for (std::size_t a = 0; a < 16 && !done; ++a) {
    auto& ga = t.experts[a].gate_targets;
    for (auto& ta : ga) {
      if (ta.kind != TargetKind::expert || t.experts[ta.block].layer != 2) continue;
      auto& gy = t.experts[ta.block].gate_targets;
      std::swap(ta, gy.front());
      done = true;
      break;
    }
  }
  ASSERT_TRUE(done);
  const auto v = validate(t);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].kind, ViolationKind::acyclicity);
}

TEST(Topology, ValidateDetectsOtherCorruptions) {
  const Topology good = build_topology(default_config(), 12);
  {
    Topology t = good;
    t.output_slots += 1;
    EXPECT_TRUE(has_kind(validate(t), ViolationKind::slot_coverage));
  }
  {
    Topology t = good;
    for (auto& e : t.experts) {
      if (e.layer == 4 && !e.dead) {
        e.gate_targets[0] = {TargetKind::expert, 0, 0};
        break;
      }
    }
    EXPECT_TRUE(has_kind(validate(t), ViolationKind::last_layer_routing));
  }
  {
    Topology t = good;
    t.input_modules[0].nonzeros.erase(t.input_modules[0].nonzeros.begin());
    t.input_modules[0].nonzeros.erase(
        std::remove_if(t.input_modules[0].nonzeros.begin(), t.input_modules[0].nonzeros.end(),
                       [](const Nonzero& nz) { return nz.row == 0; }),
        t.input_modules[0].nonzeros.end());
    EXPECT_TRUE(has_kind(validate(t), ViolationKind::sparsity));
  }
  {
    Topology t = good;
    for (auto& e : t.experts) {
      if (!e.dead) {
        e.dead = true;
        break;
      }
    }
    EXPECT_TRUE(has_kind(validate(t), ViolationKind::dead_flag));
  }
}

TEST(Topology, InvalidConfigIsRejected) {
  TopologyConfig c = default_config();
  c.experts_per_layer = 0;
  c.p = 1.5;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("experts_per_layer"), std::string::npos);
    EXPECT_NE(msg.find("p must"), std::string::npos);
  }
  c = default_config();
  c.p = 0.0;
  EXPECT_THROW(build_topology(c, 0), ConfigError);
  c.p = 1.0;
  EXPECT_NO_THROW(build_topology(c, 0));
}

TEST(Topology, NearOneWiringHasFewSkips) {
  TopologyConfig c = default_config(50);
  c.p = 0.999;
  std::size_t skips = 0, total = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Topology t = build_topology(c, s);
    skips += reachability_stats(t).skip_connection_count;
    total += t.input_neuron_count();
    for (const auto& e : t.experts) {
      if (e.layer < 4) total += e.gate_targets.size();
    }
  }
  // Expected 0.001 * total, roughly 15.
  EXPECT_LT(static_cast<double>(skips), 0.004 * static_cast<double>(total));
}

TEST(Topology, MinimalTwoLayerHistogramMatchesDirectCount) {
  TopologyConfig c;
  c.input_dim = 4;
  c.layers = 2;
  c.experts_per_layer = 3;
  c.neurons_per_expert = 2;
  c.input_modules = 2;
  c.module_size_step = 2;
  c.sparsity = 0.5;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Topology t = build_topology(c, seed);
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> incoming;
    for (const auto& m : t.input_modules)
      for (const auto& tg : m.targets)
        if (tg.kind == TargetKind::expert) incoming[{tg.block, 0}]++;
    for (const auto& e : t.experts)
      for (const auto& tg : e.gate_targets)
        if (tg.kind == TargetKind::expert) incoming[{tg.block, 0}]++;
    std::vector<std::vector<std::size_t>> expected(2);
    for (std::uint32_t id = 0; id < 6; ++id) {
      const std::size_t f = incoming.count({id, 0}) ? incoming[{id, 0}] : 0;
      auto& h = expected[id / 3];
      if (h.size() <= f) h.resize(f + 1, 0);
      ++h[f];
    }
    EXPECT_EQ(reachability_stats(t).per_layer_fan_in_histogram, expected) << "seed " << seed;
  }
}

// Property: any seed and a range of configs give a valid topology.
TEST(TopologyProperty, BuiltTopologiesValidate) {
  Rng rng(99);
  for (int trial = 0; trial < 150; ++trial) {
    TopologyConfig c;
    c.input_dim = 1 + static_cast<std::uint32_t>(rng.uniform_index(60));
    c.layers = 2 + static_cast<std::uint32_t>(rng.uniform_index(4));
    c.experts_per_layer = 1 + static_cast<std::uint32_t>(rng.uniform_index(6));
    c.neurons_per_expert = 1 + static_cast<std::uint32_t>(rng.uniform_index(6));
    c.p = 0.05 + 0.95 * rng.uniform01();
    c.sparsity = 0.01 + 0.5 * rng.uniform01();
    c.input_modules = 1 + static_cast<std::uint32_t>(rng.uniform_index(4));
    c.module_size_step = 1 + static_cast<std::uint32_t>(rng.uniform_index(5));
    const Topology t = build_topology(c, rng.next());
    const auto v = validate(t);
    EXPECT_TRUE(v.empty()) << "trial " << trial << ": " << (v.empty() ? "" : v.front().message);
    // Every live expert has at least one slot; each slot one source (validated above).
    for (const auto& e : t.experts) EXPECT_EQ(e.dead, e.fan_in == 0);
  }
}

TEST(TopologyProperty, SerializationRoundTrips) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    TopologyConfig c = default_config(1 + static_cast<std::uint32_t>(rng.uniform_index(100)));
    c.layers = 2 + static_cast<std::uint32_t>(rng.uniform_index(3));
    c.experts_per_layer = 1 + static_cast<std::uint32_t>(rng.uniform_index(5));
    c.neurons_per_expert = 1 + static_cast<std::uint32_t>(rng.uniform_index(5));
    const Topology t = build_topology(c, rng.next());
    const std::string s = serialize(t);
    const Topology back = deserialize(s);
    EXPECT_EQ(back, t);
    EXPECT_EQ(serialize(back), s);
    EXPECT_EQ(topology_hash(back), topology_hash(t));
  }
}

TEST(TopologyProperty, DestinationFrequenciesMatchWiringRule) {
  const TopologyConfig c = default_config(10);
  const auto dc = test::count_destinations(c, 1000, 100000);
  const double p = c.p;
  const std::uint32_t L = c.layers;
  // Inputs: layer 1 w.p. p, each of 2..L w.p. (1-p)/(L-1).
  {
    std::vector<double> obs(dc.counts[0].begin() + 1, dc.counts[0].begin() + L + 1);
    std::vector<double> probs{p};
    for (std::uint32_t l = 2; l <= L; ++l) probs.push_back((1 - p) / (L - 1));
    EXPECT_EQ(dc.counts[0][L + 1], 0.0);
    EXPECT_GT(test::chi_square_p(obs, probs), 0.01);
  }
  // Gates of layer l < L: l+1 w.p. p, each of {l+2..L, out} w.p. (1-p)/(L-l).
  for (std::uint32_t l = 1; l < L; ++l) {
    std::vector<double> obs(dc.counts[l].begin() + l + 1, dc.counts[l].end());
    std::vector<double> probs{p};
    for (std::uint32_t d = l + 2; d <= L + 1; ++d) probs.push_back((1 - p) / (L - l));
    for (std::uint32_t d = 0; d <= l; ++d) EXPECT_EQ(dc.counts[l][d], 0.0);
    EXPECT_GT(test::chi_square_p(obs, probs), 0.01) << "source layer " << l;
  }
}

TEST(TopologySerialization, TruncatedFileNamesSection) {
  const std::string s = serialize(build_topology(default_config(), 3));
  const auto experts_at = s.find("\"experts\"");
  ASSERT_NE(experts_at, std::string::npos);
  try {
    deserialize(s.substr(0, experts_at + 40));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.section(), "experts");
  }
  const auto modules_at = s.rfind("\"input_modules\"");
  try {
    deserialize(s.substr(0, modules_at + 30));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.section(), "input_modules");
  }
  auto j = nlohmann::json::parse(s);
  j.erase("output_slots");
  try {
    deserialize(j.dump());
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.section(), "output_slots");
  }
}

TEST(TopologySerialization, FutureVersionIsUnsupported) {
  auto j = nlohmann::json::parse(serialize(build_topology(default_config(), 3)));
  j["version"] = 2;
  try {
    deserialize(j.dump());
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.section(), "version");
    EXPECT_NE(std::string(e.what()).find("unsupported"), std::string::npos);
  }
}

TEST(TopologySerialization, FieldOrderIsFixed) {
  const std::string s = serialize(build_topology(default_config(8), 3));
  std::size_t last = 0;
  for (const char* key : {"\"version\"", "\"seed\"", "\"config\"", "\"input_modules\":[", "\"experts\"",
                          "\"output_slots\"", "\"num_classes\":10}"}) {
    const auto pos = s.find(key, last);
    ASSERT_NE(pos, std::string::npos) << key;
    last = pos;
  }
}
