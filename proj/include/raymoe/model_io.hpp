#pragma once

// Versioned JSON model files.
//
//   {"format": "raymoe-model", "version": 1, "topology_hash": "<16 hex>",
//    "relaxation": {...}, "topology": {...}, "parameters": [...]}
//
// Parameters are listed in ParameterLayout order. Doubles are written in
// shortest round-trip form, so save -> load is exact.

#include <cstdio>
#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "raymoe/baseline.hpp"
#include "raymoe/errors.hpp"
#include "raymoe/metrics.hpp"
#include "raymoe/network.hpp"
#include "raymoe/topology.hpp"

namespace raymoe {

inline constexpr int kModelFileVersion = 1;

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline nlohmann::ordered_json to_json(const RelaxationConfig& r) {
  nlohmann::ordered_json j;
  j["theta0"] = r.theta0;
  j["decay"] = r.decay;
  j["theta_out"] = r.theta_out;
  j["t_max"] = r.t_max;
  return j;
}

inline RelaxationConfig relaxation_from_json(const nlohmann::json& j, const std::string& section = "relaxation") {
  RelaxationConfig r;
  try {
    r.theta0 = j.at("theta0").get<double>();
    r.decay = j.at("decay").get<double>();
    r.theta_out = j.at("theta_out").get<double>();
    r.t_max = j.at("t_max").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(section, e.what());
  }
  try {
    r.validate();
  } catch (const ConfigError& e) {
    throw ParseError(section, e.what());
  }
  return r;
}

inline std::string serialize_model(const Model& m) {
  nlohmann::ordered_json j;
  j["format"] = "raymoe-model";
  j["version"] = kModelFileVersion;
  j["topology_hash"] = hash_hex(topology_hash(*m.topology));
  j["relaxation"] = to_json(m.relaxation);
  j["topology"] = to_json(*m.topology);
  j["parameters"] = m.params;
  return j.dump() + "\n";
}

namespace detail {

inline nlohmann::json parse_versioned(std::string_view text, std::string_view format) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("document", e.what());
  }
  if (!j.is_object()) throw ParseError("document", "expected a JSON object");
  if (!j.contains("format") || j["format"] != format) {
    throw ParseError("format", "expected \"" + std::string(format) + "\"");
  }
  if (!j.contains("version") || !j["version"].is_number_integer()) throw ParseError("version", "missing");
  if (j["version"].get<int>() != kModelFileVersion) {
    throw ParseError("version", "unsupported version " + j["version"].dump());
  }
  return j;
}

inline std::vector<double> parse_parameters(const nlohmann::json& j, std::size_t expected) {
  if (!j.contains("parameters") || !j["parameters"].is_array()) throw ParseError("parameters", "missing");
  std::vector<double> p;
  try {
    p = j["parameters"].get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("parameters", e.what());
  }
  if (p.size() != expected) {
    throw ParseError("parameters",
                     "expected " + std::to_string(expected) + " values, found " + std::to_string(p.size()));
  }
  return p;
}

}  // namespace detail

inline Model deserialize_model(std::string_view text) {
  const auto j = detail::parse_versioned(text, "raymoe-model");
  if (!j.contains("topology")) throw ParseError("topology", "missing");
  auto topo = std::make_shared<const Topology>(topology_from_json(j["topology"]));
  if (!j.contains("topology_hash") || !j["topology_hash"].is_string()) throw ParseError("topology_hash", "missing");
  const std::string expected = hash_hex(topology_hash(*topo));
  if (j["topology_hash"].get<std::string>() != expected) {
    throw ParseError("topology_hash",
                     "mismatch: file says " + j["topology_hash"].get<std::string>() + ", topology hashes to " + expected);
  }
  if (!j.contains("relaxation")) throw ParseError("relaxation", "missing");
  Model m;
  m.relaxation = relaxation_from_json(j["relaxation"]);
  m.layout = ParameterLayout::of(*topo);
  m.params = detail::parse_parameters(j, m.layout.total);
  m.topology = std::move(topo);
  return m;
}

inline void save_model(const Model& m, const std::filesystem::path& path) {
  detail::write_text(path, serialize_model(m));
}

inline Model load_model(const std::filesystem::path& path) {
  try {
    return deserialize_model(detail::read_text(path));
  } catch (const ParseError& e) {
    throw ParseError(e.section(), path.string() + ": " + e.what());
  }
}

// Baseline -------------------------------------------------------------------

inline std::string serialize_baseline(const MlpBaseline& net) {
  nlohmann::ordered_json j;
  j["format"] = "raymoe-baseline";
  j["version"] = kModelFileVersion;
  j["sizes"] = net.sizes;
  j["parameters"] = net.params;
  return j.dump() + "\n";
}

inline MlpBaseline deserialize_baseline(std::string_view text) {
  const auto j = detail::parse_versioned(text, "raymoe-baseline");
  MlpBaseline net;
  try {
    net.sizes = j.at("sizes").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("sizes", e.what());
  }
  if (net.sizes.size() < 2) throw ParseError("sizes", "need at least input and output sizes");
  std::size_t expected = 0;
  for (std::size_t l = 0; l + 1 < net.sizes.size(); ++l) expected += net.sizes[l + 1] * net.sizes[l] + net.sizes[l + 1];
  net.params = detail::parse_parameters(j, expected);
  return net;
}

inline void save_baseline(const MlpBaseline& net, const std::filesystem::path& path) {
  detail::write_text(path, serialize_baseline(net));
}

inline MlpBaseline load_baseline(const std::filesystem::path& path) {
  try {
    return deserialize_baseline(detail::read_text(path));
  } catch (const ParseError& e) {
    throw ParseError(e.section(), path.string() + ": " + e.what());
  }
}

}  // namespace raymoe
