#pragma once

// Run configuration: one JSON document, validated exhaustively, with dotted
// `--set` overrides. Every field has a default, so "{}" is a valid config
// (MNIST with the standard architecture and schedule).

#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "raymoe/baseline.hpp"
#include "raymoe/data.hpp"
#include "raymoe/errors.hpp"
#include "raymoe/metrics.hpp"
#include "raymoe/model_io.hpp"
#include "raymoe/network.hpp"
#include "raymoe/topology.hpp"
#include "raymoe/training.hpp"

namespace raymoe {

struct DatasetConfig {
  std::string name = "mnist";
  /// idx | cifar10 | usps | rtft; empty picks the default for `name`.
  std::string format;
  /// Role -> files. Roles: idx {train_images, train_labels, test_images,
  /// test_labels}; cifar10/usps/rtft {train, test}.
  std::map<std::string, std::vector<std::string>> paths;
  /// Empty -> 0.3 for usps, 0.2 otherwise.
  std::optional<double> val_fraction;
  /// Keep this many training samples before the train/val split; 0 keeps all.
  std::size_t train_subset = 0;
  std::uint64_t split_seed = 0;
};

struct RunConfig {
  DatasetConfig dataset;
  TopologyConfig topology;
  RelaxationConfig relaxation;
  TrainConfig train;
  std::size_t baseline_depth = 4;
  std::string output_dir = "runs";
  std::size_t repetitions = 5;
  /// Empty -> 1..repetitions. Otherwise the first `repetitions` entries.
  std::vector<std::uint64_t> seeds;
  std::size_t threads = 1;

  std::vector<std::uint64_t> repetition_seeds() const {
    if (seeds.empty()) {
      std::vector<std::uint64_t> s;
      for (std::size_t k = 1; k <= repetitions; ++k) s.push_back(k);
      return s;
    }
    return {seeds.begin(), seeds.begin() + static_cast<std::ptrdiff_t>(repetitions)};
  }
};

// Per-repetition seed streams.
inline std::uint64_t topology_seed(std::uint64_t rep_seed) { return derive_seed(rep_seed, 1); }
inline std::uint64_t init_seed(std::uint64_t rep_seed) { return derive_seed(rep_seed, 2); }
inline std::uint64_t train_seed(std::uint64_t rep_seed) { return derive_seed(rep_seed, 3); }
inline std::uint64_t baseline_init_seed(std::uint64_t rep_seed) { return derive_seed(rep_seed, 4); }

namespace detail {

inline const std::map<std::string, std::string>& default_formats() {
  static const std::map<std::string, std::string> m{
      {"mnist", "idx"}, {"fashion-mnist", "idx"}, {"cifar10", "cifar10"}, {"usps", "usps"}};
  return m;
}

inline std::map<std::string, std::vector<std::string>> default_paths(const std::string& name) {
  if (name == "mnist" || name == "fashion-mnist") {
    return {{"train_images", {name + "/train-images-idx3-ubyte"}},
            {"train_labels", {name + "/train-labels-idx1-ubyte"}},
            {"test_images", {name + "/t10k-images-idx3-ubyte"}},
            {"test_labels", {name + "/t10k-labels-idx1-ubyte"}}};
  }
  if (name == "cifar10") {
    std::vector<std::string> train;
    for (int k = 1; k <= 5; ++k) train.push_back("cifar-10-batches-bin/data_batch_" + std::to_string(k) + ".bin");
    return {{"train", train}, {"test", {"cifar-10-batches-bin/test_batch.bin"}}};
  }
  if (name == "usps") return {{"train", {"usps/zip.train"}}, {"test", {"usps/zip.test"}}};
  return {};
}

inline std::vector<std::string> roles_for(const std::string& format) {
  if (format == "idx") return {"train_images", "train_labels", "test_images", "test_labels"};
  return {"train", "test"};
}

/// Collects every problem instead of stopping at the first.
class ConfigReader {
 public:
  std::vector<std::string> errors;

  bool object(const nlohmann::json& j, const std::string& path) {
    if (j.is_object()) return true;
    errors.push_back(path + ": expected an object");
    return false;
  }

  void allow_only(const nlohmann::json& j, const std::string& path, std::initializer_list<std::string_view> keys) {
    for (const auto& [k, v] : j.items()) {
      bool ok = false;
      for (auto a : keys) ok = ok || a == k;
      if (!ok) errors.push_back(join(path, k) + ": unknown key");
    }
  }

  template <class T>
  void read(const nlohmann::json& j, const std::string& path, const char* key, T& out) {
    if (!j.contains(key)) return;
    const auto& v = j[key];
    const std::string where = join(path, key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) return fail(where, "expected true or false");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        return fail(where, "expected a non-negative integer");
      }
      const auto u = v.get<std::uint64_t>();
      if (u > std::numeric_limits<T>::max()) return fail(where, "value too large");
      out = static_cast<T>(u);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) return fail(where, "expected a number");
      out = v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) return fail(where, "expected a string");
      out = v.get<std::string>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported field type");
    }
  }

  void fail(const std::string& where, const std::string& what) { errors.push_back(where + ": " + what); }

  /// Runs a section validator and files its lines under `path`.
  template <class F>
  void validated(const std::string& path, F&& f) {
    try {
      f();
    } catch (const ConfigError& e) {
      // First line is the section title; the rest are individual problems.
      std::istringstream ss(e.what());
      std::string line;
      bool first = true, any = false;
      while (std::getline(ss, line)) {
        if (std::exchange(first, false)) continue;
        line.erase(0, line.find_first_not_of(' '));
        errors.push_back(path + ": " + line);
        any = true;
      }
      if (!any) errors.push_back(path + ": " + e.what());
    }
  }

  static std::string join(const std::string& path, std::string_view key) {
    return path.empty() ? std::string(key) : path + "." + std::string(key);
  }
};

}  // namespace detail

/// Parses a config document. Throws ConfigError listing every problem.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::ConfigReader r;
  RunConfig c;
  if (!r.object(j, "config")) throw ConfigError("invalid config:\n  " + r.errors.front());
  r.allow_only(j, "", {"dataset", "topology", "relaxation", "train", "baseline", "output_dir", "repetitions", "seeds",
                       "threads"});

  if (j.contains("dataset") && r.object(j["dataset"], "dataset")) {
    const auto& d = j["dataset"];
    r.allow_only(d, "dataset", {"name", "format", "paths", "val_fraction", "train_subset", "split_seed"});
    r.read(d, "dataset", "name", c.dataset.name);
    r.read(d, "dataset", "format", c.dataset.format);
    if (d.contains("val_fraction")) {
      double v = 0.0;
      r.read(d, "dataset", "val_fraction", v);
      c.dataset.val_fraction = v;
    }
    r.read(d, "dataset", "train_subset", c.dataset.train_subset);
    r.read(d, "dataset", "split_seed", c.dataset.split_seed);
    if (d.contains("paths") && r.object(d["paths"], "dataset.paths")) {
      for (const auto& [role, v] : d["paths"].items()) {
        const std::string where = "dataset.paths." + role;
        if (v.is_string()) {
          c.dataset.paths[role] = {v.get<std::string>()};
        } else if (v.is_array() && !v.empty() && std::all_of(v.begin(), v.end(), [](auto& e) { return e.is_string(); })) {
          c.dataset.paths[role] = v.get<std::vector<std::string>>();
        } else {
          r.fail(where, "expected a path or a non-empty list of paths");
        }
      }
    }
  }

  if (c.dataset.format.empty()) {
    const auto& f = detail::default_formats();
    if (auto it = f.find(c.dataset.name); it != f.end()) {
      c.dataset.format = it->second;
    } else {
      r.fail("dataset.format", "required for dataset '" + c.dataset.name + "' (idx, cifar10, usps, rtft)");
    }
  }
  if (!c.dataset.format.empty()) {
    const auto& fmt = c.dataset.format;
    if (fmt != "idx" && fmt != "cifar10" && fmt != "usps" && fmt != "rtft") {
      r.fail("dataset.format", "unknown format '" + fmt + "' (idx, cifar10, usps, rtft)");
    } else {
      const auto roles = detail::roles_for(fmt);
      for (const auto& [role, v] : c.dataset.paths) {
        if (std::find(roles.begin(), roles.end(), role) == roles.end()) {
          r.fail("dataset.paths." + role, "unknown role for format " + fmt);
        }
      }
      const auto defaults = detail::default_paths(c.dataset.name);
      for (const auto& role : roles) {
        if (c.dataset.paths.count(role)) continue;
        if (auto it = defaults.find(role); it != defaults.end() && detail::default_formats().at(c.dataset.name) == fmt) {
          c.dataset.paths[role] = it->second;
        } else {
          r.fail("dataset.paths." + role, "required");
        }
      }
      if ((fmt == "idx" || fmt == "usps" || fmt == "rtft")) {
        for (const auto& role : roles) {
          auto it = c.dataset.paths.find(role);
          if (it != c.dataset.paths.end() && it->second.size() != 1) r.fail("dataset.paths." + role, "expected one path");
        }
      }
    }
  }
  if (!c.dataset.val_fraction) c.dataset.val_fraction = c.dataset.name == "usps" ? 0.3 : 0.2;
  if (!(*c.dataset.val_fraction > 0.0 && *c.dataset.val_fraction < 1.0)) {
    r.fail("dataset.val_fraction", "must lie in (0, 1)");
  }

  if (j.contains("topology") && r.object(j["topology"], "topology")) {
    const auto& t = j["topology"];
    r.allow_only(t, "topology", {"input_dim", "layers", "experts_per_layer", "neurons_per_expert", "p", "num_classes",
                                 "sparsity", "input_modules", "module_size_step"});
    r.read(t, "topology", "input_dim", c.topology.input_dim);
    r.read(t, "topology", "layers", c.topology.layers);
    r.read(t, "topology", "experts_per_layer", c.topology.experts_per_layer);
    r.read(t, "topology", "neurons_per_expert", c.topology.neurons_per_expert);
    r.read(t, "topology", "p", c.topology.p);
    r.read(t, "topology", "num_classes", c.topology.num_classes);
    r.read(t, "topology", "sparsity", c.topology.sparsity);
    r.read(t, "topology", "input_modules", c.topology.input_modules);
    r.read(t, "topology", "module_size_step", c.topology.module_size_step);
  }
  r.validated("topology", [&] {
    // input_dim may be left at 0 and filled from the dataset.
    TopologyConfig probe = c.topology;
    if (probe.input_dim == 0) probe.input_dim = 1;
    probe.validate();
  });

  if (j.contains("relaxation") && r.object(j["relaxation"], "relaxation")) {
    const auto& t = j["relaxation"];
    r.allow_only(t, "relaxation", {"theta0", "decay", "theta_out", "t_max"});
    r.read(t, "relaxation", "theta0", c.relaxation.theta0);
    r.read(t, "relaxation", "decay", c.relaxation.decay);
    r.read(t, "relaxation", "theta_out", c.relaxation.theta_out);
    r.read(t, "relaxation", "t_max", c.relaxation.t_max);
  }
  r.validated("relaxation", [&] { c.relaxation.validate(); });

  if (j.contains("train") && r.object(j["train"], "train")) {
    const auto& t = j["train"];
    r.allow_only(t, "train", {"learning_rate", "epochs", "patience", "batch_size", "adam_beta1", "adam_beta2",
                              "adam_eps", "shuffle", "log_wall_time"});
    r.read(t, "train", "learning_rate", c.train.learning_rate);
    r.read(t, "train", "epochs", c.train.epochs);
    r.read(t, "train", "patience", c.train.patience);
    r.read(t, "train", "batch_size", c.train.batch_size);
    r.read(t, "train", "adam_beta1", c.train.adam_beta1);
    r.read(t, "train", "adam_beta2", c.train.adam_beta2);
    r.read(t, "train", "adam_eps", c.train.adam_eps);
    r.read(t, "train", "shuffle", c.train.shuffle);
    r.read(t, "train", "log_wall_time", c.train.log_wall_time);
  }

  if (j.contains("baseline") && r.object(j["baseline"], "baseline")) {
    r.allow_only(j["baseline"], "baseline", {"depth"});
    r.read(j["baseline"], "baseline", "depth", c.baseline_depth);
  }
  if (c.baseline_depth < 1) r.fail("baseline.depth", "must be >= 1");

  r.read(j, "", "output_dir", c.output_dir);
  if (c.output_dir.empty()) r.fail("output_dir", "must not be empty");
  r.read(j, "", "repetitions", c.repetitions);
  if (c.repetitions < 1) r.fail("repetitions", "must be >= 1");
  if (j.contains("seeds")) {
    const auto& s = j["seeds"];
    if (!s.is_array()) {
      r.fail("seeds", "expected a list of non-negative integers");
    } else {
      for (const auto& v : s) {
        if (!v.is_number_unsigned()) {
          r.fail("seeds", "expected a list of non-negative integers");
          break;
        }
        c.seeds.push_back(v.get<std::uint64_t>());
      }
      if (!c.seeds.empty() && c.seeds.size() < c.repetitions) {
        r.fail("seeds", "lists " + std::to_string(c.seeds.size()) + " seeds but repetitions is " +
                            std::to_string(c.repetitions));
      }
    }
  }
  r.read(j, "", "threads", c.threads);
  if (c.threads < 1) r.fail("threads", "must be >= 1");
  c.train.threads = c.threads;
  r.validated("train", [&] { c.train.validate(); });

  if (!r.errors.empty()) {
    std::string msg = "invalid config (" + std::to_string(r.errors.size()) + " problem" +
                      (r.errors.size() == 1 ? "" : "s") + "):";
    for (const auto& e : r.errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return c;
}

/// The fully resolved config, defaults applied. Parsing it yields the same RunConfig.
inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json paths = nlohmann::ordered_json::object();
  for (const auto& [role, v] : c.dataset.paths) {
    if (v.size() == 1) {
      paths[role] = v.front();
    } else {
      paths[role] = v;
    }
  }
  j["dataset"] = {{"name", c.dataset.name},
                  {"format", c.dataset.format},
                  {"paths", paths},
                  {"val_fraction", c.dataset.val_fraction.value_or(0.2)},
                  {"train_subset", c.dataset.train_subset},
                  {"split_seed", c.dataset.split_seed}};
  j["topology"] = to_json(c.topology);
  j["relaxation"] = to_json(c.relaxation);
  j["train"] = {{"learning_rate", c.train.learning_rate}, {"epochs", c.train.epochs},
                {"patience", c.train.patience},           {"batch_size", c.train.batch_size},
                {"adam_beta1", c.train.adam_beta1},       {"adam_beta2", c.train.adam_beta2},
                {"adam_eps", c.train.adam_eps},           {"shuffle", c.train.shuffle},
                {"log_wall_time", c.train.log_wall_time}};
  j["baseline"] = {{"depth", c.baseline_depth}};
  j["output_dir"] = c.output_dir;
  j["repetitions"] = c.repetitions;
  j["seeds"] = c.repetition_seeds();
  j["threads"] = c.threads;
  return j;
}

/// Applies "a.b.c=value". The value is parsed as JSON when possible and
/// taken as a string otherwise.
inline void apply_override(nlohmann::json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("--set expects key.path=value, got '" + std::string(assignment) + "'");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("--set: empty path component in '" + key + "'");
    if (!node->is_object()) throw ConfigError("--set: '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = nlohmann::json::object();
    start = dot + 1;
  }
}

inline nlohmann::json read_config_document(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  nlohmann::json j = path.empty() ? nlohmann::json::object() : read_config_document(path);
  for (const auto& o : overrides) apply_override(j, o);
  return run_config_from_json(j);
}

// Dataset assembly -------------------------------------------------------------

/// Relative paths resolve against RAYMOE_DATA_DIR when it is set.
inline std::filesystem::path resolve_data_path(const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv("RAYMOE_DATA_DIR"); root && *root) return std::filesystem::path(root) / path;
  return path;
}

/// Loads train and test files, applies train_subset, and splits train/val.
inline Dataset load_dataset(const DatasetConfig& dc) {
  auto files = [&](const std::string& role) {
    std::vector<std::filesystem::path> out;
    for (const auto& p : dc.paths.at(role)) {
      auto path = resolve_data_path(p);
      if (!std::filesystem::exists(path)) throw DataError("dataset file not found: " + path.string());
      out.push_back(std::move(path));
    }
    return out;
  };
  Dataset train, test;
  if (dc.format == "idx") {
    train = load_idx(files("train_images")[0], files("train_labels")[0]);
    test = load_idx(files("test_images")[0], files("test_labels")[0]);
  } else if (dc.format == "cifar10") {
    const auto tr = files("train");
    const auto te = files("test");
    train = load_cifar10(tr);
    test = load_cifar10(te);
  } else if (dc.format == "usps") {
    train = load_usps(files("train")[0]);
    test = load_usps(files("test")[0]);
  } else if (dc.format == "rtft") {
    train = load_features(files("train")[0]);
    test = load_features(files("test")[0]);
  } else {
    throw ConfigError("unknown dataset format '" + dc.format + "'");
  }
  Dataset ds = combine_train_test(std::move(train), test, dc.name);
  ds = subsample_train(std::move(ds), dc.train_subset, derive_seed(dc.split_seed, 1));
  return split(std::move(ds), dc.val_fraction.value_or(0.2), derive_seed(dc.split_seed, 2));
}

/// Topology config with input_dim and num_classes checked against `ds`.
inline TopologyConfig topology_for(const RunConfig& c, const Dataset& ds) {
  TopologyConfig t = c.topology;
  if (t.input_dim == 0) t.input_dim = static_cast<std::uint32_t>(ds.dim);
  if (t.input_dim != ds.dim) {
    throw ConfigError("topology.input_dim is " + std::to_string(t.input_dim) + " but the dataset has " +
                      std::to_string(ds.dim) + " features");
  }
  if (t.num_classes < ds.num_classes) {
    throw ConfigError("topology.num_classes is " + std::to_string(t.num_classes) + " but the dataset has labels up to " +
                      std::to_string(ds.num_classes - 1));
  }
  return t;
}

}  // namespace raymoe
