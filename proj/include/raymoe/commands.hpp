#pragma once

// Subcommand implementations behind tools/raymoe.cpp. Each command logs to
// `log` and throws ConfigError / DataError / NumericalError on failure; see
// exit_code() for the mapping.
//
// Layout under output_dir:
//   config.resolved.json
//   rep_<k>/model.json, rep_<k>/training_log.jsonl
//   rep_<k>/baseline.json, rep_<k>/baseline_log.jsonl
//   report/          eval output (report.json, per_sample.csv, scatter.csv, extremes.json)
//   baseline_report/ the same for the baseline; its scatter row also goes to report/scatter.csv

#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "raymoe/baseline.hpp"
#include "raymoe/data.hpp"
#include "raymoe/errors.hpp"
#include "raymoe/gradcheck.hpp"
#include "raymoe/metrics.hpp"
#include "raymoe/model_io.hpp"
#include "raymoe/network.hpp"
#include "raymoe/run_config.hpp"
#include "raymoe/topology.hpp"
#include "raymoe/training.hpp"

namespace raymoe::cli {

inline int exit_code(const std::exception& e) noexcept {
  if (dynamic_cast<const NumericalError*>(&e)) return 3;
  if (dynamic_cast<const DataError*>(&e)) return 2;
  return 1;
}

namespace fs = std::filesystem;

inline fs::path rep_dir(const RunConfig& c, std::size_t k) { return fs::path(c.output_dir) / ("rep_" + std::to_string(k)); }

inline void write_resolved_config(const RunConfig& c, const fs::path& dir) {
  detail::ensure_directory(dir);
  detail::write_text(dir / "config.resolved.json", to_json(c).dump(2) + "\n");
}

inline TrainConfig train_config_for(const RunConfig& c, std::uint64_t rep_seed) {
  TrainConfig t = c.train;
  t.seed = train_seed(rep_seed);
  t.threads = c.threads;
  return t;
}

inline std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

inline EpochCallback epoch_logger(std::ostream& log, const std::string& prefix) {
  return [&log, prefix](const EpochRecord& r, std::span<const double>) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s epoch %zu: train_loss %.5f val_acc %.4f val_used %.1f", prefix.c_str(),
                  r.epoch, r.train_loss, r.val_accuracy, r.val_mean_used_params);
    log << buf << "\n" << std::flush;
  };
}

inline void write_log(const TrainingLog& tl, const fs::path& path) { detail::write_text(path, to_json_lines(tl)); }

// train ------------------------------------------------------------------------

inline void cmd_train(const RunConfig& c, std::ostream& log) {
  const Dataset ds = load_dataset(c.dataset);
  const TopologyConfig tc = topology_for(c, ds);
  write_resolved_config(c, c.output_dir);
  log << "dataset " << ds.name << ": " << ds.splits.train.size() << " train / " << ds.splits.val.size() << " val / "
      << ds.splits.test.size() << " test, d=" << ds.dim << "\n";
  const auto seeds = c.repetition_seeds();
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    auto topo = std::make_shared<const Topology>(build_topology(tc, topology_seed(seeds[k])));
    Model m = init_params(topo, init_seed(seeds[k]), c.relaxation);
    log << "rep " << k + 1 << " (seed " << seeds[k] << "): " << m.total_parameter_count() << " parameters, "
        << topo->live_expert_count() << " live experts\n";
    const TrainingLog tl = train(m, ds, train_config_for(c, seeds[k]), epoch_logger(log, "rep " + std::to_string(k + 1)));
    const auto dir = rep_dir(c, k + 1);
    detail::ensure_directory(dir);
    save_model(m, dir / "model.json");
    write_log(tl, dir / "training_log.jsonl");
    log << "rep " << k + 1 << ": best epoch " << tl.best_epoch << (tl.stopped_early ? " (early stop)" : "") << ", saved "
        << (dir / "model.json").string() << "\n";
  }
}

// eval -------------------------------------------------------------------------

struct EvalOptions {
  /// Empty -> output_dir/rep_<k>/model.json for every repetition.
  std::vector<fs::path> models;
  std::string split = "test";
  /// Empty -> output_dir/report.
  fs::path out_dir;
  std::size_t k = 12;
};

inline const std::vector<std::size_t>& split_indices(const Dataset& ds, const std::string& split) {
  if (split == "test") return ds.splits.test;
  if (split == "val") return ds.splits.val;
  if (split == "train") return ds.splits.train;
  throw ConfigError("unknown split '" + split + "' (train, val, test)");
}

/// Fails unless `m` was built from the config's topology section.
inline void check_topology_matches(const Model& m, const TopologyConfig& tc, const fs::path& path) {
  const auto expected = topology_hash(build_topology(tc, m.topology->seed));
  const auto actual = topology_hash(*m.topology);
  if (expected != actual) {
    throw ConfigError("topology hash mismatch for " + path.string() + ": model has " + hash_hex(actual) +
                      ", config with seed " + std::to_string(m.topology->seed) + " gives " + hash_hex(expected));
  }
}

inline RunReport cmd_eval(const RunConfig& c, const EvalOptions& opt, std::ostream& log) {
  std::vector<fs::path> paths = opt.models;
  std::vector<std::uint64_t> seeds;
  const bool default_layout = paths.empty();
  if (default_layout) {
    seeds = c.repetition_seeds();
    for (std::size_t k = 1; k <= seeds.size(); ++k) paths.push_back(rep_dir(c, k) / "model.json");
  }
  std::vector<Model> models;
  for (const auto& p : paths) models.push_back(load_model(p));

  const Dataset ds = load_dataset(c.dataset);
  const TopologyConfig tc = topology_for(c, ds);
  const auto& indices = split_indices(ds, opt.split);
  std::vector<RepetitionRun> runs;
  for (std::size_t k = 0; k < models.size(); ++k) {
    check_topology_matches(models[k], tc, paths[k]);
    RepetitionRun run;
    run.seed = default_layout ? seeds[k] : models[k].topology->seed;
    run.eval = evaluate(models[k], ds, indices, c.threads);
    log << paths[k].string() << ": " << opt.split << " accuracy " << percent(run.eval.accuracy) << ", mean used "
        << run.eval.mean_used_params << " / " << run.eval.total_params << "\n";
    runs.push_back(std::move(run));
  }
  RunReport rep = aggregate(runs, ds.name, "raymoe");
  const fs::path out = opt.out_dir.empty() ? fs::path(c.output_dir) / "report" : opt.out_dir;
  emit(rep, out, opt.k);
  write_resolved_config(c, out);
  log << "report: accuracy " << percent(rep.accuracy.mean) << " +- " << percent(rep.accuracy.std)
      << ", parameter reduction " << percent(rep.reduction) << " -> " << out.string() << "\n";
  return rep;
}

// baseline ---------------------------------------------------------------------

inline RunReport cmd_baseline(const RunConfig& c, std::ostream& log) {
  const Dataset ds = load_dataset(c.dataset);
  const TopologyConfig tc = topology_for(c, ds);
  write_resolved_config(c, c.output_dir);
  const auto seeds = c.repetition_seeds();
  std::vector<RepetitionRun> runs;
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    const auto budget = ParameterLayout::of(build_topology(tc, topology_seed(seeds[k]))).total;
    MlpBaseline net = build_baseline(budget, ds.dim, tc.num_classes, c.baseline_depth, baseline_init_seed(seeds[k]));
    const double dev = static_cast<double>(net.total_parameter_count()) / static_cast<double>(budget) - 1.0;
    log << "rep " << k + 1 << ": budget " << budget << ", baseline width " << net.width() << " with "
        << net.total_parameter_count() << " parameters (" << (dev >= 0 ? "+" : "") << percent(dev) << ")\n";
    const TrainingLog tl =
        train(net, ds, train_config_for(c, seeds[k]), epoch_logger(log, "baseline rep " + std::to_string(k + 1)));
    const auto dir = rep_dir(c, k + 1);
    detail::ensure_directory(dir);
    save_baseline(net, dir / "baseline.json");
    write_log(tl, dir / "baseline_log.jsonl");
    runs.push_back({seeds[k], evaluate(net, ds, ds.splits.test, c.threads)});
  }
  RunReport rep = aggregate(runs, ds.name, "baseline");
  const fs::path out = fs::path(c.output_dir) / "baseline_report";
  emit(rep, out);
  write_resolved_config(c, out);
  const fs::path main_report = fs::path(c.output_dir) / "report";
  detail::ensure_directory(main_report);
  upsert_scatter_row(main_report / "scatter.csv", "baseline", rep.accuracy.mean, rep.used_params.mean);
  log << "baseline: test accuracy " << percent(rep.accuracy.mean) << " +- " << percent(rep.accuracy.std) << "\n";
  return rep;
}

// analyze ----------------------------------------------------------------------

inline Extremes cmd_analyze(const fs::path& report_dir, std::size_t k, std::ostream& log) {
  const auto csv = report_dir / "per_sample.csv";
  if (!fs::exists(csv)) throw DataError("no per-sample report at " + csv.string());
  const auto samples = read_per_sample_csv(csv);
  if (samples.empty()) throw DataError("per-sample report " + csv.string() + " has no rows");
  const Extremes ex = extremes(samples, k);
  detail::write_text(report_dir / "extremes.json", to_json(ex).dump(2) + "\n");
  auto line = [&](const char* what, const std::vector<ExtremeEntry>& v) {
    log << what << ":";
    for (const auto& e : v) log << " " << e.index;
    log << "\n";
  };
  line("least active", ex.least_active);
  line("most active", ex.most_active);
  return ex;
}

// gradcheck --------------------------------------------------------------------

inline constexpr double kGradCheckTolerance = 1e-5;

/// Returns true on pass. `corrupt` perturbs one analytic gradient entry.
inline bool cmd_gradcheck(std::uint64_t seed, bool corrupt, std::ostream& log) {
  const auto prob = tiny_gradcheck_problem(seed);
  GradientTamper tamper;
  if (corrupt) {
    tamper = [](std::span<double> g) {
      const std::size_t i = g.size() / 2;
      g[i] = g[i] * 1.5 + 1e-3;
    };
  }
  const auto res = grad_check(prob.model, prob.x, prob.label, 1e-5, tamper);
  const bool pass = res.max_rel_error < kGradCheckTolerance;
  char buf[320];
  std::snprintf(buf, sizeof buf,
                "gradcheck seed %llu: %zu parameters, max relative error %.3e at %s (analytic %.9e, numeric %.9e): %s",
                static_cast<unsigned long long>(seed), res.parameter_count, res.max_rel_error,
                res.worst_parameter.c_str(), res.analytic, res.numeric, pass ? "PASS" : "FAIL");
  log << buf << "\n";
  return pass;
}

// gen-topology -----------------------------------------------------------------

inline std::uint32_t default_input_dim(const std::string& dataset) {
  if (dataset == "mnist" || dataset == "fashion-mnist") return 784;
  if (dataset == "usps") return 256;
  if (dataset == "cifar10") return 3072;
  return 0;
}

inline Topology cmd_gen_topology(const RunConfig& c, std::uint64_t seed, const fs::path& out, std::ostream& log) {
  TopologyConfig tc = c.topology;
  if (tc.input_dim == 0) tc.input_dim = default_input_dim(c.dataset.name);
  if (tc.input_dim == 0) throw ConfigError("topology.input_dim is required for dataset '" + c.dataset.name + "'");
  const Topology t = build_topology(tc, seed);
  if (!out.parent_path().empty()) detail::ensure_directory(out.parent_path());
  detail::write_text(out, serialize(t) + "\n");
  const auto st = reachability_stats(t);
  log << "topology seed " << seed << ": " << t.experts.size() << " experts (" << st.dead_block_count << " dead), "
      << t.output_slots << " output slots, " << st.skip_connection_count << " skip connections, "
      << ParameterLayout::of(t).total << " parameters, hash " << hash_hex(topology_hash(t)) << " -> " << out.string()
      << "\n";
  return t;
}

}  // namespace raymoe::cli
