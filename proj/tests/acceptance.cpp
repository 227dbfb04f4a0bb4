// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "raymoe/commands.hpp"
#include "stats_support.hpp"
#include "test_support.hpp"

using namespace raymoe;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "[PASS] " : "[FAIL] ") << id << ". " << name << ": " << detail << std::endl;
  if (!pass) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

std::size_t worker_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

std::vector<double> uniform_input(std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x(d);
  for (double& v : x) v = rng.uniform01();
  return x;
}

TopologyConfig mnist_topology() {
  TopologyConfig c;
  c.input_dim = 784;
  return c;
}

// 1 ------------------------------------------------------------------------------

void gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::size_t with_inactive = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto prob = tiny_gradcheck_problem(seed);
    worst = std::max(worst, grad_check(prob.model, prob.x, prob.label, 1e-5).max_rel_error);
    const auto trace = relax(prob.model, prob.x).trace;
    for (std::size_t e = 0; e < trace.active_ever.size(); ++e) {
      if (!prob.model.topology->experts[e].dead && !trace.active_ever[e]) {
        ++with_inactive;
        break;
      }
    }
  }
  const double secs = seconds_since(t0);
  report(1, "gradient correctness", worst < 1e-5 && with_inactive > 0 && secs < 10.0,
         fmt("max relative error %.2e over 10 seeds, %.0f seeds with a never-active expert, %.2f s", worst,
             static_cast<double>(with_inactive), secs));
}

// 2 ------------------------------------------------------------------------------

void chain_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = relax(test::chain_model(), test::chain_input());
  const double err = std::max(std::abs(res.logits[0] - test::kChainLogits[0]),
                              std::abs(res.logits[1] - test::kChainLogits[1]));
  const double secs = seconds_since(t0);
  report(2, "straight-line oracle", err < 1e-12 && secs < 1.0, fmt("max |logit error| %.2e, %.4f s", err, secs));
}

// 3 ------------------------------------------------------------------------------

void activation_limits() {
  bool full_ok = true, none_ok = true;
  double min_frac = 1.0;
  std::size_t max_active = 0;
  const TopologyConfig tc = mnist_topology();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto topo = std::make_shared<const Topology>(build_topology(tc, seed));
    const auto reach = reachable_experts(*topo);
    RelaxationConfig open;
    open.theta0 = 0.0;
    open.theta_out = std::numeric_limits<double>::infinity();
    open.t_max = tc.layers + 1;
    const Model m = init_params(topo, seed, open);
    const auto trace = relax(m, uniform_input(784, seed)).trace;
    std::size_t reachable = 0, hit = 0;
    for (std::size_t e = 0; e < reach.size(); ++e) {
      if (!reach[e] || topo->experts[e].dead) {
        if (trace.active_ever[e]) full_ok = false;
        continue;
      }
      ++reachable;
      hit += trace.active_ever[e] ? 1 : 0;
    }
    full_ok = full_ok && hit == reachable;
    min_frac = std::min(min_frac, static_cast<double>(hit) / static_cast<double>(reachable));

    RelaxationConfig closed;
    closed.theta0 = 1e6;
    closed.decay = 0.999999;
    const Model c = init_params(topo, seed, closed);
    const auto tr = relax(c, uniform_input(784, seed + 100)).trace;
    const auto active = static_cast<std::size_t>(std::count(tr.active_ever.begin(), tr.active_ever.end(), 1));
    max_active = std::max(max_active, active);
    none_ok = none_ok && active == 0;
  }
  report(3, "full and zero activation limits", full_ok && none_ok,
         fmt("theta=0: min %.1f%% of reachable experts active; theta0=1e6: max %.0f experts active (5 seeds)",
             100.0 * min_frac, static_cast<double>(max_active)));
}

// 4 ------------------------------------------------------------------------------

void theta_schedule(const Model& trained, const Dataset& ds) {
  Model m = trained;
  m.relaxation.theta_out = std::numeric_limits<double>::infinity();
  double worst = 0.0;
  std::size_t steps = 0;
  for (std::size_t k = 0; k < 20; ++k) {
    const auto trace = relax(m, ds.row(ds.splits.test[k])).trace;
    for (const auto& s : trace.steps) {
      const double expected = m.relaxation.theta0 * std::pow(0.9, static_cast<double>(s.t - 1));
      worst = std::max(worst, std::abs(s.theta - expected) / expected);
      ++steps;
    }
  }
  report(4, "theta schedule", worst < 1e-12 && steps == 20u * m.relaxation.t_max,
         fmt("max relative error %.2e over %.0f recorded steps", worst, static_cast<double>(steps)));
}

// 5 ------------------------------------------------------------------------------

void stopping_rule(const Model& m, const Dataset& ds) {
  std::size_t violations = 0, by_threshold = 0, max_steps = 0;
  for (std::size_t i : ds.splits.test) {
    const auto trace = relax(m, ds.row(i)).trace;
    max_steps = std::max(max_steps, trace.steps_taken);
    if (trace.terminated_by == Termination::output_threshold) {
      ++by_threshold;
      if (!(trace.steps.back().output_sum >= m.relaxation.theta_out)) ++violations;
      for (std::size_t k = 0; k + 1 < trace.steps.size(); ++k) {
        if (!(trace.steps[k].output_sum < m.relaxation.theta_out)) ++violations;
      }
    } else if (trace.steps_taken != m.relaxation.t_max) {
      ++violations;
    }
  }
  std::ostringstream d;
  d << violations << " violations over " << ds.splits.test.size() << " test samples (" << by_threshold
    << " stopped at the output threshold, longest relaxation " << max_steps << " steps)";
  report(5, "stopping rule", violations == 0, d.str());
}

// 6, 7 ---------------------------------------------------------------------------

struct MnistRun {
  RunReport raymoe;
  RunReport baseline;
  double seconds = 0.0;
};

RunConfig mnist_config(const fs::path& out, std::size_t subset, std::size_t epochs, std::size_t threads) {
  return load_run_config("", {"dataset.name=\"mnist\"", "dataset.train_subset=" + std::to_string(subset),
                              "train.epochs=" + std::to_string(epochs), "train.log_wall_time=false",
                              "repetitions=1", "threads=" + std::to_string(threads),
                              "output_dir=" + nlohmann::json(out.string()).dump()});
}

void trend(const MnistRun& r) {
  const double acc = r.raymoe.accuracy.mean, base = r.baseline.accuracy.mean;
  const double used = r.raymoe.used_params.mean, total = r.raymoe.total_params;
  const bool pass = acc >= base - 0.05 && used < total && r.raymoe.reduction >= 0.25;
  report(6, "accuracy and parameter-reduction trend", pass,
         fmt("accuracy %.2f%% vs baseline %.2f%%, mean used %.0f of %.0f", 100 * acc, 100 * base, used, total) +
             fmt(" (reduction %.1f%%), %.0f s", 100 * r.raymoe.reduction, r.seconds));
}

void heterogeneity(const RunReport& rep, const fs::path& report_dir) {
  std::vector<double> pct;
  for (const auto& s : rep.samples) pct.push_back(s.active_block_pct);
  const double sd = detail::mean_std(pct).std;
  std::ostringstream sink;
  const Extremes ex = cli::cmd_analyze(report_dir, 12, sink);
  std::set<std::size_t> least, most;
  for (const auto& e : ex.least_active) least.insert(e.index);
  for (const auto& e : ex.most_active) most.insert(e.index);
  bool disjoint = least.size() == 12 && most.size() == 12;
  for (auto i : least) disjoint = disjoint && !most.count(i);
  report(7, "activation heterogeneity", sd > 0.0 && disjoint,
         fmt("active_block_pct std %.3f over %.0f test samples; ", sd, static_cast<double>(pct.size())) +
             (disjoint ? "12-least and 12-most sets disjoint" : "extreme sets overlap or are short"));
}

// 8 ------------------------------------------------------------------------------

void zero_gradient(const Model& m, const Dataset& ds) {
  const std::span<const std::size_t> batch(ds.splits.test.data(), 128);
  std::vector<std::uint8_t> ever(m.topology->experts.size(), 0);
  for (std::size_t i : batch) {
    const auto tr = relax(m, ds.row(i)).trace;
    for (std::size_t e = 0; e < ever.size(); ++e) ever[e] |= tr.active_ever[e];
  }
  std::vector<double> grad(m.params.size());
  detail::batch_gradient(m, ds, batch, 1, grad, 1, 0, 1);
  std::size_t silent = 0, nonzero = 0;
  for (std::size_t e = 0; e < ever.size(); ++e) {
    if (m.topology->experts[e].dead || ever[e]) continue;
    ++silent;
    const auto& blk = m.layout.experts[e];
    const std::size_t n = m.topology->config.neurons_per_expert * (m.topology->experts[e].fan_in + 1);
    for (std::size_t k = 0; k < n; ++k) nonzero += grad[blk.weight + k] != 0.0 ? 1 : 0;
  }
  std::ostringstream d;
  d << silent << " experts silent over a 128-sample batch, " << nonzero << " nonzero gradient entries among them";
  report(8, "zero gradient outside the active set", silent > 0 && nonzero == 0, d.str());
}

// 9 ------------------------------------------------------------------------------

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(RAYMOE_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void determinism(const fs::path& root) {
  fs::create_directories(root);
  std::vector<std::string> differing;
  bool ran = true;
  // Both runs use the same output_dir; the first is moved aside before the second starts.
  const fs::path out = root / "run";
  const std::string base = std::string(" --set dataset.train_subset=1000 --set train.epochs=3 --set train.patience=3"
                                       " --set train.log_wall_time=false --repetitions 1 --threads 1 --output-dir ") +
                           out.string();
  for (const char* tag : {"a", "b"}) {
    ran = ran && run_cli("train" + base, root / (std::string(tag) + "_train.log")) == 0;
    ran = ran && run_cli("eval" + base, root / (std::string(tag) + "_eval.log")) == 0;
    if (ran) fs::rename(out, root / tag);
  }
  const char* files[] = {"config.resolved.json", "rep_1/model.json", "rep_1/training_log.jsonl",
                         "report/report.json",   "report/per_sample.csv", "report/extremes.json"};
  if (ran) {
    for (const char* f : files) {
      if (!fs::exists(root / "a" / f) || detail::read_text(root / "a" / f) != detail::read_text(root / "b" / f)) {
        differing.emplace_back(f);
      }
    }
  }
  std::string d = ran ? std::to_string(std::size(files) - differing.size()) + " of " + std::to_string(std::size(files)) +
                            " files byte-identical across two single-threaded CLI runs"
                      : "CLI run failed, see " + root.string();
  for (const auto& f : differing) d += "; differs: " + f;
  report(9, "determinism", ran && differing.empty(), d);
}

// 10 -----------------------------------------------------------------------------

void baseline_matching(const Dataset& ds) {
  const Topology t = build_topology(mnist_topology(), topology_seed(1));
  const std::size_t budget = ParameterLayout::of(t).total;
  const MlpBaseline net = build_baseline(budget, 784, 10, 4, baseline_init_seed(1));
  const double dev = static_cast<double>(net.total_parameter_count()) / static_cast<double>(budget) - 1.0;
  bool dense = true;
  for (std::size_t k = 0; k < 50; ++k) {
    const auto r = evaluate_sample(net, ds.row(ds.splits.test[k]), ds.labels[ds.splits.test[k]]);
    dense = dense && r.used_params == net.total_parameter_count();
  }
  std::ostringstream d;
  d << "budget " << budget << ", baseline width " << net.width() << " with " << net.total_parameter_count()
    << " parameters (" << fmt("%+.2f%%", 100 * dev) << "); dense used == total: " << (dense ? "yes" : "no");
  report(10, "baseline parameter matching", std::abs(dev) <= 0.10 && dense, d.str());
}

// 11 -----------------------------------------------------------------------------

void topology_statistics() {
  TopologyConfig c = mnist_topology();
  c.input_dim = 10;  // keeps the input-neuron count small per topology
  const auto dc = test::count_destinations(c, 5000, 100000);
  const double p = c.p;
  const std::uint32_t L = c.layers;
  double min_p = 1.0;
  {
    std::vector<double> obs(dc.counts[0].begin() + 1, dc.counts[0].begin() + L + 1), probs{p};
    for (std::uint32_t l = 2; l <= L; ++l) probs.push_back((1 - p) / (L - 1));
    min_p = std::min(min_p, test::chi_square_p(obs, probs));
  }
  for (std::uint32_t l = 1; l < L; ++l) {
    std::vector<double> obs(dc.counts[l].begin() + l + 1, dc.counts[l].end()), probs{p};
    for (std::uint32_t d = l + 2; d <= L + 1; ++d) probs.push_back((1 - p) / (L - l));
    min_p = std::min(min_p, test::chi_square_p(obs, probs));
  }
  report(11, "topology destination frequencies", min_p > 0.01,
         fmt("min chi-square p-value %.3f over %.0f sources (%.0f draws, at least 1e5 per source)", min_p,
             static_cast<double>(L), static_cast<double>(dc.draws)));
}

}  // namespace

int main() {
  const fs::path root = fs::temp_directory_path() / ("raymoe_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);

  gradient_correctness();
  chain_oracle();
  activation_limits();

  if (!test::mnist_available()) {
    const std::string why = "MNIST not found under " + test::data_root().string();
    report(4, "theta schedule", false, why);
    report(5, "stopping rule", false, why);
    report(6, "accuracy and parameter-reduction trend", false, why);
    report(7, "activation heterogeneity", false, why);
    report(8, "zero gradient outside the active set", false, why);
    report(9, "determinism", false, why);
    report(10, "baseline parameter matching", false, why);
  } else {
    std::cerr << "training on MNIST (10k subset, 30 epochs) for criteria 4-8 ..." << std::endl;
    MnistRun run;
    const auto t0 = std::chrono::steady_clock::now();
    const RunConfig c = mnist_config(root / "mnist", 10000, 30, worker_threads());
    std::ostringstream log;
    cli::cmd_train(c, log);
    cli::EvalOptions opt;
    run.raymoe = cli::cmd_eval(c, opt, log);
    run.baseline = cli::cmd_baseline(c, log);
    run.seconds = seconds_since(t0);
    detail::write_text(root / "mnist" / "acceptance.log", log.str());

    const Model model = load_model(cli::rep_dir(c, 1) / "model.json");
    const Dataset ds = load_dataset(c.dataset);
    theta_schedule(model, ds);
    stopping_rule(model, ds);
    trend(run);
    heterogeneity(run.raymoe, root / "mnist" / "report");
    zero_gradient(model, ds);
    determinism(root / "determinism");
    baseline_matching(ds);
  }
  topology_statistics();

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
            << " (artifacts in " << root.string() << ")" << std::endl;
  return failures == 0 ? 0 : 1;
}
