#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "raymoe/commands.hpp"

namespace {

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
  std::optional<std::size_t> repetitions;
  std::optional<std::size_t> threads;
  std::optional<std::string> output_dir;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", path, "Run config JSON (defaults apply to missing keys)");
    app->add_option("--set", overrides, "Override a config key, e.g. --set train.batch_size=64")->take_all();
    app->add_option("--repetitions", repetitions, "Override repetitions");
    app->add_option("--threads", threads, "Worker threads (1 is bitwise reproducible; results match for any value)");
    app->add_option("--output-dir", output_dir, "Override output_dir");
  }

  raymoe::RunConfig load() const {
    auto all = overrides;
    if (repetitions) all.push_back("repetitions=" + std::to_string(*repetitions));
    if (threads) all.push_back("threads=" + std::to_string(*threads));
    if (output_dir) all.push_back("output_dir=" + nlohmann::json(*output_dir).dump());
    return raymoe::load_run_config(path, all);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"raymoe: threshold-relaxation gated mixture-of-experts networks"};
  app.require_subcommand(1);

  ConfigArgs train_args, eval_args, baseline_args, topo_args;

  auto* train = app.add_subcommand("train", "Train one model per repetition seed");
  train_args.attach(train);

  auto* eval = app.add_subcommand("eval", "Evaluate trained models and write report files");
  eval_args.attach(eval);
  raymoe::cli::EvalOptions eval_opt;
  std::vector<std::string> eval_models;
  eval->add_option("--model", eval_models, "Model file(s); default: output_dir/rep_<k>/model.json");
  eval->add_option("--split", eval_opt.split, "Split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));
  std::string eval_out;
  eval->add_option("--out", eval_out, "Report directory; default: output_dir/report");
  eval->add_option("--k", eval_opt.k, "Extremes per side")->check(CLI::PositiveNumber);

  auto* baseline = app.add_subcommand("baseline", "Train the parameter-matched dense MLP and add its scatter row");
  baseline_args.attach(baseline);

  auto* analyze = app.add_subcommand("analyze", "Least/most active samples from a report directory");
  std::string report_dir;
  std::size_t analyze_k = 12;
  analyze->add_option("report_dir", report_dir, "Directory holding per_sample.csv")->required();
  analyze->add_option("--k", analyze_k, "Samples per side")->check(CLI::PositiveNumber);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the built-in tiny model");
  std::uint64_t gc_seed = 0;
  bool gc_corrupt = false;
  gradcheck->add_option("--seed", gc_seed, "Problem seed");
  gradcheck->add_flag("--corrupt-gradient", gc_corrupt, "Perturb one analytic gradient entry (must fail)");

  auto* gen = app.add_subcommand("gen-topology", "Sample a topology and write it as JSON");
  topo_args.attach(gen);
  std::uint64_t gen_seed = 0;
  std::string gen_out = "topology.json";
  gen->add_option("--seed", gen_seed, "Topology seed");
  gen->add_option("-o,--out", gen_out, "Output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*train) {
      raymoe::cli::cmd_train(train_args.load(), std::cout);
    } else if (*eval) {
      for (const auto& m : eval_models) eval_opt.models.emplace_back(m);
      eval_opt.out_dir = eval_out;
      raymoe::cli::cmd_eval(eval_args.load(), eval_opt, std::cout);
    } else if (*baseline) {
      raymoe::cli::cmd_baseline(baseline_args.load(), std::cout);
    } else if (*analyze) {
      raymoe::cli::cmd_analyze(report_dir, analyze_k, std::cout);
    } else if (*gradcheck) {
      return raymoe::cli::cmd_gradcheck(gc_seed, gc_corrupt, std::cout) ? 0 : 3;
    } else if (*gen) {
      raymoe::cli::cmd_gen_topology(topo_args.load(), gen_seed, gen_out, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return raymoe::cli::exit_code(e);
  }
  return 0;
}
