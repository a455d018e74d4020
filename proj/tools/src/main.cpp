#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "unlearn/experiment.hpp"

namespace {

using unlearn::ConfigError;
using unlearn::ExperimentConfig;

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::optional<std::size_t> workers;
  std::vector<std::string> strategies;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool config_required = true) {
  auto* config = cmd->add_option("--config,-c", flags.config_path, "experiment config (JSON)");
  if (config_required) config->required();
  cmd->add_option("--seed", flags.seed, "run a single seed");
  cmd->add_option("--seeds", flags.seeds, "seed list, overrides the config")->delimiter(',');
  cmd->add_option("--out,-o", flags.out, "output directory");
  cmd->add_option("--workers,-j", flags.workers, "concurrent runs")->check(CLI::PositiveNumber);
  cmd->add_option("--strategy", flags.strategies, "restrict to these strategies")->delimiter(',');
}

// Output root: --out, then the config's "output" field, then
// $UNLEARN_LAB_OUT/<config stem>, then unlearn-runs/<config stem>.
std::filesystem::path output_dir(const CommonFlags& flags, const ExperimentConfig& config) {
  if (!flags.out.empty()) return flags.out;
  if (!config.output.empty()) {
    if (config.output.is_absolute()) return config.output;
    return std::filesystem::path(flags.config_path).parent_path() / config.output;
  }
  const char* env = std::getenv("UNLEARN_LAB_OUT");
  const std::filesystem::path root = env && *env ? env : "unlearn-runs";
  return root / std::filesystem::path(flags.config_path).stem();
}

ExperimentConfig load(const CommonFlags& flags) {
  auto config = unlearn::load_experiment_config(flags.config_path);
  if (flags.seed) config.seeds = {*flags.seed};
  if (!flags.seeds.empty()) config.seeds = flags.seeds;
  if (flags.workers) config.workers = *flags.workers;
  if (!flags.strategies.empty()) {
    std::vector<unlearn::UnlearnConfig> kept;
    for (const auto& name : flags.strategies) {
      unlearn::UnlearnStrategy wanted;
      try {
        wanted = unlearn::parse_unlearn_strategy(name);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("--strategy: ") + e.what());
      }
      bool found = false;
      for (const auto& s : config.strategies) {
        if (s.strategy == wanted) {
          kept.push_back(s);
          found = true;
        }
      }
      if (!found) {
        unlearn::UnlearnConfig fresh;
        fresh.strategy = wanted;
        kept.push_back(fresh);
      }
    }
    config.strategies = std::move(kept);
  }
  config.output = output_dir(flags, config);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unlearn-lab: train, unlearn and audit models on desk-scale data"};
  app.require_subcommand(1);

  CommonFlags train_flags, unlearn_flags, sweep_flags, relearn_flags, report_flags, bound_flags;
  auto* train = app.add_subcommand("train", "train and cache w* for every seed");
  add_common(train, train_flags);
  auto* run = app.add_subcommand("unlearn", "run every strategy and seed, write records and summary");
  add_common(run, unlearn_flags);
  auto* sweep = app.add_subcommand("sweep-ratio", "FisherMask remain-accuracy trajectories across ratios");
  add_common(sweep, sweep_flags);
  std::vector<double> ratios;
  sweep->add_option("--ratios", ratios, "mask ratios in (0,1); defaults to the config list")->delimiter(',');
  auto* relearn = app.add_subcommand("relearn", "relearn time per strategy plus retrain from scratch");
  add_common(relearn, relearn_flags);
  auto* bound = app.add_subcommand("verify-bound", "randomized certification of the Fisher removal bound");
  add_common(bound, bound_flags, false);
  std::size_t trials = 1000, dims = 20;
  bound->add_option("--trials", trials, "random instances")->check(CLI::PositiveNumber);
  bound->add_option("--dims", dims, "maximum dimension")->check(CLI::PositiveNumber);
  auto* report = app.add_subcommand("report", "tabulate runs.jsonl from an output directory");
  add_common(report, report_flags, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) {
      for (const auto& p : unlearn::cmd_train(load(train_flags), std::cout)) std::cout << p.string() << '\n';
    } else if (run->parsed()) {
      const auto config = load(unlearn_flags);
      unlearn::cmd_unlearn(config, std::cout);
      std::cout << "records: " << (config.output / "runs.jsonl").string() << '\n';
    } else if (sweep->parsed()) {
      const auto config = load(sweep_flags);
      const auto list = ratios.empty() ? config.ratios : ratios;
      const auto paths = unlearn::cmd_sweep_ratio(config, list, std::cout);
      std::cout << paths.size() << " trajectory files under " << (config.output / "sweep").string() << '\n';
    } else if (relearn->parsed()) {
      unlearn::cmd_relearn(load(relearn_flags), std::cout);
    } else if (bound->parsed()) {
      std::uint64_t seed = bound_flags.seed.value_or(0);
      std::optional<std::filesystem::path> out;
      if (!bound_flags.config_path.empty()) {
        const auto config = load(bound_flags);
        if (!bound->count("--trials")) trials = config.bound.trials;
        if (!bound->count("--dims")) dims = config.bound.max_dim;
        if (!bound_flags.seed) seed = config.seeds.front();
        out = config.output;
      } else if (!bound_flags.out.empty()) {
        out = bound_flags.out;
      }
      const auto sweep_result = unlearn::cmd_verify_bound(trials, dims, seed, out, std::cout);
      return sweep_result.held == sweep_result.trials ? 0 : 2;
    } else if (report->parsed()) {
      std::filesystem::path dir = report_flags.out;
      if (dir.empty()) {
        if (report_flags.config_path.empty()) throw ConfigError("report needs --out or --config");
        dir = load(report_flags).output;
      }
      const auto records = unlearn::read_run_records(dir);
      std::cout << unlearn::format_table(unlearn::aggregate(records));
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
