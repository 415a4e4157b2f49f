// pflsim: run, validate and summarize personalized FL experiments.

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <variant>

#include "pfl/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitCheck = 3;

struct CsvOverrides {
  std::string path, client_col, label_col;
  bool any() const { return !path.empty() || !client_col.empty() || !label_col.empty(); }
};

int cmd_run(const std::string& config_path, std::uint64_t seed_offset, std::size_t workers, bool check,
            const CsvOverrides& csv) {
  pfl::ExperimentConfig cfg = pfl::load_experiment_config(config_path);
  if (workers > 0) cfg.engine.workers = workers;
  if (csv.any()) {
    auto* src = std::get_if<pfl::CsvSource>(&cfg.dataset);
    if (src == nullptr) throw pfl::ConfigError("--csv, --client-col and --label-col need a csv dataset");
    if (!csv.path.empty()) src->path = csv.path;
    if (!csv.client_col.empty()) src->schema.client_col = csv.client_col;
    if (!csv.label_col.empty()) src->schema.label_col = csv.label_col;
    const auto report = pfl::validate_config(cfg);
    if (!report.empty()) throw pfl::ConfigError(report.front());
  }
  const pfl::ExperimentResult result = pfl::run_experiment(cfg, seed_offset);
  for (const auto& r : result.runs) {
    std::cout << "seed " << r.seed << ": mean " << r.summary.mean << " std " << r.summary.std;
    if (r.summary.pct_hurt) std::cout << " hurt " << *r.summary.pct_hurt << "%";
    std::cout << " (" << r.summary.n_clients << " clients)\n";
  }
  if (result.summary) {
    std::cout << "summary over " << result.summary->runs << " runs: mean " << result.summary->mean.mean << " +- "
              << result.summary->mean.std << ", client std " << result.summary->client_std.mean << " +- "
              << result.summary->client_std.std << "\n";
  }
  std::cout << "artifacts in " << cfg.output_dir.string() << "\n";
  if (check && !result.failed_checks.empty()) {
    for (const auto& f : result.failed_checks) std::cerr << "check failed: " << f << "\n";
    return kExitCheck;
  }
  return kExitOk;
}

int cmd_validate(const std::string& config_path) {
  const std::vector<std::string> report = pfl::validate_config_file(config_path);
  if (report.empty()) {
    std::cout << config_path << ": ok\n";
    return kExitOk;
  }
  for (const auto& v : report) std::cerr << config_path << ": " << v << "\n";
  return kExitConfig;
}

int cmd_summarize(const std::string& dir) {
  std::cout << pfl::summarize_dir(dir).dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deterministic personalized federated learning simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed_offset = 0;
  std::size_t workers = 0;
  bool check = false;
  auto* run = app.add_subcommand("run", "Run an experiment config");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--seed-offset", seed_offset, "Added to every configured seed");
  run->add_option("--workers", workers, "Worker threads (overrides engine.workers)")->check(CLI::PositiveNumber);
  run->add_flag("--check", check, "Exit with status 3 when a configured check fails");
  CsvOverrides csv;
  run->add_option("--csv", csv.path, "Replace the csv dataset path");
  run->add_option("--client-col", csv.client_col, "Column holding the client id");
  run->add_option("--label-col", csv.label_col, "Column holding the label");

  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "Check a config without running it");
  validate->add_option("config", validate_path, "Experiment config (JSON)")->required();

  std::string summary_dir;
  auto* summarize = app.add_subcommand("summarize", "Summarize an output directory");
  summarize->add_option("output_dir", summary_dir, "Directory holding report.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config_path, seed_offset, workers, check, csv);
    if (*validate) return cmd_validate(validate_path);
    if (*summarize) return cmd_summarize(summary_dir);
  } catch (const pfl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
