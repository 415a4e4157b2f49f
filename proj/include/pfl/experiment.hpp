#pragma once

// Config-driven experiment runner: builds and splits the dataset, trains the
// chosen algorithm, personalizes and evaluates every test client, and writes
// report.json, metrics.csv, per_client.json and checkpoints/.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "pfl/data.hpp"
#include "pfl/engine.hpp"
#include "pfl/eval.hpp"
#include "pfl/mtl.hpp"
#include "pfl/personalize.hpp"
#include "pfl/tuning.hpp"

namespace pfl {

inline constexpr int kReportSchemaVersion = 1;

enum class Algorithm { local, fedavg_finetune, hypcluster, ensemble_fedavg, knn_per, ditto, mocha };

std::string_view to_string(Algorithm a);
Algorithm parse_algorithm(std::string_view s);

struct SyntheticSource {
  SynthSpec spec;
  /// Fixed data seed; unset means the run seed generates the data.
  std::optional<std::uint64_t> seed;
};

struct CsvSource {
  std::filesystem::path path;
  CsvSchema schema;
};

struct EnsembleConfig {
  std::size_t k = 2;
  int rounds_each = 0;  // 0: engine.total_rounds
};

/// A bound on one reported metric, checked in --check mode.
struct MetricCheck {
  std::string metric;
  std::optional<double> min;
  std::optional<double> max;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::variant<SyntheticSource, CsvSource> dataset;
  Regime regime = Regime::cross_device;
  SplitSpec split;
  ArchDescriptor model;  // input_dim and num_classes come from the dataset
  Algorithm algorithm = Algorithm::fedavg_finetune;
  FinetuneConfig finetune;
  /// Pick the fine-tuning epoch on validation clients (0..finetune.max_epochs).
  bool select_finetune_epoch = true;
  HypClusterConfig hypcluster;
  EnsembleConfig ensemble;
  KnnPerConfig knn;
  DittoConfig ditto;
  MochaConfig mocha;
  EngineConfig engine;
  std::optional<Grid> tuning;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output_dir = "out";
  std::vector<MetricCheck> checks;
};

/// Parses the JSON config; relative paths resolve against `base_dir`.
/// Throws ConfigError on malformed or unknown entries.
ExperimentConfig parse_experiment_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Every invariant violation of a parsed config; empty when valid.
std::vector<std::string> validate_config(const ExperimentConfig& cfg);
/// Parse failures are reported as a single violation.
std::vector<std::string> validate_config_file(const std::filesystem::path& path);

/// Applies a grid point's overrides (e.g. "finetune_lr", "client_lr") to a copy of cfg.
ExperimentConfig apply_overrides(const ExperimentConfig& cfg, const GridPoint& point);

/// Data for one run, after splitting.
FederatedDataset build_dataset(const ExperimentConfig& cfg, std::uint64_t run_seed);
ArchDescriptor resolve_arch(const ExperimentConfig& cfg, const FederatedDataset& ds);

/// Validation (valid-role clients / valid tags) or test client splits.
std::vector<ClientSplit> evaluation_clients(const FederatedDataset& ds, Regime regime, bool validation);

struct RunOutcome {
  std::uint64_t seed = 0;
  PerClientMetrics per_client;
  SummaryStats summary;
  std::vector<HistoryPoint> history;
  std::vector<CommPoint> communication;
  std::optional<std::size_t> finetune_epoch;
  std::optional<GridSearchResult> tuning;
  std::optional<std::string> tuned_point;
};

/// Trains and evaluates one seed. `validation` scores validation clients
/// instead of test clients (used by tuning).
RunOutcome run_single(const ExperimentConfig& cfg, std::uint64_t seed, bool validation,
                      const std::filesystem::path& checkpoint_dir = {});

struct ExperimentResult {
  std::vector<RunOutcome> runs;
  std::optional<MultiRunSummary> summary;
  std::vector<std::string> failed_checks;
};

/// Runs every seed (shifted by seed_offset) and writes the artifacts.
ExperimentResult run_experiment(const ExperimentConfig& cfg, std::uint64_t seed_offset = 0);

/// Recomputes the multi-run summary from an output directory's report.json.
nlohmann::json summarize_dir(const std::filesystem::path& output_dir);

}  // namespace pfl
