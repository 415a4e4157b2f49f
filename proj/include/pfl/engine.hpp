#pragma once

// The federated round loop shared by FedAvg and the personalization
// algorithms: client sampling, local SGD, ordered weighted aggregation,
// server optimizer application, tracing and checkpointing.
//
// Determinism contract: every client's local randomness comes from
// (seed, round, client_id), and aggregation always reduces in ascending
// client_id order, so results are bitwise identical at any worker count.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pfl/optim.hpp"
#include "pfl/rng.hpp"
#include "pfl/types.hpp"

namespace pfl {

enum class Weighting { uniform, by_example_count };

std::string_view to_string(Weighting w);
Weighting parse_weighting(std::string_view s);

struct EngineConfig {
  /// 0 means no federated training (the local-training case).
  int total_rounds = 0;
  /// 0 means full participation.
  std::size_t clients_per_round = 0;
  double client_lr = 0.1;
  std::size_t train_batch_size = 32;
  int train_epochs = 1;
  ServerOptSpec server;
  Weighting weighting = Weighting::by_example_count;
  /// 0 disables the periodic validation hook.
  int rounds_per_evaluation = 0;
  /// 0 disables checkpoints; they are written under `checkpoint_dir`.
  int rounds_per_checkpoint = 0;
  std::filesystem::path checkpoint_dir;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

/// Throws ConfigError on an invalid engine configuration.
void validate_engine_config(const EngineConfig& cfg);

/// A client's training data as seen by the engine.
struct TrainingClient {
  std::string client_id;
  ExampleRefs data;
};

/// Training clients sorted by id: train-role clients (cross-device),
/// train-tagged examples (cross-silo), or every client when unsplit.
std::vector<TrainingClient> training_pool(const FederatedDataset& ds);

/// Runs fn(i) for i in [0, n) on up to `workers` threads.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

/// Called with the current params and the gradient of the batch loss; may
/// modify the gradient in place (regularizers, frozen layers).
using GradientAdjust = std::function<void(const ModelParams& current, std::span<double> grad)>;

/// `epochs` passes of minibatch SGD over `data` in a per-epoch shuffled order.
/// lr = 0 leaves `params` unchanged.
void local_sgd(ModelParams& params, Batch data, int epochs, std::size_t batch_size, double lr, Rng& rng,
               const GradientAdjust& adjust = {});

struct ClientUpdate {
  std::vector<double> delta;
  double weight = 0.0;
};

ClientUpdate client_update(const ModelParams& start, Batch local, int epochs, std::size_t batch_size, double lr,
                           Rng& rng, Weighting weighting = Weighting::by_example_count);

/// Client RNG stream for `purpose` in `round`.
Rng client_rng(std::uint64_t seed, std::string_view purpose, int round, std::string_view client_id);

/// sum_i w_i * delta_i / sum_i w_i, reduced in the order given.
std::vector<double> aggregate(std::span<const std::vector<double>> deltas, std::span<const double> weights);

struct FedAvgState {
  ModelParams params;
  ServerOptState server;
  int next_round = 0;
  std::uint64_t seed = 0;

  bool operator==(const FedAvgState&) const = default;
};

FedAvgState initial_fedavg_state(const ArchDescriptor& arch, const EngineConfig& cfg);

/// Sampled clients of `round`, sorted by id.
std::vector<std::string> round_participants(const std::vector<TrainingClient>& pool, const EngineConfig& cfg,
                                            int round);

/// One FedAvg round with the given participants (sorted by id). Fills `trace`
/// when non-null.
FedAvgState fedavg_round(const FedAvgState& state, const std::vector<const TrainingClient*>& participants,
                         const EngineConfig& cfg, RoundTrace* trace);

struct HistoryPoint {
  int round = 0;
  double valid_metric = 0.0;
};

struct FedAvgResult {
  FedAvgState state;
  std::vector<RoundTrace> traces;
  std::vector<HistoryPoint> history;
};

struct FedAvgHooks {
  /// Mean per-client validation metric of the current model, used every
  /// `rounds_per_evaluation` rounds. When unset the default evaluates valid
  /// clients (cross-device) or valid-tagged examples (cross-silo).
  std::function<double(const ModelParams&)> evaluate;
  std::string phase = "main";
};

FedAvgResult run_fedavg(const FederatedDataset& ds, const ArchDescriptor& arch, const EngineConfig& cfg,
                        const FedAvgHooks& hooks = {});

/// Continues training from `state` until cfg.total_rounds.
FedAvgResult resume_fedavg(const FederatedDataset& ds, FedAvgState state, const EngineConfig& cfg,
                           const FedAvgHooks& hooks = {});

/// Mean per-client validation metric of `params` on the dataset's validation data.
double mean_validation_metric(const FederatedDataset& ds, const ModelParams& params);

// Checkpoints are versioned JSON blobs: round index, params, server state and
// the seed from which every RNG stream is derived.
inline constexpr int kCheckpointVersion = 1;
void save_checkpoint(const FedAvgState& state, const std::filesystem::path& path);
FedAvgState load_checkpoint(const std::filesystem::path& path);

}  // namespace pfl
