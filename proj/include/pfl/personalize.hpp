#pragma once

// Stateless personalization on top of trained global models: fine-tuning,
// local training, HypCluster / IFCA, the ensemble-of-k-FedAvg baseline and
// kNN-Per. The stateful MTL algorithms live in mtl.hpp.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "pfl/engine.hpp"
#include "pfl/types.hpp"

namespace pfl {

/// The examples a client adapts on and the examples it is scored on.
struct LocalSplit {
  ExampleRefs personalization;
  ExampleRefs evaluation;
};

/// Personalization/evaluation tags of a cross-device valid or test client.
/// Throws when the tags are missing or the personalization set is empty.
LocalSplit device_split(const ClientDataset& client);

/// Cross-silo view: the client's train examples adapt, `eval_tag` examples score.
LocalSplit silo_split(const ClientDataset& client, SplitTag eval_tag);

// ---------------------------------------------------------------------------
// Fine-tuning

enum class FinetuneScope { all_layers, last_layer };

std::string_view to_string(FinetuneScope s);
FinetuneScope parse_finetune_scope(std::string_view s);

struct FinetuneConfig {
  double lr = 0.01;
  int max_epochs = 5;
  FinetuneScope scope = FinetuneScope::all_layers;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

void validate_finetune_config(const FinetuneConfig& cfg);

/// Snapshots of the model after 0..max_epochs epochs of SGD on `data`.
/// Entry 0 is `start` itself; `start` is never modified.
std::vector<ModelParams> finetune_path(const ModelParams& start, Batch data, const FinetuneConfig& cfg,
                                       std::string_view client_id);

struct FinetuneEval {
  double metric_before = 0.0;
  /// Metric on the evaluation set after each epoch; entry 0 equals metric_before.
  std::vector<double> per_epoch;
};

FinetuneEval finetune_eval(const ModelParams& global, const LocalSplit& split, const FinetuneConfig& cfg,
                           MetricKind kind, std::string_view client_id);
FinetuneEval finetune_eval(const ModelParams& global, const ClientDataset& client, const FinetuneConfig& cfg,
                           MetricKind kind);

/// Fine-tuning from init_params(arch, seed): the local-training baseline.
FinetuneEval local_training_eval(const LocalSplit& split, const FinetuneConfig& cfg, const ArchDescriptor& arch,
                                 std::uint64_t seed, MetricKind kind, std::string_view client_id);

/// Epoch with the best across-client mean (argmax for accuracy, argmin for
/// mse); ties go to the smallest epoch.
std::size_t select_best_epoch(const std::vector<std::vector<double>>& per_client, MetricKind kind);

// ---------------------------------------------------------------------------
// HypCluster / IFCA

struct HypClusterConfig {
  std::size_t k = 2;
  bool warmstart = false;
  /// FedAvg rounds per warm-start model.
  int warmstart_rounds = 0;
};

struct HypClusterState {
  std::vector<ModelParams> models;
  std::vector<ServerOptState> servers;
};

struct HypClusterResult {
  HypClusterState state;
  /// Warm-start rounds first (phase "warmstart_<j>"), then clustering rounds.
  std::vector<RoundTrace> traces;
  /// Fraction of the round's participants that chose cluster 0.
  std::vector<double> cluster0_fraction;
  /// Lowest-loss model of every training client under the final models.
  std::map<std::string, int> final_assignment;
};

/// Index of the lowest-loss model on `data`; ties go to the lowest index.
std::size_t select_lowest_loss(const std::vector<ModelParams>& models, Batch data);

HypClusterResult hypcluster_train(const FederatedDataset& ds, const ArchDescriptor& arch, const EngineConfig& cfg,
                                  const HypClusterConfig& hc);

struct ClusterChoice {
  std::size_t cluster = 0;
  double metric = 0.0;
};

/// Picks the lowest-loss model on the personalization set and scores it on
/// the evaluation set.
ClusterChoice hypcluster_select(const std::vector<ModelParams>& models, const LocalSplit& split, MetricKind kind);

/// True when every participant chose the same cluster for `window`
/// consecutive rounds at some point in the run.
bool mode_collapse_detected(const std::vector<RoundTrace>& traces, int window);

/// Cluster purity: each learned cluster is credited with its most common
/// planted cluster; returns the credited fraction of clients.
double assignment_purity(const std::map<std::string, int>& learned, const std::map<std::string, int>& planted);

struct EnsembleResult {
  std::vector<ModelParams> models;
  std::vector<RoundTrace> traces;
};

/// k FedAvg runs of `rounds_each` rounds; run j uses seed + j unless
/// `distinct_seeds` is false.
EnsembleResult ensemble_k_fedavg(const FederatedDataset& ds, const ArchDescriptor& arch, const EngineConfig& cfg,
                                 std::size_t k, int rounds_each, bool distinct_seeds = true);

// ---------------------------------------------------------------------------
// kNN-Per

struct KnnPerConfig {
  std::size_t k_neighbors = 10;
  double coefficient = 0.5;
};

void validate_knn_config(const KnnPerConfig& cfg);

/// Representations of the personalization set under the global model.
class KnnStore {
 public:
  KnnStore(const ModelParams& global, Batch personalization);

  std::size_t size() const { return labels_.size(); }
  /// Indices of the min(k, size) nearest entries, by (distance, index).
  std::vector<std::size_t> nearest(std::span<const double> representation, std::size_t k) const;
  double label(std::size_t i) const { return labels_[i]; }

 private:
  std::vector<std::vector<double>> reps_;
  std::vector<double> labels_;
};

struct KnnPrediction {
  /// Interpolated class distribution (classification only).
  std::vector<double> probs;
  /// Interpolated regression output (regression only).
  double value = 0.0;
  double label = 0.0;
};

KnnPrediction knn_per_predict(const ModelParams& global, const KnnStore& store, std::span<const double> x,
                              const KnnPerConfig& cfg);

double knn_per_eval(const ModelParams& global, const LocalSplit& split, const KnnPerConfig& cfg, MetricKind kind);

// ---------------------------------------------------------------------------
// Personalizers: a uniform interface used by the evaluation battery.

/// Scores a personalized predictor on a set of examples.
using Scorer = std::function<double(Batch)>;
/// Builds a client's personalized predictor from its personalization set.
using Personalizer = std::function<Scorer(Batch personalization, std::string_view client_id)>;

Personalizer global_personalizer(const ModelParams& global, MetricKind kind);
Personalizer finetune_personalizer(const ModelParams& global, const FinetuneConfig& cfg, MetricKind kind);
Personalizer knn_personalizer(const ModelParams& global, const KnnPerConfig& cfg, MetricKind kind);
Personalizer hypcluster_personalizer(const std::vector<ModelParams>& models, MetricKind kind);

}  // namespace pfl
