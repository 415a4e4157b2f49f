#pragma once

// Core value types shared by every module: examples, clients, federated
// datasets, model parameters, per-client metric records and round traces.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pfl {

/// Thrown for malformed configuration or descriptor input.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class TaskKind { classification, regression };
enum class MetricKind { accuracy, mse };

/// Which of the two split regimes a dataset or experiment follows.
enum class Regime { cross_device, cross_silo };

enum class SplitTag { train, valid, test, personalization, evaluation };

/// Client-level role. `all` marks cross-silo clients, which carry per-example
/// train/valid/test tags instead of a role.
enum class ClientRole { train, valid, test, all };

std::string_view to_string(TaskKind k);
std::string_view to_string(MetricKind k);
std::string_view to_string(Regime r);
std::string_view to_string(SplitTag t);
std::string_view to_string(ClientRole r);
TaskKind parse_task_kind(std::string_view s);
MetricKind parse_metric_kind(std::string_view s);
Regime parse_regime(std::string_view s);
SplitTag parse_split_tag(std::string_view s);
ClientRole parse_client_role(std::string_view s);

inline MetricKind metric_for(TaskKind task) {
  return task == TaskKind::classification ? MetricKind::accuracy : MetricKind::mse;
}

/// True when `candidate` is strictly better than `reference` under `kind`.
inline bool strictly_better(MetricKind kind, double candidate, double reference) {
  return kind == MetricKind::accuracy ? candidate > reference : candidate < reference;
}

struct Example {
  std::vector<double> x;
  /// Class index (stored as an integral double) or regression target.
  double y = 0.0;
  std::optional<std::int64_t> t;

  bool operator==(const Example&) const = default;
};

/// Non-owning list of examples; minibatches and tagged subsets are views.
using ExampleRefs = std::vector<const Example*>;
using Batch = std::span<const Example* const>;

ExampleRefs refs_of(std::span<const Example> examples);

struct ClientDataset {
  std::string client_id;
  std::vector<Example> examples;
  /// Empty, or one tag per example.
  std::vector<SplitTag> tags;

  bool has_tags() const { return !tags.empty(); }
  bool has_tag(SplitTag tag) const;
  ExampleRefs select(SplitTag tag) const;
  ExampleRefs all() const { return refs_of(examples); }

  bool operator==(const ClientDataset&) const = default;
};

struct FederatedDataset {
  std::vector<ClientDataset> clients;
  TaskKind task = TaskKind::classification;
  std::size_t feature_dim = 0;
  /// 1 for regression.
  std::size_t num_classes = 1;
  /// Empty until a split assigns roles.
  std::map<std::string, ClientRole> client_role;

  MetricKind metric() const { return metric_for(task); }
  const ClientDataset& client(std::string_view id) const;
  std::vector<const ClientDataset*> clients_with_role(ClientRole role) const;

  bool operator==(const FederatedDataset&) const = default;
};

/// validate_dataset: one human-readable line per violated invariant.
std::vector<std::string> validate_dataset(const FederatedDataset& ds);

// ---------------------------------------------------------------------------
// Model parameters

enum class ModelFamily { linear_regression, linear_svm, softmax_classifier, mlp_classifier, mlp_regressor };

std::string_view to_string(ModelFamily f);
ModelFamily parse_model_family(std::string_view s);

struct ArchDescriptor {
  ModelFamily family = ModelFamily::linear_regression;
  std::size_t input_dim = 1;
  std::size_t num_classes = 1;
  std::size_t hidden_dim = 0;
  double l2_reg = 0.0;

  bool operator==(const ArchDescriptor&) const = default;
};

/// A contiguous block of the flat parameter vector: `weight_count` weights
/// followed by `bias_count` biases.
struct LayerSlice {
  std::string name;
  std::size_t offset = 0;
  std::size_t weight_count = 0;
  std::size_t bias_count = 0;

  std::size_t size() const { return weight_count + bias_count; }
  std::size_t end() const { return offset + size(); }
  bool operator==(const LayerSlice&) const = default;
};

struct ModelParams {
  ArchDescriptor arch;
  std::vector<double> values;
  /// Ordered input to output; the last entry is the output layer.
  std::vector<LayerSlice> layers;

  std::size_t size() const { return values.size(); }
  const LayerSlice& layer(std::string_view name) const;
  const LayerSlice& last_layer() const { return layers.back(); }

  bool operator==(const ModelParams&) const = default;
};

// ---------------------------------------------------------------------------
// Metrics and traces

struct ClientMetricRecord {
  std::string client_id;
  /// Absent for algorithms with no pre-personalization model.
  std::optional<double> metric_before;
  double metric_after = 0.0;
  std::size_t n_personalization = 0;
  std::size_t n_evaluation = 0;
};

struct PerClientMetrics {
  MetricKind kind = MetricKind::accuracy;
  std::vector<ClientMetricRecord> records;
};

struct RoundTrace {
  std::string phase = "main";
  int round = 0;
  std::vector<std::string> sampled_client_ids;
  std::uint64_t params_broadcast = 0;
  std::uint64_t params_uploaded = 0;
  std::optional<std::map<std::string, int>> cluster_assignments;
};

}  // namespace pfl
