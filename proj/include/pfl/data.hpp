#pragma once

// Synthetic federated datasets, CSV silo ingestion, the cross-device and
// cross-silo split regimes, client sampling, and pooled OOD sets.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pfl/types.hpp"

namespace pfl {

enum class SynthKind { planted_clusters, label_skew, local_shift };

std::string_view to_string(SynthKind k);
SynthKind parse_synth_kind(std::string_view s);

struct SynthSpec {
  SynthKind kind = SynthKind::planted_clusters;
  TaskKind task = TaskKind::classification;
  std::size_t num_clients = 40;
  std::size_t examples_mean = 50;
  std::size_t examples_spread = 0;
  std::size_t feature_dim = 10;
  std::size_t num_classes = 2;
  std::size_t num_planted_clusters = 2;
  /// planted_clusters: scale of the cluster-specific component of each
  /// generating model; label_skew: inverse Dirichlet concentration (0 means
  /// identical priors); local_shift: std of the per-client input shift.
  double heterogeneity = 1.0;
  /// Probability that a classification label is replaced by a uniform class.
  double label_noise = 0.0;
  /// Std of additive noise on regression targets.
  double noise_std = 0.1;
  std::uint64_t seed = 0;
};

/// Generated data plus the ground truth used by the recovery diagnostics.
struct SyntheticDataset {
  FederatedDataset dataset;
  /// Latent cluster per client (all zero for kinds without clusters).
  std::map<std::string, int> cluster_of;
  /// Generating model per cluster, as parameters of a linear family.
  std::vector<ModelParams> oracles;
};

/// Throws ConfigError for an invalid spec.
SyntheticDataset generate_synthetic(const SynthSpec& spec);

/// Recommended minimum `heterogeneity` for planted_clusters: above it the
/// ground-truth models recover the planted assignment exactly on generated data.
inline constexpr double kPlantedRecoveryThreshold = 1.0;

struct CsvSchema {
  std::string client_col = "client_id";
  std::string label_col = "label";
  /// Empty means every other column.
  std::vector<std::string> feature_cols;
  TaskKind task = TaskKind::classification;
  /// Standardize each feature with its mean/std over the whole file.
  bool standardize = true;
};

FederatedDataset load_csv_silo(const std::filesystem::path& path, const CsvSchema& schema);

struct SplitSpec {
  Regime regime = Regime::cross_device;
  /// (train, valid, test) over clients for cross-device.
  std::array<double, 3> client_fractions{0.6, 0.2, 0.2};
  /// (train, valid, test) over each client's examples for cross-silo.
  std::array<double, 3> local_fractions{0.7, 0.15, 0.15};
  double personalization_fraction = 0.5;
  bool sort_by_time = false;
  std::uint64_t seed = 0;
};

FederatedDataset split_cross_device(const FederatedDataset& ds, const SplitSpec& spec);
FederatedDataset split_cross_silo(const FederatedDataset& ds, const SplitSpec& spec);
FederatedDataset apply_split(const FederatedDataset& ds, const SplitSpec& spec);

std::vector<std::string> sample_clients(const std::vector<std::string>& pool, std::size_t n, int round,
                                        std::uint64_t seed);

/// `n` examples drawn without replacement from the union of the clients'
/// evaluation sets.
std::vector<Example> build_ood_set(const std::vector<const ClientDataset*>& test_clients, std::size_t n,
                                   std::uint64_t seed);

}  // namespace pfl
