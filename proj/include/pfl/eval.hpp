#pragma once

// Evaluation battery: per-client summaries, two-level multi-run statistics,
// the ID/OOD fine-tuning curve, communication accounting and the
// personalization-set-size sweep.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pfl/personalize.hpp"
#include "pfl/types.hpp"

namespace pfl {

struct SummaryStats {
  double mean = 0.0;
  /// Population std of metric_after across clients.
  double std = 0.0;
  /// Set only when every record carries metric_before.
  std::optional<double> pct_hurt;
  std::optional<double> pct_helped;
  std::optional<double> pct_unchanged;
  std::size_t n_clients = 0;
};

SummaryStats summarize(const PerClientMetrics& pcm);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Second std level: each field's mean and population std over runs.
struct MultiRunSummary {
  std::size_t runs = 0;
  MeanStd mean;
  MeanStd client_std;
  std::optional<MeanStd> pct_hurt;
};

MultiRunSummary multi_run_summary(const std::vector<SummaryStats>& runs);

/// Population mean and std of `values`.
MeanStd mean_std(const std::vector<double>& values);

/// A client's personalization/evaluation split with its id.
struct ClientSplit {
  std::string client_id;
  LocalSplit split;
};

/// Personalizes every client and scores it on its evaluation set. When
/// `baseline` is set it fills metric_before.
PerClientMetrics personalized_metrics(const std::vector<ClientSplit>& clients, const Personalizer& personalizer,
                                      MetricKind kind, const Personalizer* baseline = nullptr);

struct IdOodPoint {
  int epochs = 0;
  double id_metric = 0.0;
  double ood_metric = 0.0;
};

/// For each epoch count, personalizes every client with make_personalizer(epochs)
/// and averages its metric on its own evaluation set (ID) and on `ood` (OOD).
std::vector<IdOodPoint> id_ood_curve(const std::vector<ClientSplit>& clients, const std::vector<Example>& ood,
                                     const std::function<Personalizer(int)>& make_personalizer,
                                     const std::vector<int>& epoch_grid);

struct CommPoint {
  std::string phase;
  int round = 0;
  std::uint64_t cumulative_broadcast = 0;
  std::uint64_t cumulative_uploaded = 0;
  std::uint64_t cumulative_total = 0;
};

/// Cumulative communication over the traces in order, warm-start phases included.
std::vector<CommPoint> communication_report(const std::vector<RoundTrace>& traces);

struct SweepPoint {
  double fraction = 1.0;
  double mean_metric = 0.0;
  std::size_t clients_used = 0;
  std::size_t clients_skipped = 0;
};

/// Keeps floor(fraction * n) personalization examples per client (a seeded
/// subset in original order; fraction 1 keeps the set untouched) and
/// re-runs personalization. Clients left with no examples are skipped.
std::vector<SweepPoint> personalization_set_sweep(const std::vector<ClientSplit>& clients,
                                                  const Personalizer& personalizer,
                                                  const std::vector<double>& fractions, std::uint64_t seed);

/// The subset used by the sweep for one client.
ExampleRefs subsample_personalization(const ExampleRefs& set, double fraction, std::uint64_t seed,
                                      std::string_view client_id);

}  // namespace pfl
