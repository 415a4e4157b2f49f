#pragma once

// Grid sweeps with validation-only selection, and per-client selection of
// fine-tuning hyperparameters.

#include <functional>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "pfl/eval.hpp"
#include "pfl/personalize.hpp"

namespace pfl {

using GridValue = std::variant<double, std::string>;

std::string format_grid_value(const GridValue& v);

struct GridAxis {
  std::string name;
  std::vector<GridValue> values;
};

enum class SelectionMetric { mean_accuracy, mean_mse, pct_hurt };
enum class SelectionScope { global, per_client };

std::string_view to_string(SelectionMetric m);
std::string_view to_string(SelectionScope s);
SelectionMetric parse_selection_metric(std::string_view s);
SelectionScope parse_selection_scope(std::string_view s);

struct Grid {
  /// Declared order is the lexicographic order used for tie-breaking.
  std::vector<GridAxis> axes;
  SelectionMetric selection_metric = SelectionMetric::mean_accuracy;
  SelectionScope selection_scope = SelectionScope::global;
};

/// Axes that per-client selection may tune.
bool is_finetune_axis(std::string_view name);

void validate_grid(const Grid& grid);

/// One value per axis, in axis order.
struct GridPoint {
  std::vector<std::pair<std::string, GridValue>> values;

  const GridValue& at(std::string_view axis) const;
  double number(std::string_view axis) const;
};

/// Every point in lexicographic order (first axis varies slowest).
std::vector<GridPoint> enumerate_points(const Grid& grid);

/// Scores one grid point on validation clients.
using GridRunner = std::function<SummaryStats(const GridPoint&)>;

struct GridSearchResult {
  std::vector<GridPoint> points;
  std::vector<SummaryStats> results;
  std::size_t best = 0;
};

/// The selection value of `s`, oriented so that larger is better.
double selection_score(SelectionMetric metric, const SummaryStats& s);

GridSearchResult grid_search(const Grid& grid, const GridRunner& runner, std::size_t workers = 1);

/// Point columns followed by mean, std, pct_hurt, n_clients.
void write_grid_csv(const GridSearchResult& result, std::ostream& out);

// ---------------------------------------------------------------------------
// Per-client fine-tuning selection

struct FinetuneGrid {
  std::vector<double> lrs;
  /// Candidate epoch counts; 0 means no fine-tuning.
  std::vector<int> epochs;
  FinetuneScope scope = FinetuneScope::all_layers;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct ClientTuning {
  double lr = 0.0;
  int epochs = 0;
  double valid_metric = 0.0;
};

/// Best (lr, epochs) by the client's own metric on `valid`; ties go to the
/// first lr, then the first epoch count in declared order.
ClientTuning per_client_tune(const ModelParams& global, Batch train, Batch valid, const FinetuneGrid& grid,
                             MetricKind kind, std::string_view client_id);

/// Fine-tunes with the chosen hyperparameters and scores `eval`.
double apply_tuning(const ModelParams& global, Batch train, Batch eval, const ClientTuning& choice,
                    const FinetuneGrid& grid, MetricKind kind, std::string_view client_id);

}  // namespace pfl
