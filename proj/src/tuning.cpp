#include "pfl/tuning.hpp"

#include <algorithm>
#include <ostream>
#include <sstream>

#include "pfl/engine.hpp"
#include "pfl/models.hpp"

namespace pfl {

std::string format_grid_value(const GridValue& v) {
  if (const auto* s = std::get_if<std::string>(&v)) return *s;
  std::ostringstream os;
  os.precision(17);
  os << std::get<double>(v);
  return os.str();
}

std::string_view to_string(SelectionMetric m) {
  switch (m) {
    case SelectionMetric::mean_accuracy: return "mean_accuracy";
    case SelectionMetric::mean_mse: return "mean_mse";
    case SelectionMetric::pct_hurt: return "pct_hurt";
  }
  return "?";
}

std::string_view to_string(SelectionScope s) { return s == SelectionScope::global ? "global" : "per_client"; }

SelectionMetric parse_selection_metric(std::string_view s) {
  if (s == "mean_accuracy") return SelectionMetric::mean_accuracy;
  if (s == "mean_mse") return SelectionMetric::mean_mse;
  if (s == "pct_hurt") return SelectionMetric::pct_hurt;
  throw ConfigError("unknown selection metric: '" + std::string(s) + "'");
}

SelectionScope parse_selection_scope(std::string_view s) {
  if (s == "global") return SelectionScope::global;
  if (s == "per_client") return SelectionScope::per_client;
  throw ConfigError("unknown selection scope: '" + std::string(s) + "'");
}

bool is_finetune_axis(std::string_view name) {
  return name == "finetune_lr" || name == "finetune_epochs" || name == "finetune_scope";
}

void validate_grid(const Grid& grid) {
  if (grid.axes.empty()) throw ConfigError("tuning grid has no axes");
  for (std::size_t i = 0; i < grid.axes.size(); ++i) {
    const auto& a = grid.axes[i];
    if (a.values.empty()) throw ConfigError("tuning axis '" + a.name + "' has no values");
    for (std::size_t j = 0; j < i; ++j) {
      if (grid.axes[j].name == a.name) throw ConfigError("tuning axis '" + a.name + "' is declared twice");
    }
    if (grid.selection_scope == SelectionScope::per_client && !is_finetune_axis(a.name)) {
      throw ConfigError("per_client selection only tunes fine-tuning axes, not '" + a.name + "'");
    }
  }
}

const GridValue& GridPoint::at(std::string_view axis) const {
  for (const auto& [name, v] : values) {
    if (name == axis) return v;
  }
  throw std::out_of_range("grid point has no axis '" + std::string(axis) + "'");
}

double GridPoint::number(std::string_view axis) const {
  const GridValue& v = at(axis);
  if (const auto* d = std::get_if<double>(&v)) return *d;
  throw ConfigError("tuning axis '" + std::string(axis) + "' must be numeric");
}

std::vector<GridPoint> enumerate_points(const Grid& grid) {
  validate_grid(grid);
  std::vector<GridPoint> points;
  std::vector<std::size_t> idx(grid.axes.size(), 0);
  while (true) {
    GridPoint p;
    for (std::size_t a = 0; a < grid.axes.size(); ++a) p.values.emplace_back(grid.axes[a].name, grid.axes[a].values[idx[a]]);
    points.push_back(std::move(p));
    std::size_t a = grid.axes.size();
    while (a > 0) {
      --a;
      if (++idx[a] < grid.axes[a].values.size()) break;
      idx[a] = 0;
      if (a == 0) return points;
    }
  }
}

double selection_score(SelectionMetric metric, const SummaryStats& s) {
  switch (metric) {
    case SelectionMetric::mean_accuracy: return s.mean;
    case SelectionMetric::mean_mse: return -s.mean;
    case SelectionMetric::pct_hurt:
      if (!s.pct_hurt) throw std::invalid_argument("pct_hurt selection needs before/after metrics");
      return -*s.pct_hurt;
  }
  return 0.0;
}

GridSearchResult grid_search(const Grid& grid, const GridRunner& runner, std::size_t workers) {
  GridSearchResult out;
  out.points = enumerate_points(grid);
  out.results.resize(out.points.size());
  parallel_for(out.points.size(), workers, [&](std::size_t i) { out.results[i] = runner(out.points[i]); });
  for (std::size_t i = 1; i < out.points.size(); ++i) {
    if (selection_score(grid.selection_metric, out.results[i]) >
        selection_score(grid.selection_metric, out.results[out.best])) {
      out.best = i;
    }
  }
  return out;
}

void write_grid_csv(const GridSearchResult& result, std::ostream& out) {
  if (result.points.empty()) return;
  for (const auto& [name, v] : result.points.front().values) out << name << ',';
  out << "mean,std,pct_hurt,n_clients,selected\n";
  out.precision(17);
  for (std::size_t i = 0; i < result.points.size(); ++i) {
    for (const auto& [name, v] : result.points[i].values) out << format_grid_value(v) << ',';
    const auto& s = result.results[i];
    out << s.mean << ',' << s.std << ',';
    if (s.pct_hurt) out << *s.pct_hurt;
    out << ',' << s.n_clients << ',' << (i == result.best ? 1 : 0) << '\n';
  }
}

namespace {

void validate_finetune_grid(const FinetuneGrid& grid) {
  if (grid.lrs.empty() || grid.epochs.empty()) throw ConfigError("fine-tuning grid needs lrs and epochs");
  for (const double lr : grid.lrs) {
    if (!(lr > 0.0)) throw ConfigError("fine-tuning grid lrs must be positive");
  }
  for (const int e : grid.epochs) {
    if (e < 0) throw ConfigError("fine-tuning grid epochs must be >= 0");
  }
}

FinetuneConfig config_for(const FinetuneGrid& grid, double lr, int epochs) {
  FinetuneConfig cfg;
  cfg.lr = lr;
  cfg.max_epochs = epochs;
  cfg.scope = grid.scope;
  cfg.batch_size = grid.batch_size;
  cfg.seed = grid.seed;
  return cfg;
}

}  // namespace

ClientTuning per_client_tune(const ModelParams& global, Batch train, Batch valid, const FinetuneGrid& grid,
                             MetricKind kind, std::string_view client_id) {
  validate_finetune_grid(grid);
  if (valid.empty()) throw std::invalid_argument("client '" + std::string(client_id) + "' has no validation examples");
  const int max_epochs = *std::max_element(grid.epochs.begin(), grid.epochs.end());
  ClientTuning best;
  bool first = true;
  for (const double lr : grid.lrs) {
    // one path per lr covers every epoch count
    const std::vector<ModelParams> path = finetune_path(global, train, config_for(grid, lr, max_epochs), client_id);
    for (const int e : grid.epochs) {
      const double m = evaluate_metric(path[static_cast<std::size_t>(e)], valid, kind);
      if (first || strictly_better(kind, m, best.valid_metric)) {
        best = {lr, e, m};
        first = false;
      }
    }
  }
  return best;
}

double apply_tuning(const ModelParams& global, Batch train, Batch eval, const ClientTuning& choice,
                    const FinetuneGrid& grid, MetricKind kind, std::string_view client_id) {
  const std::vector<ModelParams> path =
      finetune_path(global, train, config_for(grid, choice.lr, choice.epochs), client_id);
  return evaluate_metric(path.back(), eval, kind);
}

}  // namespace pfl
