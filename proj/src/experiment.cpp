#include "pfl/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <set>
#include <sstream>

#include "pfl/models.hpp"

namespace pfl {

using nlohmann::json;

namespace {

constexpr std::pair<Algorithm, std::string_view> kAlgorithms[] = {
    {Algorithm::local, "local"},
    {Algorithm::fedavg_finetune, "fedavg_finetune"},
    {Algorithm::hypcluster, "hypcluster"},
    {Algorithm::ensemble_fedavg, "ensemble_fedavg"},
    {Algorithm::knn_per, "knn_per"},
    {Algorithm::ditto, "ditto"},
    {Algorithm::mocha, "mocha"},
};

bool is_stateful(Algorithm a) { return a == Algorithm::ditto || a == Algorithm::mocha; }

// ---------------------------------------------------------------------------
// JSON reading with unknown-key rejection

void allow_keys(const json& j, std::initializer_list<std::string_view> keys, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
      throw ConfigError("unknown key '" + k + "' in " + section);
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& section) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!it->is_number_integer() || it->get<std::int64_t>() < 0) {
        throw ConfigError(section + "." + key + " must be a nonnegative integer");
      }
      out = static_cast<T>(it->get<std::int64_t>());
    } else if constexpr (std::is_same_v<T, int>) {
      if (!it->is_number_integer()) throw ConfigError(section + "." + key + " must be an integer");
      out = it->get<int>();
    } else {
      out = it->get<T>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

std::string read_string(const json& j, const char* key, const std::string& section, std::string fallback) {
  read(j, key, fallback, section);
  return fallback;
}

std::array<double, 3> read_fractions(const json& j, const char* key, std::array<double, 3> fallback,
                                     const std::string& section) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  if (!it->is_array() || it->size() != 3) throw ConfigError(section + "." + key + " must list 3 fractions");
  for (std::size_t i = 0; i < 3; ++i) fallback[i] = (*it)[i].get<double>();
  return fallback;
}

SynthSpec parse_synth(const json& j) {
  const std::string sec = "dataset.synthetic";
  allow_keys(j,
             {"kind", "task", "num_clients", "examples_mean", "examples_spread", "feature_dim", "num_classes",
              "num_planted_clusters", "heterogeneity", "label_noise", "noise_std", "seed"},
             sec);
  SynthSpec s;
  s.kind = parse_synth_kind(read_string(j, "kind", sec, std::string(to_string(s.kind))));
  s.task = parse_task_kind(read_string(j, "task", sec, std::string(to_string(s.task))));
  read(j, "num_clients", s.num_clients, sec);
  read(j, "examples_mean", s.examples_mean, sec);
  read(j, "examples_spread", s.examples_spread, sec);
  read(j, "feature_dim", s.feature_dim, sec);
  read(j, "num_classes", s.num_classes, sec);
  read(j, "num_planted_clusters", s.num_planted_clusters, sec);
  read(j, "heterogeneity", s.heterogeneity, sec);
  read(j, "label_noise", s.label_noise, sec);
  read(j, "noise_std", s.noise_std, sec);
  if (s.task == TaskKind::regression && !j.contains("num_classes")) s.num_classes = 1;
  return s;
}

Grid parse_grid(const json& j) {
  allow_keys(j, {"axes", "selection_metric", "selection_scope"}, "tuning");
  Grid g;
  if (j.contains("selection_metric")) g.selection_metric = parse_selection_metric(j["selection_metric"].get<std::string>());
  if (j.contains("selection_scope")) g.selection_scope = parse_selection_scope(j["selection_scope"].get<std::string>());
  if (!j.contains("axes") || !j["axes"].is_array()) throw ConfigError("tuning.axes must be a list");
  for (const auto& a : j["axes"]) {
    allow_keys(a, {"name", "values"}, "tuning.axes[]");
    GridAxis axis;
    axis.name = a.at("name").get<std::string>();
    for (const auto& v : a.at("values")) {
      if (v.is_string()) {
        axis.values.emplace_back(v.get<std::string>());
      } else if (v.is_number()) {
        axis.values.emplace_back(v.get<double>());
      } else {
        throw ConfigError("tuning axis '" + axis.name + "' values must be numbers or strings");
      }
    }
    g.axes.push_back(std::move(axis));
  }
  return g;
}

const std::set<std::string, std::less<>>& known_axes() {
  static const std::set<std::string, std::less<>> axes{
      "finetune_lr",  "finetune_epochs", "finetune_scope", "client_lr",         "server_lr",
      "total_rounds", "train_epochs",    "l2_reg",         "hypcluster_k",      "knn_coefficient",
      "knn_k",        "ditto_lambda",    "ditto_personal_lr", "mocha_lambda",   "mocha_lr",
      "mocha_outers"};
  return axes;
}

template <typename F>
void collect(std::vector<std::string>& report, F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    report.emplace_back(e.what());
  }
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json stats_json(const SummaryStats& s) {
  json j{{"mean", s.mean}, {"std", s.std}, {"n_clients", s.n_clients}};
  j["pct_hurt"] = s.pct_hurt ? json(*s.pct_hurt) : json(nullptr);
  j["pct_helped"] = s.pct_helped ? json(*s.pct_helped) : json(nullptr);
  j["pct_unchanged"] = s.pct_unchanged ? json(*s.pct_unchanged) : json(nullptr);
  return j;
}

SummaryStats stats_from_json(const json& j) {
  SummaryStats s;
  s.mean = j.at("mean").get<double>();
  s.std = j.at("std").get<double>();
  s.n_clients = j.at("n_clients").get<std::size_t>();
  if (!j.at("pct_hurt").is_null()) s.pct_hurt = j["pct_hurt"].get<double>();
  if (!j.at("pct_helped").is_null()) s.pct_helped = j["pct_helped"].get<double>();
  if (!j.at("pct_unchanged").is_null()) s.pct_unchanged = j["pct_unchanged"].get<double>();
  return s;
}

json multi_json(const MultiRunSummary& m) {
  json j{{"runs", m.runs},
         {"mean", {{"mean", m.mean.mean}, {"std", m.mean.std}}},
         {"client_std", {{"mean", m.client_std.mean}, {"std", m.client_std.std}}}};
  j["pct_hurt"] = m.pct_hurt ? json{{"mean", m.pct_hurt->mean}, {"std", m.pct_hurt->std}} : json(nullptr);
  return j;
}

std::string run_id(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

}  // namespace

std::string_view to_string(Algorithm a) {
  for (const auto& [v, name] : kAlgorithms) {
    if (v == a) return name;
  }
  return "?";
}

Algorithm parse_algorithm(std::string_view s) {
  for (const auto& [v, name] : kAlgorithms) {
    if (name == s) return v;
  }
  throw ConfigError("unknown algorithm: '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Parsing

ExperimentConfig parse_experiment_config(const json& j, const std::filesystem::path& base_dir) {
  allow_keys(j,
             {"name", "dataset", "regime", "split", "model", "algorithm", "engine", "tuning", "seeds", "output_dir",
              "checks"},
             "config");
  ExperimentConfig cfg;
  cfg.name = read_string(j, "name", "config", cfg.name);

  if (!j.contains("dataset")) throw ConfigError("config.dataset is required");
  const json& d = j["dataset"];
  allow_keys(d, {"synthetic", "csv"}, "dataset");
  if (d.contains("synthetic") == d.contains("csv")) {
    throw ConfigError("dataset needs exactly one of 'synthetic' or 'csv'");
  }
  if (d.contains("synthetic")) {
    SyntheticSource src;
    src.spec = parse_synth(d["synthetic"]);
    if (d["synthetic"].contains("seed")) {
      std::uint64_t seed = 0;
      read(d["synthetic"], "seed", seed, "dataset.synthetic");
      src.seed = seed;
    }
    cfg.dataset = src;
  } else {
    const json& c = d["csv"];
    const std::string sec = "dataset.csv";
    allow_keys(c, {"path", "client_col", "label_col", "feature_cols", "task", "standardize"}, sec);
    CsvSource src;
    if (!c.contains("path")) throw ConfigError("dataset.csv.path is required");
    src.path = c["path"].get<std::string>();
    if (src.path.is_relative() && !base_dir.empty()) src.path = base_dir / src.path;
    read(c, "client_col", src.schema.client_col, sec);
    read(c, "label_col", src.schema.label_col, sec);
    read(c, "feature_cols", src.schema.feature_cols, sec);
    read(c, "standardize", src.schema.standardize, sec);
    src.schema.task = parse_task_kind(read_string(c, "task", sec, "classification"));
    cfg.dataset = src;
  }

  cfg.regime = parse_regime(read_string(j, "regime", "config", std::string(to_string(cfg.regime))));
  cfg.split.regime = cfg.regime;
  if (j.contains("split")) {
    const json& s = j["split"];
    allow_keys(s, {"client_fractions", "local_fractions", "personalization_fraction", "sort_by_time"}, "split");
    cfg.split.client_fractions = read_fractions(s, "client_fractions", cfg.split.client_fractions, "split");
    cfg.split.local_fractions = read_fractions(s, "local_fractions", cfg.split.local_fractions, "split");
    read(s, "personalization_fraction", cfg.split.personalization_fraction, "split");
    read(s, "sort_by_time", cfg.split.sort_by_time, "split");
  }

  if (!j.contains("model")) throw ConfigError("config.model is required");
  {
    const json& m = j["model"];
    allow_keys(m, {"family", "hidden_dim", "l2_reg"}, "model");
    if (!m.contains("family")) throw ConfigError("model.family is required");
    cfg.model.family = parse_model_family(m["family"].get<std::string>());
    read(m, "hidden_dim", cfg.model.hidden_dim, "model");
    read(m, "l2_reg", cfg.model.l2_reg, "model");
  }

  if (!j.contains("algorithm")) throw ConfigError("config.algorithm is required");
  {
    const json& a = j["algorithm"];
    allow_keys(a, {"name", "finetune", "hypcluster", "ensemble", "knn", "ditto", "mocha"}, "algorithm");
    if (!a.contains("name")) throw ConfigError("algorithm.name is required");
    cfg.algorithm = parse_algorithm(a["name"].get<std::string>());
    if (a.contains("finetune")) {
      const json& f = a["finetune"];
      const std::string sec = "algorithm.finetune";
      allow_keys(f, {"lr", "max_epochs", "scope", "batch_size", "select_epoch"}, sec);
      read(f, "lr", cfg.finetune.lr, sec);
      read(f, "max_epochs", cfg.finetune.max_epochs, sec);
      read(f, "batch_size", cfg.finetune.batch_size, sec);
      read(f, "select_epoch", cfg.select_finetune_epoch, sec);
      if (f.contains("scope")) cfg.finetune.scope = parse_finetune_scope(f["scope"].get<std::string>());
    }
    if (a.contains("hypcluster")) {
      const json& h = a["hypcluster"];
      const std::string sec = "algorithm.hypcluster";
      allow_keys(h, {"k", "warmstart", "warmstart_rounds"}, sec);
      read(h, "k", cfg.hypcluster.k, sec);
      read(h, "warmstart", cfg.hypcluster.warmstart, sec);
      read(h, "warmstart_rounds", cfg.hypcluster.warmstart_rounds, sec);
    }
    if (a.contains("ensemble")) {
      const json& e = a["ensemble"];
      allow_keys(e, {"k", "rounds_each"}, "algorithm.ensemble");
      read(e, "k", cfg.ensemble.k, "algorithm.ensemble");
      read(e, "rounds_each", cfg.ensemble.rounds_each, "algorithm.ensemble");
    }
    if (a.contains("knn")) {
      const json& k = a["knn"];
      allow_keys(k, {"k_neighbors", "coefficient"}, "algorithm.knn");
      read(k, "k_neighbors", cfg.knn.k_neighbors, "algorithm.knn");
      read(k, "coefficient", cfg.knn.coefficient, "algorithm.knn");
    }
    if (a.contains("ditto")) {
      const json& t = a["ditto"];
      allow_keys(t, {"lambda", "personal_lr", "personal_epochs"}, "algorithm.ditto");
      read(t, "lambda", cfg.ditto.lambda, "algorithm.ditto");
      read(t, "personal_lr", cfg.ditto.personal_lr, "algorithm.ditto");
      read(t, "personal_epochs", cfg.ditto.personal_epochs, "algorithm.ditto");
    }
    if (a.contains("mocha")) {
      const json& m = a["mocha"];
      const std::string sec = "algorithm.mocha";
      allow_keys(m, {"lambda", "outers", "inner_epochs", "lr", "batch_size", "update_omega"}, sec);
      read(m, "lambda", cfg.mocha.lambda, sec);
      read(m, "outers", cfg.mocha.outers, sec);
      read(m, "inner_epochs", cfg.mocha.inner_epochs, sec);
      read(m, "lr", cfg.mocha.lr, sec);
      read(m, "batch_size", cfg.mocha.batch_size, sec);
      read(m, "update_omega", cfg.mocha.update_omega, sec);
    }
  }

  if (j.contains("engine")) {
    const json& e = j["engine"];
    const std::string sec = "engine";
    allow_keys(e,
               {"total_rounds", "clients_per_round", "client_lr", "train_batch_size", "train_epochs", "weighting",
                "rounds_per_evaluation", "rounds_per_checkpoint", "workers", "server"},
               sec);
    read(e, "total_rounds", cfg.engine.total_rounds, sec);
    read(e, "clients_per_round", cfg.engine.clients_per_round, sec);
    read(e, "client_lr", cfg.engine.client_lr, sec);
    read(e, "train_batch_size", cfg.engine.train_batch_size, sec);
    read(e, "train_epochs", cfg.engine.train_epochs, sec);
    read(e, "rounds_per_evaluation", cfg.engine.rounds_per_evaluation, sec);
    read(e, "rounds_per_checkpoint", cfg.engine.rounds_per_checkpoint, sec);
    read(e, "workers", cfg.engine.workers, sec);
    if (e.contains("weighting")) cfg.engine.weighting = parse_weighting(e["weighting"].get<std::string>());
    if (e.contains("server")) {
      const json& s = e["server"];
      allow_keys(s, {"kind", "lr", "beta1", "beta2", "epsilon", "momentum"}, "engine.server");
      if (s.contains("kind")) cfg.engine.server.kind = parse_server_opt_kind(s["kind"].get<std::string>());
      read(s, "lr", cfg.engine.server.lr, "engine.server");
      read(s, "beta1", cfg.engine.server.beta1, "engine.server");
      read(s, "beta2", cfg.engine.server.beta2, "engine.server");
      read(s, "epsilon", cfg.engine.server.epsilon, "engine.server");
      read(s, "momentum", cfg.engine.server.momentum, "engine.server");
    }
  }

  if (j.contains("tuning")) cfg.tuning = parse_grid(j["tuning"]);

  if (j.contains("seeds")) {
    if (!j["seeds"].is_array()) throw ConfigError("config.seeds must be a list");
    cfg.seeds.clear();
    for (const auto& s : j["seeds"]) {
      if (!s.is_number_integer() || s.get<std::int64_t>() < 0) throw ConfigError("seeds must be nonnegative integers");
      cfg.seeds.push_back(s.get<std::uint64_t>());
    }
  }
  if (j.contains("output_dir")) {
    cfg.output_dir = j["output_dir"].get<std::string>();
    if (cfg.output_dir.is_relative() && !base_dir.empty()) cfg.output_dir = base_dir / cfg.output_dir;
  }
  if (j.contains("checks")) {
    for (const auto& c : j["checks"]) {
      allow_keys(c, {"metric", "min", "max"}, "checks[]");
      MetricCheck mc;
      mc.metric = c.at("metric").get<std::string>();
      if (c.contains("min")) mc.min = c["min"].get<double>();
      if (c.contains("max")) mc.max = c["max"].get<double>();
      cfg.checks.push_back(std::move(mc));
    }
  }
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_experiment_config(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Validation

namespace {

std::size_t split_floor(double frac, std::size_t n) {
  return static_cast<std::size_t>(std::floor(frac * static_cast<double>(n) + 1e-9));
}

}  // namespace

std::vector<std::string> validate_config(const ExperimentConfig& cfg) {
  std::vector<std::string> report;
  const std::string algo(to_string(cfg.algorithm));

  if (is_stateful(cfg.algorithm) && cfg.regime != Regime::cross_silo) {
    report.push_back("algorithm '" + algo +
                     "' is stateful (per-client variables persist across rounds) and requires regime cross_silo");
  }

  TaskKind task = TaskKind::classification;
  std::size_t num_classes = 2;
  if (const auto* syn = std::get_if<SyntheticSource>(&cfg.dataset)) {
    task = syn->spec.task;
    num_classes = syn->spec.num_classes;
    if (syn->spec.num_clients == 0) report.emplace_back("dataset.synthetic.num_clients must be positive");
    if (syn->spec.feature_dim == 0) report.emplace_back("dataset.synthetic.feature_dim must be positive");
    if (cfg.regime == Regime::cross_device && cfg.engine.clients_per_round > 0) {
      const std::size_t n = syn->spec.num_clients;
      const std::size_t reserved =
          split_floor(cfg.split.client_fractions[1], n) + split_floor(cfg.split.client_fractions[2], n);
      const std::size_t n_train = reserved < n ? n - reserved : 0;
      if (cfg.engine.clients_per_round > n_train) {
        report.push_back("engine.clients_per_round " + std::to_string(cfg.engine.clients_per_round) +
                         " exceeds the " + std::to_string(n_train) + " train clients of the cross_device split");
      }
    }
  } else {
    const auto& csv = std::get<CsvSource>(cfg.dataset);
    task = csv.schema.task;
    num_classes = task == TaskKind::regression ? 1 : 2;
    if (!std::filesystem::exists(csv.path)) report.push_back("dataset.csv.path does not exist: " + csv.path.string());
  }

  if (task_of(cfg.model.family) != task) {
    report.push_back("model.family " + std::string(to_string(cfg.model.family)) + " does not fit a " +
                     std::string(to_string(task)) + " dataset");
  } else {
    collect(report, [&] {
      ArchDescriptor a = cfg.model;
      a.input_dim = 1;
      a.num_classes = task == TaskKind::regression ? 1 : num_classes;
      validate_arch(a);
    });
  }

  collect(report, [&] { validate_engine_config(cfg.engine); });
  collect(report, [&] { validate_finetune_config(cfg.finetune); });
  if (cfg.algorithm == Algorithm::hypcluster) {
    if (cfg.hypcluster.k < 1) report.emplace_back("algorithm.hypcluster.k must be >= 1");
    if (cfg.hypcluster.warmstart && cfg.hypcluster.warmstart_rounds < 1) {
      report.emplace_back("algorithm.hypcluster.warmstart_rounds must be >= 1 when warmstart is on");
    }
  }
  if (cfg.algorithm == Algorithm::ensemble_fedavg) {
    if (cfg.ensemble.k < 1) report.emplace_back("algorithm.ensemble.k must be >= 1");
    if (cfg.ensemble.rounds_each < 0) report.emplace_back("algorithm.ensemble.rounds_each must be >= 0");
  }
  if (cfg.algorithm == Algorithm::knn_per) collect(report, [&] { validate_knn_config(cfg.knn); });
  if (cfg.algorithm == Algorithm::ditto) collect(report, [&] { validate_ditto_config(cfg.ditto); });
  if (cfg.algorithm == Algorithm::mocha) {
    collect(report, [&] { validate_mocha_config(cfg.mocha); });
    if (!is_linear_family(cfg.model.family)) {
      report.emplace_back("algorithm 'mocha' supports linear_regression and linear_svm only");
    }
  }

  {
    double sum = 0.0;
    for (const double f : cfg.regime == Regime::cross_device ? cfg.split.client_fractions : cfg.split.local_fractions) {
      if (!(f >= 0.0)) report.emplace_back("split fractions must be nonnegative");
      sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) report.emplace_back("split fractions must sum to 1");
    if (cfg.regime == Regime::cross_device &&
        !(cfg.split.personalization_fraction > 0.0 && cfg.split.personalization_fraction < 1.0)) {
      report.emplace_back("split.personalization_fraction must be in (0,1)");
    }
  }

  if (cfg.seeds.empty()) report.emplace_back("config.seeds must not be empty");
  {
    std::set<std::uint64_t> seen;
    for (const auto s : cfg.seeds) {
      if (!seen.insert(s).second) report.push_back("seed " + std::to_string(s) + " is listed twice");
    }
  }

  if (cfg.tuning) {
    collect(report, [&] { validate_grid(*cfg.tuning); });
    for (const auto& axis : cfg.tuning->axes) {
      if (!known_axes().contains(axis.name)) report.push_back("unknown tuning axis '" + axis.name + "'");
    }
    if (cfg.tuning->selection_scope == SelectionScope::per_client && cfg.algorithm != Algorithm::fedavg_finetune &&
        cfg.algorithm != Algorithm::local) {
      report.emplace_back("per_client tuning applies to fine-tuning algorithms (local, fedavg_finetune) only");
    }
    if (cfg.tuning->selection_metric == SelectionMetric::mean_accuracy && task == TaskKind::regression) {
      report.emplace_back("tuning.selection_metric mean_accuracy does not fit a regression task");
    }
    if (cfg.tuning->selection_metric == SelectionMetric::mean_mse && task == TaskKind::classification) {
      report.emplace_back("tuning.selection_metric mean_mse does not fit a classification task");
    }
  }
  return report;
}

std::vector<std::string> validate_config_file(const std::filesystem::path& path) {
  try {
    return validate_config(load_experiment_config(path));
  } catch (const std::exception& e) {
    return {e.what()};
  }
}

ExperimentConfig apply_overrides(const ExperimentConfig& cfg, const GridPoint& point) {
  ExperimentConfig out = cfg;
  for (const auto& [name, value] : point.values) {
    if (name == "finetune_scope") {
      out.finetune.scope = parse_finetune_scope(format_grid_value(value));
      continue;
    }
    const double v = point.number(name);
    if (name == "finetune_lr") {
      out.finetune.lr = v;
    } else if (name == "finetune_epochs") {
      out.finetune.max_epochs = static_cast<int>(v);
      out.select_finetune_epoch = false;
    } else if (name == "client_lr") {
      out.engine.client_lr = v;
    } else if (name == "server_lr") {
      out.engine.server.lr = v;
    } else if (name == "total_rounds") {
      out.engine.total_rounds = static_cast<int>(v);
    } else if (name == "train_epochs") {
      out.engine.train_epochs = static_cast<int>(v);
    } else if (name == "l2_reg") {
      out.model.l2_reg = v;
    } else if (name == "hypcluster_k") {
      out.hypcluster.k = static_cast<std::size_t>(v);
    } else if (name == "knn_coefficient") {
      out.knn.coefficient = v;
    } else if (name == "knn_k") {
      out.knn.k_neighbors = static_cast<std::size_t>(v);
    } else if (name == "ditto_lambda") {
      out.ditto.lambda = v;
    } else if (name == "ditto_personal_lr") {
      out.ditto.personal_lr = v;
    } else if (name == "mocha_lambda") {
      out.mocha.lambda = v;
    } else if (name == "mocha_lr") {
      out.mocha.lr = v;
    } else if (name == "mocha_outers") {
      out.mocha.outers = static_cast<int>(v);
    } else {
      throw ConfigError("unknown tuning axis '" + name + "'");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Running

FederatedDataset build_dataset(const ExperimentConfig& cfg, std::uint64_t run_seed) {
  FederatedDataset raw;
  if (const auto* syn = std::get_if<SyntheticSource>(&cfg.dataset)) {
    SynthSpec spec = syn->spec;
    spec.seed = syn->seed.value_or(run_seed);
    raw = generate_synthetic(spec).dataset;
  } else {
    const auto& csv = std::get<CsvSource>(cfg.dataset);
    raw = load_csv_silo(csv.path, csv.schema);
  }
  SplitSpec split = cfg.split;
  split.regime = cfg.regime;
  split.seed = run_seed;
  return apply_split(raw, split);
}

ArchDescriptor resolve_arch(const ExperimentConfig& cfg, const FederatedDataset& ds) {
  ArchDescriptor a = cfg.model;
  a.input_dim = ds.feature_dim;
  a.num_classes = ds.task == TaskKind::regression ? 1 : ds.num_classes;
  validate_arch(a);
  return a;
}

std::vector<ClientSplit> evaluation_clients(const FederatedDataset& ds, Regime regime, bool validation) {
  std::vector<ClientSplit> out;
  if (regime == Regime::cross_device) {
    for (const ClientDataset* c : ds.clients_with_role(validation ? ClientRole::valid : ClientRole::test)) {
      out.push_back({c->client_id, device_split(*c)});
    }
  } else {
    for (const auto& c : ds.clients) {
      out.push_back({c.client_id, silo_split(c, validation ? SplitTag::valid : SplitTag::test)});
    }
  }
  std::sort(out.begin(), out.end(), [](const ClientSplit& a, const ClientSplit& b) { return a.client_id < b.client_id; });
  return out;
}

namespace {

FedAvgResult train_fedavg(const FederatedDataset& ds, const ArchDescriptor& arch, const EngineConfig& engine) {
  return run_fedavg(ds, arch, engine);
}

/// Per-client (lr, epochs) selection. Cross-silo clients select on their valid
/// tags; cross-device clients hold out the back half of the personalization set.
PerClientMetrics per_client_finetune(const ExperimentConfig& cfg, const FederatedDataset& ds,
                                     const std::vector<ClientSplit>& clients, const ModelParams& global,
                                     std::uint64_t seed, MetricKind kind) {
  FinetuneGrid grid;
  grid.lrs = {cfg.finetune.lr};
  grid.epochs = {cfg.finetune.max_epochs};
  grid.scope = cfg.finetune.scope;
  grid.batch_size = cfg.finetune.batch_size;
  grid.seed = seed;
  for (const auto& axis : cfg.tuning->axes) {
    if (axis.name == "finetune_lr") {
      grid.lrs.clear();
      for (const auto& v : axis.values) grid.lrs.push_back(std::get<double>(v));
    } else if (axis.name == "finetune_epochs") {
      grid.epochs.clear();
      for (const auto& v : axis.values) grid.epochs.push_back(static_cast<int>(std::get<double>(v)));
    } else if (axis.name == "finetune_scope") {
      grid.scope = parse_finetune_scope(format_grid_value(axis.values.front()));
    }
  }
  PerClientMetrics out;
  out.kind = kind;
  for (const auto& c : clients) {
    ExampleRefs select_train, select_valid;
    if (cfg.regime == Regime::cross_silo) {
      select_train = c.split.personalization;
      select_valid = ds.client(c.client_id).select(SplitTag::valid);
    } else {
      const auto half = c.split.personalization.size() / 2;
      select_train.assign(c.split.personalization.begin(), c.split.personalization.begin() + static_cast<std::ptrdiff_t>(half));
      select_valid.assign(c.split.personalization.begin() + static_cast<std::ptrdiff_t>(half), c.split.personalization.end());
      if (select_train.empty()) select_train = select_valid;
    }
    const ClientTuning choice = per_client_tune(global, select_train, select_valid, grid, kind, c.client_id);
    ClientMetricRecord r;
    r.client_id = c.client_id;
    r.n_personalization = c.split.personalization.size();
    r.n_evaluation = c.split.evaluation.size();
    r.metric_before = evaluate_metric(global, c.split.evaluation, kind);
    r.metric_after = apply_tuning(global, c.split.personalization, c.split.evaluation, choice, grid, kind, c.client_id);
    out.records.push_back(std::move(r));
  }
  return out;
}

}  // namespace

RunOutcome run_single(const ExperimentConfig& cfg, std::uint64_t seed, bool validation,
                      const std::filesystem::path& checkpoint_dir) {
  const FederatedDataset ds = build_dataset(cfg, seed);
  const ArchDescriptor arch = resolve_arch(cfg, ds);
  const MetricKind kind = ds.metric();
  EngineConfig engine = cfg.engine;
  engine.seed = seed;
  engine.checkpoint_dir = checkpoint_dir;
  if (checkpoint_dir.empty()) engine.rounds_per_checkpoint = 0;

  const std::vector<ClientSplit> clients = evaluation_clients(ds, cfg.regime, validation);
  if (clients.empty()) throw std::runtime_error("no evaluation clients after the split");

  RunOutcome out;
  out.seed = seed;
  std::vector<RoundTrace> traces;

  auto evaluate_with = [&](const Personalizer& p, const Personalizer* baseline) {
    out.per_client = personalized_metrics(clients, p, kind, baseline);
  };

  switch (cfg.algorithm) {
    case Algorithm::local:
    case Algorithm::fedavg_finetune: {
      ModelParams global;
      if (cfg.algorithm == Algorithm::local) {
        global = init_params(arch, seed);
      } else {
        FedAvgResult r = train_fedavg(ds, arch, engine);
        global = std::move(r.state.params);
        out.history = std::move(r.history);
        traces = std::move(r.traces);
      }
      FinetuneConfig ft = cfg.finetune;
      ft.seed = seed;
      const Personalizer before = global_personalizer(global, kind);
      if (!validation && cfg.tuning && cfg.tuning->selection_scope == SelectionScope::per_client) {
        out.per_client = per_client_finetune(cfg, ds, clients, global, seed, kind);
        break;
      }
      if (!validation && cfg.select_finetune_epoch) {
        std::vector<std::vector<double>> curves;
        for (const auto& c : evaluation_clients(ds, cfg.regime, true)) {
          curves.push_back(finetune_eval(global, c.split, ft, kind, c.client_id).per_epoch);
        }
        ft.max_epochs = static_cast<int>(select_best_epoch(curves, kind));
        out.finetune_epoch = static_cast<std::size_t>(ft.max_epochs);
      }
      evaluate_with(finetune_personalizer(global, ft, kind), &before);
      break;
    }
    case Algorithm::hypcluster: {
      HypClusterResult r = hypcluster_train(ds, arch, engine, cfg.hypcluster);
      traces = std::move(r.traces);
      evaluate_with(hypcluster_personalizer(r.state.models, kind), nullptr);
      break;
    }
    case Algorithm::ensemble_fedavg: {
      const int rounds = cfg.ensemble.rounds_each > 0 ? cfg.ensemble.rounds_each : engine.total_rounds;
      EnsembleResult r = ensemble_k_fedavg(ds, arch, engine, cfg.ensemble.k, rounds);
      traces = std::move(r.traces);
      evaluate_with(hypcluster_personalizer(r.models, kind), nullptr);
      break;
    }
    case Algorithm::knn_per: {
      FedAvgResult r = train_fedavg(ds, arch, engine);
      out.history = std::move(r.history);
      traces = std::move(r.traces);
      const Personalizer before = global_personalizer(r.state.params, kind);
      evaluate_with(knn_personalizer(r.state.params, cfg.knn, kind), &before);
      break;
    }
    case Algorithm::ditto: {
      DittoResult r = ditto_train(ds, arch, engine, cfg.ditto, cfg.regime);
      traces = std::move(r.traces);
      const ModelParams& global = r.state.global.params;
      out.per_client.kind = kind;
      for (const auto& c : clients) {
        const auto it = r.state.personal.find(c.client_id);
        const ModelParams& personal = it == r.state.personal.end() ? global : it->second;
        ClientMetricRecord rec;
        rec.client_id = c.client_id;
        rec.n_personalization = c.split.personalization.size();
        rec.n_evaluation = c.split.evaluation.size();
        rec.metric_before = evaluate_metric(global, c.split.evaluation, kind);
        rec.metric_after = evaluate_metric(personal, c.split.evaluation, kind);
        out.per_client.records.push_back(std::move(rec));
      }
      break;
    }
    case Algorithm::mocha: {
      MochaResult r = mocha_train(ds, arch, engine, cfg.mocha, cfg.regime);
      traces = std::move(r.traces);
      out.per_client.kind = kind;
      for (const auto& c : clients) {
        const auto it = std::find(r.state.client_ids.begin(), r.state.client_ids.end(), c.client_id);
        if (it == r.state.client_ids.end()) throw std::runtime_error("mocha has no model for " + c.client_id);
        const ModelParams& w = r.state.models[static_cast<std::size_t>(it - r.state.client_ids.begin())];
        ClientMetricRecord rec;
        rec.client_id = c.client_id;
        rec.n_personalization = c.split.personalization.size();
        rec.n_evaluation = c.split.evaluation.size();
        rec.metric_after = evaluate_metric(w, c.split.evaluation, kind);
        out.per_client.records.push_back(std::move(rec));
      }
      break;
    }
  }
  out.communication = communication_report(traces);
  out.summary = summarize(out.per_client);
  return out;
}

namespace {

std::map<std::string, double> run_metrics(const RunOutcome& r) {
  std::map<std::string, double> m;
  m["mean"] = r.summary.mean;
  m["std"] = r.summary.std;
  m["n_clients"] = static_cast<double>(r.summary.n_clients);
  if (r.summary.pct_hurt) {
    m["pct_hurt"] = *r.summary.pct_hurt;
    m["pct_helped"] = *r.summary.pct_helped;
    m["pct_unchanged"] = *r.summary.pct_unchanged;
    double before = 0.0;
    for (const auto& rec : r.per_client.records) before += *rec.metric_before;
    m["mean_before"] = before / static_cast<double>(r.per_client.records.size());
  }
  if (r.finetune_epoch) m["finetune_epoch"] = static_cast<double>(*r.finetune_epoch);
  if (!r.communication.empty()) {
    m["comm_broadcast"] = static_cast<double>(r.communication.back().cumulative_broadcast);
    m["comm_uploaded"] = static_cast<double>(r.communication.back().cumulative_uploaded);
    m["comm_total"] = static_cast<double>(r.communication.back().cumulative_total);
  }
  return m;
}

void write_atomic(const std::filesystem::path& path, const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, std::uint64_t seed_offset) {
  const std::vector<std::string> violations = validate_config(cfg);
  if (!violations.empty()) {
    std::string msg = "invalid config:";
    for (const auto& v : violations) msg += "\n  - " + v;
    throw ConfigError(msg);
  }
  std::filesystem::create_directories(cfg.output_dir);
  const std::string algo(to_string(cfg.algorithm));

  ExperimentResult result;
  for (const std::uint64_t base : cfg.seeds) {
    const std::uint64_t seed = base + seed_offset;
    const std::filesystem::path ckpt = cfg.output_dir / "checkpoints" / run_id(seed);
    if (cfg.tuning && cfg.tuning->selection_scope == SelectionScope::global) {
      GridSearchResult search = grid_search(*cfg.tuning, [&](const GridPoint& p) {
        return run_single(apply_overrides(cfg, p), seed, true).summary;
      });
      const GridPoint& best = search.points[search.best];
      RunOutcome r = run_single(apply_overrides(cfg, best), seed, false, ckpt);
      std::string desc;
      for (const auto& [name, v] : best.values) desc += (desc.empty() ? "" : ",") + name + "=" + format_grid_value(v);
      r.tuned_point = desc;
      std::ostringstream csv;
      write_grid_csv(search, csv);
      write_atomic(cfg.output_dir / ("tuning_" + run_id(seed) + ".csv"), csv.str());
      r.tuning = std::move(search);
      result.runs.push_back(std::move(r));
    } else {
      result.runs.push_back(run_single(cfg, seed, false, ckpt));
    }
  }
  if (result.runs.size() >= 2) {
    std::vector<SummaryStats> stats;
    for (const auto& r : result.runs) stats.push_back(r.summary);
    result.summary = multi_run_summary(stats);
  }

  // metrics.csv
  std::ostringstream csv;
  csv << "run_id,seed,algorithm,metric,value,round\n";
  for (const auto& r : result.runs) {
    const std::string id = run_id(r.seed);
    for (const auto& h : r.history) {
      csv << id << ',' << r.seed << ',' << algo << ",valid_metric," << fmt(h.valid_metric) << ',' << h.round << '\n';
    }
    for (const auto& [name, value] : run_metrics(r)) {
      csv << id << ',' << r.seed << ',' << algo << ',' << name << ',' << fmt(value) << ",\n";
    }
  }
  if (result.summary) {
    const auto& s = *result.summary;
    auto row = [&](const char* name, double v) { csv << "summary,," << algo << ',' << name << ',' << fmt(v) << ",\n"; };
    row("mean_mean", s.mean.mean);
    row("mean_std", s.mean.std);
    row("client_std_mean", s.client_std.mean);
    row("client_std_std", s.client_std.std);
    if (s.pct_hurt) {
      row("pct_hurt_mean", s.pct_hurt->mean);
      row("pct_hurt_std", s.pct_hurt->std);
    }
  }
  write_atomic(cfg.output_dir / "metrics.csv", csv.str());

  // per_client.json
  json per_client{{"schema_version", kReportSchemaVersion}, {"runs", json::array()}};
  for (const auto& r : result.runs) {
    json records = json::array();
    for (const auto& rec : r.per_client.records) {
      records.push_back({{"client_id", rec.client_id},
                         {"metric_before", rec.metric_before ? json(*rec.metric_before) : json(nullptr)},
                         {"metric_after", rec.metric_after},
                         {"n_personalization", rec.n_personalization},
                         {"n_evaluation", rec.n_evaluation}});
    }
    per_client["runs"].push_back({{"run_id", run_id(r.seed)},
                                  {"seed", r.seed},
                                  {"metric_kind", to_string(r.per_client.kind)},
                                  {"records", std::move(records)}});
  }
  write_atomic(cfg.output_dir / "per_client.json", per_client.dump(2) + "\n");

  // checks
  for (const auto& check : cfg.checks) {
    for (const auto& r : result.runs) {
      const auto m = run_metrics(r);
      const auto it = m.find(check.metric);
      if (it == m.end()) {
        result.failed_checks.push_back(run_id(r.seed) + ": metric '" + check.metric + "' was not reported");
        continue;
      }
      if ((check.min && it->second < *check.min) || (check.max && it->second > *check.max)) {
        result.failed_checks.push_back(run_id(r.seed) + ": " + check.metric + " = " + fmt(it->second) +
                                       " is outside the allowed range");
      }
    }
  }

  // report.json
  json report{{"schema_version", kReportSchemaVersion},
              {"name", cfg.name},
              {"algorithm", algo},
              {"regime", to_string(cfg.regime)},
              {"runs", json::array()}};
  for (const auto& r : result.runs) {
    json run{{"run_id", run_id(r.seed)}, {"seed", r.seed}, {"summary", stats_json(r.summary)}};
    run["finetune_epoch"] = r.finetune_epoch ? json(*r.finetune_epoch) : json(nullptr);
    run["tuned_point"] = r.tuned_point ? json(*r.tuned_point) : json(nullptr);
    json history = json::array();
    for (const auto& h : r.history) history.push_back({{"round", h.round}, {"valid_metric", h.valid_metric}});
    run["history"] = std::move(history);
    if (!r.communication.empty()) {
      const auto& c = r.communication.back();
      run["communication"] = {{"rounds", r.communication.size()},
                              {"broadcast", c.cumulative_broadcast},
                              {"uploaded", c.cumulative_uploaded},
                              {"total", c.cumulative_total}};
    } else {
      run["communication"] = nullptr;
    }
    report["runs"].push_back(std::move(run));
  }
  report["summary"] = result.summary ? multi_json(*result.summary) : json(nullptr);
  report["failed_checks"] = result.failed_checks;
  write_atomic(cfg.output_dir / "report.json", report.dump(2) + "\n");
  return result;
}

json summarize_dir(const std::filesystem::path& output_dir) {
  const std::filesystem::path path = output_dir / "report.json";
  std::ifstream in(path);
  if (!in) throw std::runtime_error("no report.json in " + output_dir.string());
  const json report = json::parse(in);
  const int version = report.value("schema_version", -1);
  if (version != kReportSchemaVersion) {
    throw std::runtime_error("report schema version " + std::to_string(version) + " does not match " +
                             std::to_string(kReportSchemaVersion));
  }
  std::vector<SummaryStats> stats;
  for (const auto& r : report.at("runs")) stats.push_back(stats_from_json(r.at("summary")));
  json out{{"name", report.at("name")}, {"algorithm", report.at("algorithm")}, {"runs", stats.size()}};
  json per_run = json::array();
  for (std::size_t i = 0; i < stats.size(); ++i) {
    per_run.push_back({{"run_id", report["runs"][i]["run_id"]}, {"summary", stats_json(stats[i])}});
  }
  out["per_run"] = std::move(per_run);
  out["summary"] = stats.size() >= 2 ? multi_json(multi_run_summary(stats)) : json(nullptr);
  return out;
}

}  // namespace pfl
