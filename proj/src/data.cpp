#include "pfl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "pfl/models.hpp"
#include "pfl/rng.hpp"

namespace pfl {

namespace {

// Sharpens the generating models so labels sit well away from the decision
// boundary relative to the input noise scale.
constexpr double kSignalScale = 3.0;
constexpr double kFractionEps = 1e-9;

std::string client_name(std::size_t index, std::size_t total) {
  const std::size_t width = std::to_string(total > 0 ? total - 1 : 0).size();
  std::string digits = std::to_string(index);
  return "client_" + std::string(width > digits.size() ? width - digits.size() : 0, '0') + digits;
}

std::size_t floor_count(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + kFractionEps));
}

void check_fractions(const std::array<double, 3>& f, std::string_view what) {
  for (const double v : f) {
    if (!(v >= 0.0)) throw ConfigError(std::string(what) + ": fractions must be nonnegative");
  }
  if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) throw ConfigError(std::string(what) + ": fractions must sum to 1");
  if (f[1] <= 0.0 || f[2] <= 0.0) throw ConfigError(std::string(what) + ": valid and test fractions must be positive");
}

ArchDescriptor oracle_arch(const SynthSpec& spec) {
  ArchDescriptor arch;
  arch.input_dim = spec.feature_dim;
  if (spec.task == TaskKind::classification) {
    arch.family = ModelFamily::softmax_classifier;
    arch.num_classes = spec.num_classes;
  } else {
    arch.family = ModelFamily::linear_regression;
    arch.num_classes = 1;
  }
  return arch;
}

std::vector<double> gaussian_vector(Rng& rng, std::size_t n, double scale) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * standard_normal(rng);
  return v;
}

double label_from(const ModelParams& oracle, const std::vector<double>& x, const SynthSpec& spec, Rng& rng) {
  const Prediction pred = predict(oracle, x);
  if (spec.task == TaskKind::regression) return pred.value + spec.noise_std * standard_normal(rng);
  if (spec.label_noise > 0.0 && uniform01(rng) < spec.label_noise) {
    return static_cast<double>(uniform_index(rng, spec.num_classes));
  }
  return pred.label;
}

std::size_t draw_count(const SynthSpec& spec, Rng& rng) {
  const auto spread = static_cast<std::int64_t>(spec.examples_spread);
  const std::int64_t offset =
      spread > 0 ? static_cast<std::int64_t>(uniform_index(rng, static_cast<std::uint64_t>(2 * spread + 1))) - spread
                 : 0;
  return static_cast<std::size_t>(std::max<std::int64_t>(2, static_cast<std::int64_t>(spec.examples_mean) + offset));
}

void validate_synth(const SynthSpec& spec) {
  if (spec.num_clients == 0) throw ConfigError("synthetic: num_clients must be positive");
  if (spec.feature_dim == 0) throw ConfigError("synthetic: feature_dim must be positive");
  if (spec.examples_mean < 2) throw ConfigError("synthetic: examples_mean must be at least 2");
  if (!(spec.heterogeneity >= 0.0)) throw ConfigError("synthetic: heterogeneity must be nonnegative");
  if (!(spec.label_noise >= 0.0 && spec.label_noise <= 1.0)) throw ConfigError("synthetic: label_noise must be in [0,1]");
  if (spec.task == TaskKind::classification && spec.num_classes < 2) {
    throw ConfigError("synthetic: classification needs num_classes >= 2");
  }
  if (spec.kind == SynthKind::planted_clusters && spec.num_planted_clusters == 0) {
    throw ConfigError("synthetic: num_planted_clusters must be positive");
  }
  if (spec.kind == SynthKind::label_skew && spec.task != TaskKind::classification) {
    throw ConfigError("synthetic: label_skew requires a classification task");
  }
}

}  // namespace

std::string_view to_string(SynthKind k) {
  switch (k) {
    case SynthKind::planted_clusters:
      return "planted_clusters";
    case SynthKind::label_skew:
      return "label_skew";
    case SynthKind::local_shift:
      return "local_shift";
  }
  return "unknown";
}

SynthKind parse_synth_kind(std::string_view s) {
  if (s == "planted_clusters") return SynthKind::planted_clusters;
  if (s == "label_skew") return SynthKind::label_skew;
  if (s == "local_shift") return SynthKind::local_shift;
  throw ConfigError("unknown synthetic kind: '" + std::string(s) + "'");
}

SyntheticDataset generate_synthetic(const SynthSpec& spec) {
  validate_synth(spec);
  SyntheticDataset out;
  FederatedDataset& ds = out.dataset;
  ds.task = spec.task;
  ds.feature_dim = spec.feature_dim;
  ds.num_classes = spec.task == TaskKind::classification ? spec.num_classes : 1;

  const ArchDescriptor arch = oracle_arch(spec);
  const std::size_t weight_count = arch.family == ModelFamily::softmax_classifier
                                       ? spec.num_classes * spec.feature_dim
                                       : spec.feature_dim;

  Rng global = make_rng(spec.seed, hash_string("synthetic/global"));
  const std::vector<double> shared = gaussian_vector(global, weight_count, 1.0);

  const std::size_t clusters = spec.kind == SynthKind::planted_clusters ? spec.num_planted_clusters : 1;
  if (spec.kind == SynthKind::planted_clusters) {
    // Cluster-specific directions are centered so that with two clusters
    // they are antipodal.
    std::vector<std::vector<double>> specific;
    std::vector<double> mean(weight_count, 0.0);
    for (std::size_t c = 0; c < clusters; ++c) {
      specific.push_back(gaussian_vector(global, weight_count, 1.0));
      for (std::size_t i = 0; i < weight_count; ++i) mean[i] += specific.back()[i] / static_cast<double>(clusters);
    }
    for (std::size_t c = 0; c < clusters; ++c) {
      ModelParams oracle = zero_params(arch);
      for (std::size_t i = 0; i < weight_count; ++i) {
        const double dir = clusters > 1 ? specific[c][i] - mean[i] : specific[c][i];
        oracle.values[i] = kSignalScale * (shared[i] + spec.heterogeneity * dir);
      }
      out.oracles.push_back(std::move(oracle));
    }
  } else {
    ModelParams oracle = zero_params(arch);
    for (std::size_t i = 0; i < weight_count; ++i) oracle.values[i] = kSignalScale * shared[i];
    out.oracles.push_back(std::move(oracle));
  }

  // label_skew: shared class means.
  std::vector<std::vector<double>> class_means;
  if (spec.kind == SynthKind::label_skew) {
    for (std::size_t c = 0; c < spec.num_classes; ++c) class_means.push_back(gaussian_vector(global, spec.feature_dim, 2.0));
  }

  for (std::size_t k = 0; k < spec.num_clients; ++k) {
    ClientDataset client;
    client.client_id = client_name(k, spec.num_clients);
    Rng rng = make_rng(spec.seed, hash_string("synthetic/client"), hash_string(client.client_id));
    const int cluster = static_cast<int>(k % clusters);
    out.cluster_of[client.client_id] = cluster;
    const std::size_t n = draw_count(spec, rng);
    const ModelParams& oracle = out.oracles[static_cast<std::size_t>(cluster)];

    std::vector<double> prior;
    std::vector<double> shift;
    if (spec.kind == SynthKind::label_skew) {
      prior.assign(spec.num_classes, 1.0 / static_cast<double>(spec.num_classes));
      if (spec.heterogeneity > 0.0) {
        std::gamma_distribution<double> gamma(1.0 / spec.heterogeneity, 1.0);
        double total = 0.0;
        for (double& p : prior) total += (p = gamma(rng));
        if (total > 0.0) {
          for (double& p : prior) p /= total;
        } else {
          prior.assign(spec.num_classes, 1.0 / static_cast<double>(spec.num_classes));
        }
      }
    } else if (spec.kind == SynthKind::local_shift) {
      shift = gaussian_vector(rng, spec.feature_dim, spec.heterogeneity);
    }

    for (std::size_t i = 0; i < n; ++i) {
      Example e;
      e.t = static_cast<std::int64_t>(i);
      e.x = gaussian_vector(rng, spec.feature_dim, 1.0);
      switch (spec.kind) {
        case SynthKind::planted_clusters:
          e.y = label_from(oracle, e.x, spec, rng);
          break;
        case SynthKind::local_shift:
          for (std::size_t j = 0; j < spec.feature_dim; ++j) e.x[j] += shift[j];
          e.y = label_from(oracle, e.x, spec, rng);
          break;
        case SynthKind::label_skew: {
          const double u = uniform01(rng);
          std::size_t cls = 0;
          double cdf = prior[0];
          while (cls + 1 < prior.size() && u >= cdf) cdf += prior[++cls];
          for (std::size_t j = 0; j < spec.feature_dim; ++j) e.x[j] += class_means[cls][j];
          e.y = static_cast<double>(cls);
          break;
        }
      }
      client.examples.push_back(std::move(e));
    }
    ds.clients.push_back(std::move(client));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto first = cell.find_first_not_of(" \t\r\"");
    const auto last = cell.find_last_not_of(" \t\r\"");
    cells.push_back(first == std::string::npos ? "" : cell.substr(first, last - first + 1));
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_number(const std::string& cell, std::size_t line_no, const std::string& column) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(cell, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != cell.size()) {
    throw std::runtime_error("csv line " + std::to_string(line_no) + ", column '" + column + "': non-numeric cell '" +
                             cell + "'");
  }
  return v;
}

}  // namespace

FederatedDataset load_csv_silo(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open csv file: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("csv file has no header: " + path.string());
  const std::vector<std::string> header = split_csv_line(line);

  auto column_index = [&header](const std::string& name) -> std::size_t {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw std::runtime_error("csv is missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t client_idx = column_index(schema.client_col);
  const std::size_t label_idx = column_index(schema.label_col);
  std::vector<std::size_t> feature_idx;
  if (schema.feature_cols.empty()) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i != client_idx && i != label_idx) feature_idx.push_back(i);
    }
  } else {
    for (const auto& name : schema.feature_cols) feature_idx.push_back(column_index(name));
  }
  if (feature_idx.empty()) throw std::runtime_error("csv has no feature columns");

  FederatedDataset ds;
  ds.task = schema.task;
  ds.feature_dim = feature_idx.size();
  std::map<std::string, std::size_t> slot;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw std::runtime_error("csv line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                               " cells, got " + std::to_string(cells.size()));
    }
    Example e;
    e.x.reserve(feature_idx.size());
    for (const std::size_t i : feature_idx) e.x.push_back(parse_number(cells[i], line_no, header[i]));
    e.y = parse_number(cells[label_idx], line_no, header[label_idx]);
    const std::string& id = cells[client_idx];
    if (id.empty()) throw std::runtime_error("csv line " + std::to_string(line_no) + ": empty client id");
    auto [it, inserted] = slot.try_emplace(id, ds.clients.size());
    if (inserted) ds.clients.push_back(ClientDataset{id, {}, {}});
    ds.clients[it->second].examples.push_back(std::move(e));
  }
  if (ds.clients.empty()) throw std::runtime_error("csv has no data rows: " + path.string());

  if (schema.task == TaskKind::classification) {
    // {-1, +1} labels (the usual SVM convention) map onto class indices {0, 1}.
    std::set<double> labels;
    for (const auto& c : ds.clients) {
      for (const auto& e : c.examples) labels.insert(e.y);
    }
    const bool plus_minus = labels.count(-1.0) > 0 && std::all_of(labels.begin(), labels.end(), [](double v) {
                              return v == -1.0 || v == 1.0;
                            });
    double max_label = 0.0;
    for (auto& c : ds.clients) {
      for (auto& e : c.examples) {
        if (plus_minus) e.y = e.y > 0 ? 1.0 : 0.0;
        if (e.y < 0 || std::floor(e.y) != e.y) throw std::runtime_error("csv label is not a class index");
        max_label = std::max(max_label, e.y);
      }
    }
    ds.num_classes = std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1);
  } else {
    ds.num_classes = 1;
  }

  if (schema.standardize) {
    const std::size_t d = ds.feature_dim;
    std::vector<double> mean(d, 0.0);
    std::vector<double> sq(d, 0.0);
    std::size_t count = 0;
    for (const auto& c : ds.clients) {
      for (const auto& e : c.examples) {
        ++count;
        for (std::size_t j = 0; j < d; ++j) mean[j] += e.x[j];
      }
    }
    for (double& m : mean) m /= static_cast<double>(count);
    for (const auto& c : ds.clients) {
      for (const auto& e : c.examples) {
        for (std::size_t j = 0; j < d; ++j) sq[j] += (e.x[j] - mean[j]) * (e.x[j] - mean[j]);
      }
    }
    for (auto& c : ds.clients) {
      for (auto& e : c.examples) {
        for (std::size_t j = 0; j < d; ++j) {
          const double sd = std::sqrt(sq[j] / static_cast<double>(count));
          e.x[j] = sd > 0.0 ? (e.x[j] - mean[j]) / sd : e.x[j] - mean[j];
        }
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splits

FederatedDataset split_cross_device(const FederatedDataset& ds, const SplitSpec& spec) {
  if (spec.regime != Regime::cross_device) throw ConfigError("split_cross_device called with a cross_silo spec");
  check_fractions(spec.client_fractions, "client_fractions");
  if (!(spec.personalization_fraction > 0.0 && spec.personalization_fraction < 1.0)) {
    throw ConfigError("personalization_fraction must be in (0,1)");
  }
  const std::size_t n = ds.clients.size();
  const std::size_t n_valid = floor_count(spec.client_fractions[1], n);
  const std::size_t n_test = floor_count(spec.client_fractions[2], n);
  if (n_valid == 0 || n_test == 0 || n_valid + n_test >= n) {
    throw ConfigError("cross-device split of " + std::to_string(n) + " clients leaves an empty role");
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = make_rng(spec.seed, hash_string("split/roles"));
  shuffle(order, rng);

  FederatedDataset out = ds;
  out.client_role.clear();
  for (std::size_t pos = 0; pos < n; ++pos) {
    ClientDataset& client = out.clients[order[pos]];
    client.tags.clear();
    ClientRole role = ClientRole::train;
    if (pos < n_valid) {
      role = ClientRole::valid;
    } else if (pos < n_valid + n_test) {
      role = ClientRole::test;
    }
    out.client_role[client.client_id] = role;
    if (role == ClientRole::train) continue;

    const std::size_t m = client.examples.size();
    if (m < 2) {
      throw std::invalid_argument("client '" + client.client_id + "' has fewer than 2 examples for a " +
                                  std::string(to_string(role)) + " role");
    }
    std::vector<std::size_t> idx(m);
    for (std::size_t i = 0; i < m; ++i) idx[i] = i;
    const bool has_time = std::all_of(client.examples.begin(), client.examples.end(),
                                      [](const Example& e) { return e.t.has_value(); });
    if (spec.sort_by_time && has_time) {
      std::stable_sort(idx.begin(), idx.end(),
                       [&client](std::size_t a, std::size_t b) { return *client.examples[a].t < *client.examples[b].t; });
    } else {
      Rng local = make_rng(spec.seed, hash_string("split/personalization"), hash_string(client.client_id));
      shuffle(idx, local);
    }
    std::size_t n_pers = floor_count(spec.personalization_fraction, m);
    n_pers = std::clamp<std::size_t>(n_pers, 1, m - 1);
    client.tags.assign(m, SplitTag::evaluation);
    for (std::size_t i = 0; i < n_pers; ++i) client.tags[idx[i]] = SplitTag::personalization;
  }
  return out;
}

FederatedDataset split_cross_silo(const FederatedDataset& ds, const SplitSpec& spec) {
  if (spec.regime != Regime::cross_silo) throw ConfigError("split_cross_silo called with a cross_device spec");
  check_fractions(spec.local_fractions, "local_fractions");
  FederatedDataset out = ds;
  out.client_role.clear();
  for (ClientDataset& client : out.clients) {
    out.client_role[client.client_id] = ClientRole::all;
    const std::size_t m = client.examples.size();
    if (m < 3) throw std::invalid_argument("client '" + client.client_id + "' has fewer than 3 examples");
    std::vector<std::size_t> idx(m);
    for (std::size_t i = 0; i < m; ++i) idx[i] = i;
    Rng rng = make_rng(spec.seed, hash_string("split/silo"), hash_string(client.client_id));
    shuffle(idx, rng);
    const std::size_t n_valid = std::max<std::size_t>(1, floor_count(spec.local_fractions[1], m));
    const std::size_t n_test = std::max<std::size_t>(1, floor_count(spec.local_fractions[2], m));
    client.tags.assign(m, SplitTag::train);
    for (std::size_t i = 0; i < n_valid; ++i) client.tags[idx[i]] = SplitTag::valid;
    for (std::size_t i = n_valid; i < n_valid + n_test; ++i) client.tags[idx[i]] = SplitTag::test;
  }
  return out;
}

FederatedDataset apply_split(const FederatedDataset& ds, const SplitSpec& spec) {
  return spec.regime == Regime::cross_device ? split_cross_device(ds, spec) : split_cross_silo(ds, spec);
}

std::vector<std::string> sample_clients(const std::vector<std::string>& pool, std::size_t n, int round,
                                        std::uint64_t seed) {
  if (n > pool.size()) {
    throw std::invalid_argument("cannot sample " + std::to_string(n) + " clients from a pool of " +
                                std::to_string(pool.size()));
  }
  std::vector<std::string> items = pool;
  Rng rng = make_rng(seed, hash_string("sample_clients"), static_cast<std::uint64_t>(round));
  // partial Fisher-Yates: the first n slots are the draw
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + uniform_index(rng, items.size() - i);
    std::swap(items[i], items[j]);
  }
  items.resize(n);
  return items;
}

std::vector<Example> build_ood_set(const std::vector<const ClientDataset*>& test_clients, std::size_t n,
                                   std::uint64_t seed) {
  ExampleRefs pooled;
  for (const ClientDataset* c : test_clients) {
    const ExampleRefs ev = c->select(SplitTag::evaluation);
    pooled.insert(pooled.end(), ev.begin(), ev.end());
  }
  if (n > pooled.size()) {
    throw std::invalid_argument("OOD set of " + std::to_string(n) + " exceeds the pooled evaluation size " +
                                std::to_string(pooled.size()));
  }
  Rng rng = make_rng(seed, hash_string("ood_set"));
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + uniform_index(rng, pooled.size() - i);
    std::swap(pooled[i], pooled[j]);
    out.push_back(*pooled[i]);
  }
  return out;
}

}  // namespace pfl
