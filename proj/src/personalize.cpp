#include "pfl/personalize.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pfl/kernels.hpp"
#include "pfl/models.hpp"
#include "pfl/rng.hpp"

namespace pfl {

LocalSplit device_split(const ClientDataset& client) {
  if (!client.has_tags()) throw std::invalid_argument("client '" + client.client_id + "' has no split tags");
  LocalSplit split{client.select(SplitTag::personalization), client.select(SplitTag::evaluation)};
  if (split.personalization.empty()) {
    throw std::invalid_argument("client '" + client.client_id + "' has an empty personalization set");
  }
  if (split.evaluation.empty()) {
    throw std::invalid_argument("client '" + client.client_id + "' has an empty evaluation set");
  }
  return split;
}

LocalSplit silo_split(const ClientDataset& client, SplitTag eval_tag) {
  if (!client.has_tags()) throw std::invalid_argument("client '" + client.client_id + "' has no split tags");
  LocalSplit split{client.select(SplitTag::train), client.select(eval_tag)};
  if (split.personalization.empty()) {
    throw std::invalid_argument("client '" + client.client_id + "' has no train examples");
  }
  if (split.evaluation.empty()) {
    throw std::invalid_argument("client '" + client.client_id + "' has no " + std::string(to_string(eval_tag)) +
                                " examples");
  }
  return split;
}

// ---------------------------------------------------------------------------
// Fine-tuning

std::string_view to_string(FinetuneScope s) { return s == FinetuneScope::all_layers ? "all_layers" : "last_layer"; }

FinetuneScope parse_finetune_scope(std::string_view s) {
  if (s == "all_layers") return FinetuneScope::all_layers;
  if (s == "last_layer") return FinetuneScope::last_layer;
  throw ConfigError("unknown fine-tuning scope: '" + std::string(s) + "'");
}

void validate_finetune_config(const FinetuneConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw ConfigError("finetune.lr must be positive");
  if (cfg.max_epochs < 0) throw ConfigError("finetune.max_epochs must be >= 0");
  if (cfg.batch_size == 0) throw ConfigError("finetune.batch_size must be positive");
}

std::vector<ModelParams> finetune_path(const ModelParams& start, Batch data, const FinetuneConfig& cfg,
                                       std::string_view client_id) {
  validate_finetune_config(cfg);
  if (data.empty()) throw std::invalid_argument("fine-tuning on an empty personalization set");
  std::vector<ModelParams> path;
  path.reserve(static_cast<std::size_t>(cfg.max_epochs) + 1);
  path.push_back(start);

  GradientAdjust freeze;
  if (cfg.scope == FinetuneScope::last_layer) {
    const LayerSlice last = start.last_layer();
    freeze = [last](const ModelParams&, std::span<double> grad) {
      std::fill(grad.begin(), grad.begin() + static_cast<std::ptrdiff_t>(last.offset), 0.0);
      std::fill(grad.begin() + static_cast<std::ptrdiff_t>(last.end()), grad.end(), 0.0);
    };
  }
  Rng rng = make_rng(cfg.seed, hash_string("finetune"), hash_string(client_id));
  ModelParams work = start;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    local_sgd(work, data, 1, cfg.batch_size, cfg.lr, rng, freeze);
    path.push_back(work);
  }
  return path;
}

FinetuneEval finetune_eval(const ModelParams& global, const LocalSplit& split, const FinetuneConfig& cfg,
                           MetricKind kind, std::string_view client_id) {
  if (split.evaluation.empty()) throw std::invalid_argument("fine-tuning evaluation set is empty");
  const std::vector<ModelParams> path = finetune_path(global, split.personalization, cfg, client_id);
  FinetuneEval out;
  out.per_epoch.reserve(path.size());
  for (const auto& p : path) out.per_epoch.push_back(evaluate_metric(p, split.evaluation, kind));
  out.metric_before = out.per_epoch.front();
  return out;
}

FinetuneEval finetune_eval(const ModelParams& global, const ClientDataset& client, const FinetuneConfig& cfg,
                           MetricKind kind) {
  return finetune_eval(global, device_split(client), cfg, kind, client.client_id);
}

FinetuneEval local_training_eval(const LocalSplit& split, const FinetuneConfig& cfg, const ArchDescriptor& arch,
                                 std::uint64_t seed, MetricKind kind, std::string_view client_id) {
  return finetune_eval(init_params(arch, seed), split, cfg, kind, client_id);
}

std::size_t select_best_epoch(const std::vector<std::vector<double>>& per_client, MetricKind kind) {
  if (per_client.empty() || per_client.front().empty()) throw std::invalid_argument("select_best_epoch: empty input");
  const std::size_t epochs = per_client.front().size();
  for (const auto& row : per_client) {
    if (row.size() != epochs) throw std::invalid_argument("select_best_epoch: per-client lists differ in length");
  }
  std::size_t best = 0;
  double best_mean = 0.0;
  for (std::size_t e = 0; e < epochs; ++e) {
    double sum = 0.0;
    for (const auto& row : per_client) sum += row[e];
    const double mean = sum / static_cast<double>(per_client.size());
    if (e == 0 || strictly_better(kind, mean, best_mean)) {
      best = e;
      best_mean = mean;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// HypCluster

std::size_t select_lowest_loss(const std::vector<ModelParams>& models, Batch data) {
  if (models.empty()) throw std::invalid_argument("cluster selection over zero models");
  if (data.empty()) throw std::invalid_argument("cluster selection over an empty example set");
  std::size_t best = 0;
  double best_loss = 0.0;
  for (std::size_t j = 0; j < models.size(); ++j) {
    const double l = loss(models[j], data);
    if (j == 0 || l < best_loss) {
      best = j;
      best_loss = l;
    }
  }
  return best;
}

HypClusterResult hypcluster_train(const FederatedDataset& ds, const ArchDescriptor& arch, const EngineConfig& cfg,
                                  const HypClusterConfig& hc) {
  if (hc.k < 1) throw ConfigError("hypcluster: k must be >= 1");
  if (hc.warmstart && hc.warmstart_rounds < 0) throw ConfigError("hypcluster: warmstart rounds must be >= 0");
  validate_engine_config(cfg);

  HypClusterResult result;
  HypClusterState& state = result.state;
  for (std::size_t j = 0; j < hc.k; ++j) {
    if (hc.warmstart) {
      EngineConfig warm = cfg;
      warm.seed = cfg.seed + j;
      warm.total_rounds = hc.warmstart_rounds;
      warm.rounds_per_checkpoint = 0;
      warm.rounds_per_evaluation = 0;
      FedAvgHooks hooks;
      hooks.phase = "warmstart_" + std::to_string(j);
      FedAvgResult run = run_fedavg(ds, arch, warm, hooks);
      state.models.push_back(std::move(run.state.params));
      for (auto& t : run.traces) result.traces.push_back(std::move(t));
    } else {
      state.models.push_back(init_params(arch, cfg.seed + j));
    }
    state.servers.push_back(make_server_state(cfg.server, state.models.back().size()));
  }

  const std::vector<TrainingClient> pool = training_pool(ds);
  if (cfg.total_rounds > 0 && pool.empty()) throw std::invalid_argument("hypcluster: no training clients");
  if (cfg.clients_per_round > pool.size()) throw ConfigError("clients_per_round exceeds the training clients");
  std::map<std::string, const TrainingClient*> by_id;
  for (const auto& c : pool) by_id[c.client_id] = &c;
  const auto model_size = static_cast<std::uint64_t>(state.models.front().size());

  for (int round = 0; round < cfg.total_rounds; ++round) {
    const std::vector<std::string> ids = round_participants(pool, cfg, round);
    std::vector<std::size_t> choice(ids.size());
    std::vector<ClientUpdate> updates(ids.size());
    parallel_for(ids.size(), cfg.workers, [&](std::size_t i) {
      const TrainingClient& client = *by_id.at(ids[i]);
      choice[i] = select_lowest_loss(state.models, client.data);
      Rng rng = client_rng(cfg.seed, "client_update", round, client.client_id);
      updates[i] = client_update(state.models[choice[i]], client.data, cfg.train_epochs, cfg.train_batch_size,
                                 cfg.client_lr, rng, cfg.weighting);
    });

    RoundTrace trace;
    trace.round = round;
    trace.sampled_client_ids = ids;
    trace.params_broadcast = static_cast<std::uint64_t>(hc.k) * model_size * ids.size();
    trace.params_uploaded = model_size * ids.size();
    trace.cluster_assignments.emplace();
    std::size_t zero_count = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      (*trace.cluster_assignments)[ids[i]] = static_cast<int>(choice[i]);
      if (choice[i] == 0) ++zero_count;
    }
    result.cluster0_fraction.push_back(ids.empty() ? 0.0 : static_cast<double>(zero_count) / ids.size());

    for (std::size_t j = 0; j < hc.k; ++j) {
      std::vector<std::vector<double>> deltas;
      std::vector<double> weights;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (choice[i] != j) continue;
        deltas.push_back(std::move(updates[i].delta));
        weights.push_back(updates[i].weight);
      }
      if (deltas.empty()) continue;
      std::vector<double> pseudo_grad = aggregate(deltas, weights);
      for (double& g : pseudo_grad) g = -g;
      auto [params, server] = server_apply(state.servers[j], state.models[j], pseudo_grad);
      state.models[j] = std::move(params);
      state.servers[j] = std::move(server);
    }
    result.traces.push_back(std::move(trace));
  }

  for (const auto& c : pool) {
    result.final_assignment[c.client_id] = static_cast<int>(select_lowest_loss(state.models, c.data));
  }
  return result;
}

ClusterChoice hypcluster_select(const std::vector<ModelParams>& models, const LocalSplit& split, MetricKind kind) {
  if (split.personalization.empty()) throw std::invalid_argument("hypcluster_select: empty personalization set");
  ClusterChoice choice;
  choice.cluster = select_lowest_loss(models, split.personalization);
  choice.metric = evaluate_metric(models[choice.cluster], split.evaluation, kind);
  return choice;
}

bool mode_collapse_detected(const std::vector<RoundTrace>& traces, int window) {
  if (window <= 0) return false;
  int run = 0;
  int run_cluster = -1;
  for (const auto& t : traces) {
    if (!t.cluster_assignments || t.cluster_assignments->empty()) continue;
    const int first = t.cluster_assignments->begin()->second;
    const bool unanimous = std::all_of(t.cluster_assignments->begin(), t.cluster_assignments->end(),
                                       [first](const auto& kv) { return kv.second == first; });
    if (unanimous && first == run_cluster) {
      ++run;
    } else if (unanimous) {
      run = 1;
      run_cluster = first;
    } else {
      run = 0;
      run_cluster = -1;
    }
    if (run >= window) return true;
  }
  return false;
}

double assignment_purity(const std::map<std::string, int>& learned, const std::map<std::string, int>& planted) {
  std::map<int, std::map<int, std::size_t>> table;
  std::size_t total = 0;
  for (const auto& [id, cluster] : learned) {
    const auto it = planted.find(id);
    if (it == planted.end()) continue;
    ++table[cluster][it->second];
    ++total;
  }
  if (total == 0) throw std::invalid_argument("assignment_purity: no clients in common");
  std::size_t credited = 0;
  for (const auto& [cluster, counts] : table) {
    std::size_t best = 0;
    for (const auto& [planted_cluster, n] : counts) best = std::max(best, n);
    credited += best;
  }
  return static_cast<double>(credited) / static_cast<double>(total);
}

EnsembleResult ensemble_k_fedavg(const FederatedDataset& ds, const ArchDescriptor& arch, const EngineConfig& cfg,
                                 std::size_t k, int rounds_each, bool distinct_seeds) {
  if (k < 1) throw ConfigError("ensemble: k must be >= 1");
  EnsembleResult result;
  for (std::size_t j = 0; j < k; ++j) {
    EngineConfig run_cfg = cfg;
    run_cfg.seed = distinct_seeds ? cfg.seed + j : cfg.seed;
    run_cfg.total_rounds = rounds_each;
    run_cfg.rounds_per_checkpoint = 0;
    FedAvgHooks hooks;
    hooks.phase = "ensemble_" + std::to_string(j);
    FedAvgResult run = run_fedavg(ds, arch, run_cfg, hooks);
    result.models.push_back(std::move(run.state.params));
    for (auto& t : run.traces) result.traces.push_back(std::move(t));
  }
  return result;
}

// ---------------------------------------------------------------------------
// kNN-Per

void validate_knn_config(const KnnPerConfig& cfg) {
  if (cfg.k_neighbors < 1) throw ConfigError("knn.k_neighbors must be >= 1");
  if (!(cfg.coefficient >= 0.0 && cfg.coefficient <= 1.0)) {
    throw ConfigError("knn.coefficient must be in [0,1]");
  }
}

KnnStore::KnnStore(const ModelParams& global, Batch personalization) {
  if (personalization.empty()) throw std::invalid_argument("kNN store over an empty personalization set");
  reps_.reserve(personalization.size());
  labels_.reserve(personalization.size());
  for (const Example* e : personalization) {
    reps_.push_back(representation(global, e->x));
    labels_.push_back(e->y);
  }
}

std::vector<std::size_t> KnnStore::nearest(std::span<const double> rep, std::size_t k) const {
  std::vector<std::pair<double, std::size_t>> dist;
  dist.reserve(reps_.size());
  for (std::size_t i = 0; i < reps_.size(); ++i) dist.emplace_back(kernels::squared_distance(reps_[i], rep), i);
  const std::size_t take = std::min(k, dist.size());
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(take), dist.end());
  std::vector<std::size_t> out(take);
  for (std::size_t i = 0; i < take; ++i) out[i] = dist[i].second;
  return out;
}

KnnPrediction knn_per_predict(const ModelParams& global, const KnnStore& store, std::span<const double> x,
                              const KnnPerConfig& cfg) {
  const Prediction base = predict(global, x);
  const std::vector<std::size_t> nn = store.nearest(representation(global, x), cfg.k_neighbors);
  const double c = cfg.coefficient;
  KnnPrediction out;
  if (base.probs.empty()) {
    double mean = 0.0;
    for (const std::size_t i : nn) mean += store.label(i);
    mean /= static_cast<double>(nn.size());
    out.value = c * mean + (1.0 - c) * base.value;
    out.label = out.value;
    return out;
  }
  std::vector<double> freq(base.probs.size(), 0.0);
  for (const std::size_t i : nn) freq[static_cast<std::size_t>(store.label(i))] += 1.0;
  for (double& f : freq) f /= static_cast<double>(nn.size());
  out.probs.resize(freq.size());
  std::size_t best = 0;
  for (std::size_t j = 0; j < freq.size(); ++j) {
    out.probs[j] = c * freq[j] + (1.0 - c) * base.probs[j];
    if (out.probs[j] > out.probs[best]) best = j;
  }
  out.label = static_cast<double>(best);
  return out;
}

namespace {

double knn_metric(const ModelParams& global, const KnnStore& store, Batch evaluation, const KnnPerConfig& cfg,
                  MetricKind kind) {
  if (evaluation.empty()) throw std::invalid_argument("kNN-Per evaluation set is empty");
  double total = 0.0;
  for (const Example* e : evaluation) {
    const KnnPrediction pred = knn_per_predict(global, store, e->x, cfg);
    if (kind == MetricKind::accuracy) {
      total += pred.label == e->y ? 1.0 : 0.0;
    } else {
      const double r = pred.label - e->y;
      total += r * r;
    }
  }
  return total / static_cast<double>(evaluation.size());
}

}  // namespace

double knn_per_eval(const ModelParams& global, const LocalSplit& split, const KnnPerConfig& cfg, MetricKind kind) {
  validate_knn_config(cfg);
  const KnnStore store(global, split.personalization);
  return knn_metric(global, store, split.evaluation, cfg, kind);
}

// ---------------------------------------------------------------------------
// Personalizers

Personalizer global_personalizer(const ModelParams& global, MetricKind kind) {
  return [global, kind](Batch, std::string_view) -> Scorer {
    return [global, kind](Batch eval) { return evaluate_metric(global, eval, kind); };
  };
}

Personalizer finetune_personalizer(const ModelParams& global, const FinetuneConfig& cfg, MetricKind kind) {
  validate_finetune_config(cfg);
  return [global, cfg, kind](Batch personalization, std::string_view client_id) -> Scorer {
    ModelParams tuned = finetune_path(global, personalization, cfg, client_id).back();
    return [tuned = std::move(tuned), kind](Batch eval) { return evaluate_metric(tuned, eval, kind); };
  };
}

Personalizer knn_personalizer(const ModelParams& global, const KnnPerConfig& cfg, MetricKind kind) {
  validate_knn_config(cfg);
  return [global, cfg, kind](Batch personalization, std::string_view) -> Scorer {
    auto store = std::make_shared<KnnStore>(global, personalization);
    return [global, cfg, kind, store](Batch eval) { return knn_metric(global, *store, eval, cfg, kind); };
  };
}

Personalizer hypcluster_personalizer(const std::vector<ModelParams>& models, MetricKind kind) {
  return [models, kind](Batch personalization, std::string_view) -> Scorer {
    const std::size_t j = select_lowest_loss(models, personalization);
    return [chosen = models[j], kind](Batch eval) { return evaluate_metric(chosen, eval, kind); };
  };
}

}  // namespace pfl
