#include "pfl/engine.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <map>
#include <thread>

#include "pfl/data.hpp"
#include "pfl/kernels.hpp"
#include "pfl/models.hpp"

namespace pfl {

using nlohmann::json;

std::string_view to_string(Weighting w) { return w == Weighting::uniform ? "uniform" : "by_example_count"; }

Weighting parse_weighting(std::string_view s) {
  if (s == "uniform") return Weighting::uniform;
  if (s == "by_example_count") return Weighting::by_example_count;
  throw ConfigError("unknown weighting: '" + std::string(s) + "'");
}

void validate_engine_config(const EngineConfig& cfg) {
  if (cfg.total_rounds < 0) throw ConfigError("engine.total_rounds must be >= 0");
  if (!(cfg.client_lr >= 0.0)) throw ConfigError("engine.client_lr must be >= 0");
  if (cfg.train_batch_size == 0) throw ConfigError("engine.train_batch_size must be positive");
  if (cfg.train_epochs < 0) throw ConfigError("engine.train_epochs must be >= 0");
  if (!(cfg.server.lr > 0.0)) throw ConfigError("engine.server.lr must be positive");
  if (cfg.workers == 0) throw ConfigError("engine.workers must be positive");
}

std::vector<TrainingClient> training_pool(const FederatedDataset& ds) {
  std::vector<TrainingClient> pool;
  for (const auto& c : ds.clients) {
    const auto it = ds.client_role.find(c.client_id);
    if (it == ds.client_role.end()) {
      pool.push_back({c.client_id, c.all()});
    } else if (it->second == ClientRole::train) {
      pool.push_back({c.client_id, c.all()});
    } else if (it->second == ClientRole::all) {
      ExampleRefs data = c.select(SplitTag::train);
      if (!data.empty()) pool.push_back({c.client_id, std::move(data)});
    }
  }
  std::sort(pool.begin(), pool.end(),
            [](const TrainingClient& a, const TrainingClient& b) { return a.client_id < b.client_id; });
  return pool;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void local_sgd(ModelParams& params, Batch data, int epochs, std::size_t batch_size, double lr, Rng& rng,
               const GradientAdjust& adjust) {
  if (data.empty()) throw std::invalid_argument("local SGD over empty local data");
  if (batch_size == 0) throw std::invalid_argument("local SGD batch size must be positive");
  if (!(lr >= 0.0)) throw std::invalid_argument("local SGD lr must be nonnegative");
  ExampleRefs order(data.begin(), data.end());
  ExampleRefs batch;
  std::vector<double> grad(params.size(), 0.0);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    shuffle(order, rng);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      batch.assign(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
      loss_and_gradient(params, batch, grad);
      if (adjust) adjust(params, grad);
      if (lr > 0.0) kernels::axpy(-lr, grad, params.values);
    }
  }
}

ClientUpdate client_update(const ModelParams& start, Batch local, int epochs, std::size_t batch_size, double lr,
                           Rng& rng, Weighting weighting) {
  ModelParams work = start;
  local_sgd(work, local, epochs, batch_size, lr, rng);
  ClientUpdate update;
  update.delta = std::move(work.values);
  for (std::size_t i = 0; i < update.delta.size(); ++i) update.delta[i] -= start.values[i];
  update.weight = weighting == Weighting::uniform ? 1.0 : static_cast<double>(local.size());
  return update;
}

Rng client_rng(std::uint64_t seed, std::string_view purpose, int round, std::string_view client_id) {
  return make_rng(seed, hash_string(purpose), static_cast<std::uint64_t>(round), hash_string(client_id));
}

std::vector<double> aggregate(std::span<const std::vector<double>> deltas, std::span<const double> weights) {
  if (deltas.empty()) throw std::invalid_argument("aggregate: no client deltas");
  if (deltas.size() != weights.size()) throw std::invalid_argument("aggregate: one weight per delta required");
  double total = 0.0;
  for (const double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("aggregate: weights must be nonnegative");
    total += w;
  }
  if (!(total > 0.0)) throw std::invalid_argument("aggregate: weights are all zero");
  const std::size_t n = deltas.front().size();
  std::vector<double> sum(n, 0.0);
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    if (deltas[i].size() != n) throw std::invalid_argument("aggregate: delta length mismatch");
    kernels::axpy(weights[i], deltas[i], sum);
  }
  for (double& v : sum) v /= total;
  return sum;
}

FedAvgState initial_fedavg_state(const ArchDescriptor& arch, const EngineConfig& cfg) {
  FedAvgState state;
  state.params = init_params(arch, cfg.seed);
  state.server = make_server_state(cfg.server, state.params.size());
  state.next_round = 0;
  state.seed = cfg.seed;
  return state;
}

std::vector<std::string> round_participants(const std::vector<TrainingClient>& pool, const EngineConfig& cfg,
                                            int round) {
  std::vector<std::string> ids;
  ids.reserve(pool.size());
  for (const auto& c : pool) ids.push_back(c.client_id);
  const std::size_t n = cfg.clients_per_round == 0 ? ids.size() : cfg.clients_per_round;
  std::vector<std::string> sampled = n == ids.size() ? ids : sample_clients(ids, n, round, cfg.seed);
  std::sort(sampled.begin(), sampled.end());
  return sampled;
}

FedAvgState fedavg_round(const FedAvgState& state, const std::vector<const TrainingClient*>& participants,
                         const EngineConfig& cfg, RoundTrace* trace) {
  const int round = state.next_round;
  std::vector<ClientUpdate> updates(participants.size());
  parallel_for(participants.size(), cfg.workers, [&](std::size_t i) {
    const TrainingClient& client = *participants[i];
    Rng rng = client_rng(cfg.seed, "client_update", round, client.client_id);
    updates[i] = client_update(state.params, client.data, cfg.train_epochs, cfg.train_batch_size, cfg.client_lr, rng,
                               cfg.weighting);
  });

  FedAvgState next;
  next.seed = state.seed;
  next.next_round = round + 1;
  if (updates.empty()) {
    next.params = state.params;
    next.server = state.server;
  } else {
    std::vector<std::vector<double>> deltas;
    std::vector<double> weights;
    deltas.reserve(updates.size());
    for (auto& u : updates) {
      deltas.push_back(std::move(u.delta));
      weights.push_back(u.weight);
    }
    std::vector<double> pseudo_grad = aggregate(deltas, weights);
    for (double& g : pseudo_grad) g = -g;
    auto [params, server] = server_apply(state.server, state.params, pseudo_grad);
    next.params = std::move(params);
    next.server = std::move(server);
  }

  if (trace) {
    trace->round = round;
    trace->sampled_client_ids.clear();
    for (const auto* c : participants) trace->sampled_client_ids.push_back(c->client_id);
    const auto p = static_cast<std::uint64_t>(state.params.size());
    trace->params_broadcast = p * participants.size();
    trace->params_uploaded = p * participants.size();
  }
  return next;
}

double mean_validation_metric(const FederatedDataset& ds, const ModelParams& params) {
  const MetricKind kind = ds.metric();
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& c : ds.clients) {
    const auto it = ds.client_role.find(c.client_id);
    if (it == ds.client_role.end()) continue;
    ExampleRefs data;
    if (it->second == ClientRole::valid) {
      data = c.select(SplitTag::evaluation);
    } else if (it->second == ClientRole::all) {
      data = c.select(SplitTag::valid);
    }
    if (data.empty()) continue;
    total += evaluate_metric(params, data, kind);
    ++count;
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

FedAvgResult resume_fedavg(const FederatedDataset& ds, FedAvgState state, const EngineConfig& cfg,
                           const FedAvgHooks& hooks) {
  validate_engine_config(cfg);
  FedAvgResult result;
  if (state.next_round >= cfg.total_rounds) {
    result.state = std::move(state);
    return result;
  }
  const std::vector<TrainingClient> pool = training_pool(ds);
  if (pool.empty()) throw std::invalid_argument("run_fedavg: the dataset has no training clients");
  if (cfg.clients_per_round > pool.size()) {
    throw ConfigError("clients_per_round " + std::to_string(cfg.clients_per_round) + " exceeds the " +
                      std::to_string(pool.size()) + " training clients");
  }
  std::map<std::string, const TrainingClient*> by_id;
  for (const auto& c : pool) by_id[c.client_id] = &c;

  while (state.next_round < cfg.total_rounds) {
    const int round = state.next_round;
    std::vector<const TrainingClient*> participants;
    for (const auto& id : round_participants(pool, cfg, round)) participants.push_back(by_id.at(id));
    RoundTrace trace;
    trace.phase = hooks.phase;
    state = fedavg_round(state, participants, cfg, &trace);
    result.traces.push_back(std::move(trace));

    const int done = state.next_round;
    if (cfg.rounds_per_evaluation > 0 && done % cfg.rounds_per_evaluation == 0) {
      const double metric = hooks.evaluate ? hooks.evaluate(state.params) : mean_validation_metric(ds, state.params);
      result.history.push_back({done, metric});
    }
    if (cfg.rounds_per_checkpoint > 0 && done % cfg.rounds_per_checkpoint == 0 && !cfg.checkpoint_dir.empty()) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      save_checkpoint(state, cfg.checkpoint_dir / ("fedavg_" + hooks.phase + "_latest.json"));
    }
  }
  result.state = std::move(state);
  return result;
}

FedAvgResult run_fedavg(const FederatedDataset& ds, const ArchDescriptor& arch, const EngineConfig& cfg,
                        const FedAvgHooks& hooks) {
  validate_engine_config(cfg);
  return resume_fedavg(ds, initial_fedavg_state(arch, cfg), cfg, hooks);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json arch_to_json(const ArchDescriptor& a) {
  return {{"family", to_string(a.family)},
          {"input_dim", a.input_dim},
          {"num_classes", a.num_classes},
          {"hidden_dim", a.hidden_dim},
          {"l2_reg", a.l2_reg}};
}

ArchDescriptor arch_from_json(const json& j) {
  ArchDescriptor a;
  a.family = parse_model_family(j.at("family").get<std::string>());
  a.input_dim = j.at("input_dim").get<std::size_t>();
  a.num_classes = j.at("num_classes").get<std::size_t>();
  a.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  a.l2_reg = j.at("l2_reg").get<double>();
  return a;
}

}  // namespace

void save_checkpoint(const FedAvgState& state, const std::filesystem::path& path) {
  const auto& s = state.server;
  json j{{"checkpoint_version", kCheckpointVersion},
         {"next_round", state.next_round},
         {"seed", state.seed},
         {"arch", arch_to_json(state.params.arch)},
         {"params", state.params.values},
         {"server",
          {{"kind", to_string(s.spec.kind)},
           {"lr", s.spec.lr},
           {"beta1", s.spec.beta1},
           {"beta2", s.spec.beta2},
           {"epsilon", s.spec.epsilon},
           {"momentum", s.spec.momentum},
           {"m", s.m},
           {"v", s.v},
           {"t", s.t},
           {"buffer", s.buffer}}}};
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + tmp.string());
    out << j.dump();
  }
  std::filesystem::rename(tmp, path);
}

FedAvgState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  const json j = json::parse(in);
  const int version = j.at("checkpoint_version").get<int>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  }
  FedAvgState state;
  state.next_round = j.at("next_round").get<int>();
  state.seed = j.at("seed").get<std::uint64_t>();
  state.params = zero_params(arch_from_json(j.at("arch")));
  state.params.values = j.at("params").get<std::vector<double>>();
  if (state.params.values.size() != param_count(state.params.arch)) {
    throw std::runtime_error("checkpoint parameter count does not match its architecture");
  }
  const json& s = j.at("server");
  state.server.spec.kind = parse_server_opt_kind(s.at("kind").get<std::string>());
  state.server.spec.lr = s.at("lr").get<double>();
  state.server.spec.beta1 = s.at("beta1").get<double>();
  state.server.spec.beta2 = s.at("beta2").get<double>();
  state.server.spec.epsilon = s.at("epsilon").get<double>();
  state.server.spec.momentum = s.at("momentum").get<double>();
  state.server.m = s.at("m").get<std::vector<double>>();
  state.server.v = s.at("v").get<std::vector<double>>();
  state.server.t = s.at("t").get<std::int64_t>();
  state.server.buffer = s.at("buffer").get<std::vector<double>>();
  return state;
}

}  // namespace pfl
