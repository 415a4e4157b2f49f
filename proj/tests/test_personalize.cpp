#include <doctest.h>

#include <cmath>
#include <numeric>

#include "checks.hpp"
#include "pfl/personalize.hpp"

using namespace pfl;

namespace {

// Hand-built split over owned examples.
struct OwnedSplit {
  std::vector<Example> pers, eval;
  LocalSplit split() const { return {refs_of(pers), refs_of(eval)}; }
};

OwnedSplit random_split(const ArchDescriptor& a, std::size_t n_pers, std::size_t n_eval, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {checks::random_examples(a, n_pers, rng), checks::random_examples(a, n_eval, rng)};
}

EngineConfig small_engine(int rounds) {
  EngineConfig cfg;
  cfg.total_rounds = rounds;
  cfg.clients_per_round = 3;
  cfg.client_lr = 0.05;
  cfg.train_batch_size = 4;
  cfg.seed = 21;
  return cfg;
}

// Regression model w = 0 with bias b: loss on y = 0 targets is b^2.
ModelParams bias_model(double b) {
  ModelParams p = zero_params({ModelFamily::linear_regression, 1, 1, 0, 0.0});
  p.values[1] = b;
  return p;
}

}  // namespace

TEST_CASE("device_split requires tags and a personalization set") {
  ClientDataset c;
  c.client_id = "x";
  c.examples.resize(3, Example{{0.0}, 0.0, {}});
  CHECK_THROWS(device_split(c));
  c.tags = {SplitTag::evaluation, SplitTag::evaluation, SplitTag::evaluation};
  CHECK_THROWS(device_split(c));
  c.tags[0] = SplitTag::personalization;
  const LocalSplit s = device_split(c);
  CHECK(s.personalization.size() == 1);
  CHECK(s.evaluation.size() == 2);
}

TEST_CASE("finetune with zero epochs is the identity") {
  const ArchDescriptor a = checks::arch_for(ModelFamily::softmax_classifier);
  const OwnedSplit s = random_split(a, 10, 10, 1);
  const ModelParams g = init_params(a, 2);
  FinetuneConfig cfg;
  cfg.max_epochs = 0;
  const FinetuneEval fe = finetune_eval(g, s.split(), cfg, MetricKind::accuracy, "c");
  REQUIRE(fe.per_epoch.size() == 1);
  CHECK(fe.per_epoch[0] == fe.metric_before);
  CHECK(fe.metric_before == evaluate_metric(g, s.split().evaluation, MetricKind::accuracy));
}

TEST_CASE("last-layer fine-tuning leaves the other slices bitwise unchanged") {
  const ArchDescriptor a = checks::arch_for(ModelFamily::mlp_classifier);
  const OwnedSplit s = random_split(a, 20, 5, 3);
  const ModelParams g = init_params(a, 4);
  const ModelParams copy = g;
  FinetuneConfig cfg;
  cfg.max_epochs = 4;
  cfg.lr = 0.3;
  cfg.batch_size = 3;
  cfg.scope = FinetuneScope::last_layer;
  const auto path = finetune_path(g, s.split().personalization, cfg, "c");
  REQUIRE(path.size() == 5);
  const LayerSlice& hidden = g.layer("hidden");
  for (const auto& snap : path) {
    for (std::size_t i = hidden.offset; i < hidden.end(); ++i) CHECK(snap.values[i] == g.values[i]);
  }
  CHECK(path.back().values != g.values);
  CHECK(g == copy);  // the global model is never mutated
}

TEST_CASE("fine-tuning a wrong-cluster oracle improves with epochs") {
  SynthSpec spec;
  spec.num_clients = 2;
  spec.examples_mean = 400;
  spec.heterogeneity = 3.0;
  spec.seed = 8;
  const SyntheticDataset s = generate_synthetic(spec);
  const ClientDataset& b = s.dataset.clients[1];
  const ModelParams& oracle_a = s.oracles[1 - s.cluster_of.at(b.client_id)];
  std::vector<Example> pers(b.examples.begin(), b.examples.begin() + 300);
  std::vector<Example> eval(b.examples.begin() + 300, b.examples.end());
  FinetuneConfig cfg;
  cfg.max_epochs = 6;
  cfg.lr = 0.5;
  const FinetuneEval fe = finetune_eval(oracle_a, LocalSplit{refs_of(pers), refs_of(eval)}, cfg,
                                        MetricKind::accuracy, b.client_id);
  for (std::size_t e = 1; e < fe.per_epoch.size(); ++e) CHECK(fe.per_epoch[e] > fe.per_epoch[e - 1]);
}

TEST_CASE("local training equals fine-tuning a random init") {
  const ArchDescriptor a = checks::arch_for(ModelFamily::mlp_classifier);
  const OwnedSplit s = random_split(a, 12, 6, 5);
  FinetuneConfig cfg;
  cfg.max_epochs = 3;
  const FinetuneEval local = local_training_eval(s.split(), cfg, a, 77, MetricKind::accuracy, "c");
  const FinetuneEval ft = finetune_eval(init_params(a, 77), s.split(), cfg, MetricKind::accuracy, "c");
  CHECK(local.per_epoch == ft.per_epoch);
  CHECK(local.metric_before == evaluate_metric(init_params(a, 77), s.split().evaluation, MetricKind::accuracy));
}

TEST_CASE("select_best_epoch") {
  CHECK(select_best_epoch({{0.5, 0.7, 0.6}}, MetricKind::accuracy) == 1);
  CHECK(select_best_epoch({{0.4, 0.4, 0.4}, {0.6, 0.6, 0.6}}, MetricKind::accuracy) == 0);
  CHECK(select_best_epoch({{0.3, 0.2, 0.25}}, MetricKind::mse) == 1);
  CHECK(select_best_epoch({{0.2, 0.9}, {0.8, 0.0}}, MetricKind::accuracy) == 0);
  CHECK_THROWS(select_best_epoch({}, MetricKind::accuracy));
  CHECK_THROWS(select_best_epoch({{0.1, 0.2}, {0.1}}, MetricKind::accuracy));
}

TEST_CASE("hypcluster_select") {
  std::vector<Example> zeros(4, Example{{1.0}, 0.0, {}});
  const LocalSplit split{refs_of(zeros), refs_of(zeros)};
  const auto choice = hypcluster_select({bias_model(std::sqrt(0.5)), bias_model(std::sqrt(0.3))}, split,
                                        MetricKind::mse);
  CHECK(choice.cluster == 1);
  CHECK(choice.metric == doctest::Approx(0.3));
  CHECK(hypcluster_select({bias_model(0.4), bias_model(0.4)}, split, MetricKind::mse).cluster == 0);
  CHECK(hypcluster_select({bias_model(3.0)}, split, MetricKind::mse).cluster == 0);
  CHECK_THROWS(hypcluster_select({bias_model(1.0)}, LocalSplit{{}, refs_of(zeros)}, MetricKind::mse));

  // A common l2 penalty adds the same constant to both losses (weights equal).
  ModelParams a = bias_model(0.9), b = bias_model(0.2);
  a.values[0] = b.values[0] = 0.0;
  a.arch.l2_reg = b.arch.l2_reg = 5.0;
  std::vector<Example> at_zero(3, Example{{0.0}, 0.0, {}});
  const auto plain = select_lowest_loss({bias_model(0.9), bias_model(0.2)}, refs_of(at_zero));
  a.values[0] = b.values[0] = 1.5;
  CHECK(select_lowest_loss({a, b}, refs_of(at_zero)) == plain);
}

TEST_CASE("HypCluster with k = 1 is FedAvg") {
  const ArchDescriptor a = checks::arch_for(ModelFamily::softmax_classifier);
  const FederatedDataset ds = checks::small_federation(a, 7, 3);
  const EngineConfig cfg = small_engine(6);
  const HypClusterResult hc = hypcluster_train(ds, a, cfg, HypClusterConfig{1, false, 0});
  const FedAvgResult fa = run_fedavg(ds, a, cfg);
  CHECK(hc.state.models.front() == fa.state.params);
  for (double f : hc.cluster0_fraction) CHECK(f == 1.0);
  CHECK_THROWS_AS(hypcluster_train(ds, a, cfg, HypClusterConfig{0, false, 0}), ConfigError);
}

TEST_CASE("HypCluster traces and the ensemble baseline") {
  const ArchDescriptor a = checks::arch_for(ModelFamily::softmax_classifier);
  const FederatedDataset ds = checks::small_federation(a, 7, 3);
  const EngineConfig cfg = small_engine(4);
  const HypClusterResult hc = hypcluster_train(ds, a, cfg, HypClusterConfig{2, true, 3});
  REQUIRE(hc.traces.size() == 3 + 3 + 4);
  CHECK(hc.traces[0].phase == "warmstart_0");
  CHECK(hc.traces[3].phase == "warmstart_1");
  const RoundTrace& last = hc.traces.back();
  CHECK(last.params_broadcast == 2 * param_count(a) * 3);
  CHECK(last.params_uploaded == param_count(a) * 3);
  REQUIRE(last.cluster_assignments.has_value());
  CHECK(last.cluster_assignments->size() == 3);

  const EnsembleResult same = ensemble_k_fedavg(ds, a, cfg, 3, 4, false);
  CHECK(same.models[0] == same.models[1]);
  CHECK(same.models[1] == same.models[2]);
  CHECK(same.models[0] == run_fedavg(ds, a, cfg).state.params);
  const auto& client = ds.clients[0];
  const auto all = client.all();
  CHECK(hypcluster_select(same.models, LocalSplit{all, all}, MetricKind::accuracy).cluster == 0);
  const EnsembleResult distinct = ensemble_k_fedavg(ds, a, cfg, 2, 4);
  CHECK(distinct.models[0] != distinct.models[1]);
  CHECK(distinct.traces[4].phase == "ensemble_1");
}

TEST_CASE("purity and mode collapse") {
  const std::map<std::string, int> planted{{"a", 0}, {"b", 0}, {"c", 1}, {"d", 1}};
  CHECK(assignment_purity({{"a", 1}, {"b", 1}, {"c", 0}, {"d", 0}}, planted) == 1.0);
  CHECK(assignment_purity({{"a", 0}, {"b", 0}, {"c", 0}, {"d", 0}}, planted) == 0.5);
  CHECK(assignment_purity({{"a", 0}, {"b", 1}, {"c", 1}, {"d", 1}}, planted) == 0.75);

  std::vector<RoundTrace> traces(5);
  for (auto& t : traces) t.cluster_assignments = std::map<std::string, int>{{"a", 0}, {"b", 0}};
  CHECK(mode_collapse_detected(traces, 5));
  CHECK_FALSE(mode_collapse_detected(traces, 6));
  (*traces[2].cluster_assignments)["b"] = 1;
  CHECK_FALSE(mode_collapse_detected(traces, 3));
  CHECK(mode_collapse_detected(traces, 2));
}

TEST_CASE("kNN-Per degeneracies") {
  const ArchDescriptor a = checks::arch_for(ModelFamily::mlp_classifier);
  const OwnedSplit s = random_split(a, 25, 15, 9);
  const ModelParams g = init_params(a, 6);
  KnnPerConfig cfg;
  cfg.coefficient = 0.0;
  CHECK(knn_per_eval(g, s.split(), cfg, MetricKind::accuracy) ==
        evaluate_metric(g, s.split().evaluation, MetricKind::accuracy));

  const KnnStore store(g, s.split().personalization);
  for (double coef : {0.0, 0.3, 1.0}) {
    cfg.coefficient = coef;
    for (const auto& e : s.eval) {
      const KnnPrediction p = knn_per_predict(g, store, e.x, cfg);
      CHECK(std::accumulate(p.probs.begin(), p.probs.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  cfg.coefficient = 1.2;
  CHECK_THROWS_AS(validate_knn_config(cfg), ConfigError);
  cfg.coefficient = 0.5;
  CHECK_THROWS(knn_per_eval(g, LocalSplit{{}, s.split().evaluation}, cfg, MetricKind::accuracy));
}

TEST_CASE("kNN-Per matches brute-force neighbors on a 3-point store") {
  // Softmax with zero weights: representation is the input, global probs uniform.
  const ModelParams g = zero_params({ModelFamily::softmax_classifier, 2, 3, 0, 0.0});
  const std::vector<Example> store_pts{{{0.0, 0.0}, 0.0, {}}, {{1.0, 0.0}, 1.0, {}}, {{0.0, 3.0}, 2.0, {}}};
  const KnnStore store(g, refs_of(store_pts));
  const std::vector<double> query{0.9, 0.2};
  // distances: 0.922, 0.224, 2.956 -> nearest two are points 1 and 0
  CHECK(store.nearest(query, 2) == std::vector<std::size_t>{1, 0});
  CHECK(store.nearest(query, 10).size() == 3);
  KnnPerConfig cfg{2, 0.6};
  const KnnPrediction p = knn_per_predict(g, store, query, cfg);
  const double u = 0.4 / 3.0;
  CHECK(p.probs[0] == doctest::Approx(0.6 * 0.5 + u).epsilon(1e-14));
  CHECK(p.probs[1] == doctest::Approx(0.6 * 0.5 + u).epsilon(1e-14));
  CHECK(p.probs[2] == doctest::Approx(u).epsilon(1e-14));
  CHECK(p.label == 0.0);  // tie between classes 0 and 1 goes to 0

  cfg.coefficient = 1.0;
  cfg.k_neighbors = 1;
  CHECK(knn_per_predict(g, store, query, cfg).label == 1.0);
}

TEST_CASE("kNN regression uses the neighbor mean") {
  const ModelParams g = zero_params({ModelFamily::linear_regression, 1, 1, 0, 0.0});
  const std::vector<Example> pts{{{0.0}, 2.0, {}}, {{1.0}, 4.0, {}}, {{5.0}, 10.0, {}}};
  const KnnStore store(g, refs_of(pts));
  const KnnPrediction p = knn_per_predict(g, store, std::vector<double>{0.4}, KnnPerConfig{2, 0.5});
  CHECK(p.value == doctest::Approx(0.5 * 3.0));
}

TEST_CASE("personalizers agree with the direct evaluations") {
  const ArchDescriptor a = checks::arch_for(ModelFamily::softmax_classifier);
  const OwnedSplit s = random_split(a, 20, 10, 12);
  const ModelParams g = init_params(a, 1);
  const LocalSplit sp = s.split();
  CHECK(global_personalizer(g, MetricKind::accuracy)(sp.personalization, "c")(sp.evaluation) ==
        evaluate_metric(g, sp.evaluation, MetricKind::accuracy));
  FinetuneConfig fc;
  fc.max_epochs = 2;
  CHECK(finetune_personalizer(g, fc, MetricKind::accuracy)(sp.personalization, "c")(sp.evaluation) ==
        finetune_eval(g, sp, fc, MetricKind::accuracy, "c").per_epoch.back());
  const KnnPerConfig kc{3, 0.4};
  CHECK(knn_personalizer(g, kc, MetricKind::accuracy)(sp.personalization, "c")(sp.evaluation) ==
        knn_per_eval(g, sp, kc, MetricKind::accuracy));
}
