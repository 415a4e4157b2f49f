#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "checks.hpp"
#include "pfl/eval.hpp"

using namespace pfl;

namespace {

PerClientMetrics records(const std::vector<double>& before, const std::vector<double>& after,
                         MetricKind kind = MetricKind::accuracy) {
  PerClientMetrics pcm;
  pcm.kind = kind;
  for (std::size_t i = 0; i < after.size(); ++i) {
    ClientMetricRecord r;
    r.client_id = "c" + std::to_string(i);
    if (!before.empty()) r.metric_before = before[i];
    r.metric_after = after[i];
    pcm.records.push_back(r);
  }
  return pcm;
}

struct Clients {
  std::vector<std::vector<Example>> pers, eval;
  std::vector<ClientSplit> splits;
};

Clients make_clients(const ArchDescriptor& a, std::size_t n, std::size_t n_pers, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Clients c;
  for (std::size_t i = 0; i < n; ++i) {
    c.pers.push_back(checks::random_examples(a, n_pers, rng));
    c.eval.push_back(checks::random_examples(a, 8, rng));
  }
  for (std::size_t i = 0; i < n; ++i)
    c.splits.push_back({"c" + std::to_string(i), {refs_of(c.pers[i]), refs_of(c.eval[i])}});
  return c;
}

}  // namespace

TEST_CASE("summarize") {
  const SummaryStats s = summarize(records({}, {1.0, 0.0}));
  CHECK(s.mean == 0.5);
  CHECK(s.std == 0.5);
  CHECK_FALSE(s.pct_hurt.has_value());
  CHECK(s.n_clients == 2);

  const SummaryStats h = summarize(records({0.5, 0.5}, {0.6, 0.4}));
  CHECK(*h.pct_hurt == 50.0);
  CHECK(*h.pct_helped == 50.0);
  CHECK(*h.pct_unchanged == 0.0);
  CHECK(*summarize(records({0.3, 0.7}, {0.3, 0.7})).pct_hurt == 0.0);
  // mse: higher is worse
  CHECK(*summarize(records({0.5, 0.5}, {0.6, 0.4}, MetricKind::mse)).pct_hurt == 50.0);
  CHECK_THROWS(summarize(PerClientMetrics{}));
}

TEST_CASE("summarize: permutation invariance and shares summing to 100") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> level(0, 3);
  for (std::size_t n = 1; n <= 60; ++n) {
    std::vector<double> before(n), after(n);
    for (std::size_t i = 0; i < n; ++i) {
      before[i] = level(rng) / 4.0;
      after[i] = level(rng) / 4.0;
    }
    const SummaryStats s = summarize(records(before, after));
    CHECK(*s.pct_hurt + *s.pct_helped + *s.pct_unchanged == 100.0);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::reverse(perm.begin(), perm.end());
    std::vector<double> b2(n), a2(n);
    for (std::size_t i = 0; i < n; ++i) {
      b2[i] = before[perm[i]];
      a2[i] = after[perm[i]];
    }
    const SummaryStats p = summarize(records(b2, a2));
    CHECK(p.mean == doctest::Approx(s.mean).epsilon(1e-14));
    CHECK(*p.pct_hurt == *s.pct_hurt);
  }
}

TEST_CASE("multi_run_summary") {
  SummaryStats a;
  a.mean = 0.4;
  a.std = 0.1;
  a.pct_hurt = 10.0;
  SummaryStats b = a;
  b.mean = 0.6;
  b.std = 0.3;
  const MultiRunSummary m = multi_run_summary({a, b});
  CHECK(m.mean.mean == doctest::Approx(0.5));
  CHECK(m.mean.std == doctest::Approx(0.1));
  CHECK(m.client_std.mean == doctest::Approx(0.2));
  CHECK(m.pct_hurt->std == 0.0);
  const MultiRunSummary same = multi_run_summary({a, a, a});
  CHECK(same.mean.std == 0.0);
  CHECK(same.client_std.std == 0.0);
  CHECK_THROWS(multi_run_summary({a}));
  b.pct_hurt.reset();
  CHECK_FALSE(multi_run_summary({a, b}).pct_hurt.has_value());
}

TEST_CASE("personalized_metrics fills before from the baseline") {
  const ArchDescriptor a = checks::arch_for(ModelFamily::softmax_classifier);
  const Clients c = make_clients(a, 4, 10, 2);
  const ModelParams g = init_params(a, 5);
  const Personalizer base = global_personalizer(g, MetricKind::accuracy);
  FinetuneConfig fc;
  fc.max_epochs = 3;
  fc.lr = 0.2;
  const PerClientMetrics pcm =
      personalized_metrics(c.splits, finetune_personalizer(g, fc, MetricKind::accuracy), MetricKind::accuracy, &base);
  REQUIRE(pcm.records.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(*pcm.records[i].metric_before == evaluate_metric(g, c.splits[i].split.evaluation, MetricKind::accuracy));
    CHECK(pcm.records[i].n_personalization == 10);
    CHECK(pcm.records[i].n_evaluation == 8);
  }
}

TEST_CASE("id_ood_curve at epoch 0 is the global model") {
  const ArchDescriptor a = checks::arch_for(ModelFamily::softmax_classifier);
  const Clients c = make_clients(a, 3, 10, 4);
  std::mt19937_64 rng(9);
  const std::vector<Example> ood = checks::random_examples(a, 30, rng);
  const ModelParams g = init_params(a, 5);
  const auto make = [&](int epochs) {
    FinetuneConfig fc;
    fc.max_epochs = epochs;
    return finetune_personalizer(g, fc, MetricKind::accuracy);
  };
  const auto curve = id_ood_curve(c.splits, ood, make, {0, 1, 3, 5, 10, 15});
  REQUIRE(curve.size() == 6);
  double id = 0.0;
  for (const auto& s : c.splits) id += evaluate_metric(g, s.split.evaluation, MetricKind::accuracy) / 3.0;
  CHECK(curve[0].id_metric == doctest::Approx(id).epsilon(1e-14));
  CHECK(curve[0].ood_metric == doctest::Approx(evaluate_metric(g, refs_of(ood), MetricKind::accuracy)).epsilon(1e-14));
  CHECK(curve[5].epochs == 15);
  CHECK_THROWS(id_ood_curve(c.splits, ood, make, {}));
}

TEST_CASE("communication report") {
  const ArchDescriptor a = checks::arch_for(ModelFamily::softmax_classifier);
  const FederatedDataset ds = checks::small_federation(a, 8, 3);
  EngineConfig cfg;
  cfg.total_rounds = 5;
  cfg.clients_per_round = 3;
  const FedAvgResult fa = run_fedavg(ds, a, cfg);
  const auto rep = communication_report(fa.traces);
  REQUIRE(rep.size() == 5);
  CHECK(rep.back().cumulative_broadcast == 5 * 3 * param_count(a));
  for (std::size_t i = 1; i < rep.size(); ++i) CHECK(rep[i].cumulative_total >= rep[i - 1].cumulative_total);

  const HypClusterResult hc = hypcluster_train(ds, a, cfg, HypClusterConfig{2, false, 0});
  CHECK(communication_report(hc.traces).back().cumulative_broadcast == 2 * rep.back().cumulative_broadcast);
  CHECK(communication_report({}).empty());
}

TEST_CASE("personalization set sweep") {
  const ArchDescriptor a = checks::arch_for(ModelFamily::softmax_classifier);
  Clients c = make_clients(a, 3, 8, 6);
  c.pers[2].resize(3);
  c.splits[2].split.personalization = refs_of(c.pers[2]);
  const ModelParams g = init_params(a, 5);
  FinetuneConfig fc;
  fc.max_epochs = 2;
  const Personalizer p = finetune_personalizer(g, fc, MetricKind::accuracy);
  const auto sweep = personalization_set_sweep(c.splits, p, {1.0, 0.5, 0.25}, 3);
  REQUIRE(sweep.size() == 3);
  const SummaryStats base = summarize(personalized_metrics(c.splits, p, MetricKind::accuracy));
  CHECK(sweep[0].mean_metric == doctest::Approx(base.mean).epsilon(1e-14));
  CHECK(sweep[0].clients_used == 3);
  CHECK(sweep[2].clients_used == 2);  // floor(0.25 * 3) = 0 examples
  CHECK(sweep[2].clients_skipped == 1);
  CHECK_THROWS(personalization_set_sweep(c.splits, p, {0.0}, 3));

  const ExampleRefs& set = c.splits[0].split.personalization;
  const ExampleRefs half = subsample_personalization(set, 0.5, 3, "c0");
  const ExampleRefs quarter = subsample_personalization(set, 0.25, 3, "c0");
  CHECK(half.size() == 4);
  CHECK(quarter.size() == 2);
  CHECK(std::is_sorted(half.begin(), half.end()));  // original order kept
  for (const auto* e : quarter) CHECK(std::find(half.begin(), half.end(), e) != half.end());
  CHECK(subsample_personalization(set, 1.0, 3, "c0") == set);
}
