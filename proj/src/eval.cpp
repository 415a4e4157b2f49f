#include "pfl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pfl/rng.hpp"

namespace pfl {

MeanStd mean_std(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("mean_std of an empty list");
  if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); })) {
    return {values.front(), 0.0};
  }
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double sq = 0.0;
  for (const double v : values) sq += (v - mean) * (v - mean);
  return {mean, std::sqrt(sq / n)};
}

SummaryStats summarize(const PerClientMetrics& pcm) {
  if (pcm.records.empty()) throw std::invalid_argument("summarize: no per-client records");
  std::vector<double> after;
  after.reserve(pcm.records.size());
  bool paired = true;
  std::size_t hurt = 0, helped = 0, unchanged = 0;
  for (const auto& r : pcm.records) {
    after.push_back(r.metric_after);
    if (!r.metric_before) {
      paired = false;
      continue;
    }
    if (strictly_better(pcm.kind, *r.metric_before, r.metric_after)) {
      ++hurt;
    } else if (strictly_better(pcm.kind, r.metric_after, *r.metric_before)) {
      ++helped;
    } else {
      ++unchanged;
    }
  }
  const MeanStd ms = mean_std(after);
  SummaryStats s;
  s.mean = ms.mean;
  s.std = ms.std;
  s.n_clients = pcm.records.size();
  if (paired) {
    const double n = static_cast<double>(s.n_clients);
    // the last nonempty share is a remainder so the three sum to exactly 100
    s.pct_hurt = 100.0 * static_cast<double>(hurt) / n;
    if (unchanged > 0) {
      s.pct_helped = 100.0 * static_cast<double>(helped) / n;
      s.pct_unchanged = 100.0 - (*s.pct_hurt + *s.pct_helped);
    } else {
      s.pct_helped = helped > 0 ? 100.0 - *s.pct_hurt : 0.0;
      s.pct_unchanged = 0.0;
    }
  }
  return s;
}

MultiRunSummary multi_run_summary(const std::vector<SummaryStats>& runs) {
  if (runs.size() < 2) throw std::invalid_argument("multi_run_summary needs at least 2 runs");
  std::vector<double> means, stds, hurt;
  bool all_hurt = true;
  for (const auto& r : runs) {
    means.push_back(r.mean);
    stds.push_back(r.std);
    if (r.pct_hurt) {
      hurt.push_back(*r.pct_hurt);
    } else {
      all_hurt = false;
    }
  }
  MultiRunSummary out;
  out.runs = runs.size();
  out.mean = mean_std(means);
  out.client_std = mean_std(stds);
  if (all_hurt) out.pct_hurt = mean_std(hurt);
  return out;
}

PerClientMetrics personalized_metrics(const std::vector<ClientSplit>& clients, const Personalizer& personalizer,
                                      MetricKind kind, const Personalizer* baseline) {
  PerClientMetrics out;
  out.kind = kind;
  out.records.resize(clients.size());
  for (std::size_t i = 0; i < clients.size(); ++i) {
    const ClientSplit& c = clients[i];
    ClientMetricRecord& r = out.records[i];
    r.client_id = c.client_id;
    r.n_personalization = c.split.personalization.size();
    r.n_evaluation = c.split.evaluation.size();
    r.metric_after = personalizer(c.split.personalization, c.client_id)(c.split.evaluation);
    if (baseline) r.metric_before = (*baseline)(c.split.personalization, c.client_id)(c.split.evaluation);
  }
  return out;
}

std::vector<IdOodPoint> id_ood_curve(const std::vector<ClientSplit>& clients, const std::vector<Example>& ood,
                                     const std::function<Personalizer(int)>& make_personalizer,
                                     const std::vector<int>& epoch_grid) {
  if (epoch_grid.empty()) throw std::invalid_argument("id_ood_curve: empty epoch grid");
  if (clients.empty()) throw std::invalid_argument("id_ood_curve: no clients");
  if (ood.empty()) throw std::invalid_argument("id_ood_curve: empty OOD set");
  const ExampleRefs ood_refs = refs_of(ood);
  std::vector<IdOodPoint> curve;
  for (const int epochs : epoch_grid) {
    const Personalizer p = make_personalizer(epochs);
    double id = 0.0, out = 0.0;
    for (const auto& c : clients) {
      const Scorer score = p(c.split.personalization, c.client_id);
      id += score(c.split.evaluation);
      out += score(ood_refs);
    }
    const double n = static_cast<double>(clients.size());
    curve.push_back({epochs, id / n, out / n});
  }
  return curve;
}

std::vector<CommPoint> communication_report(const std::vector<RoundTrace>& traces) {
  std::vector<CommPoint> out;
  out.reserve(traces.size());
  std::uint64_t b = 0, u = 0;
  for (const auto& t : traces) {
    b += t.params_broadcast;
    u += t.params_uploaded;
    out.push_back({t.phase, t.round, b, u, b + u});
  }
  return out;
}

ExampleRefs subsample_personalization(const ExampleRefs& set, double fraction, std::uint64_t seed,
                                      std::string_view client_id) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("sweep fractions must lie in (0, 1]");
  if (fraction == 1.0) return set;
  const auto keep = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(set.size()) + 1e-9));
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, hash_string("personalization_sweep"), hash_string(client_id));
  shuffle(order, rng);
  order.resize(keep);
  std::sort(order.begin(), order.end());
  ExampleRefs out;
  out.reserve(keep);
  for (const std::size_t i : order) out.push_back(set[i]);
  return out;
}

std::vector<SweepPoint> personalization_set_sweep(const std::vector<ClientSplit>& clients,
                                                  const Personalizer& personalizer,
                                                  const std::vector<double>& fractions, std::uint64_t seed) {
  std::vector<SweepPoint> out;
  for (const double f : fractions) {
    SweepPoint pt;
    pt.fraction = f;
    double total = 0.0;
    for (const auto& c : clients) {
      const ExampleRefs subset = subsample_personalization(c.split.personalization, f, seed, c.client_id);
      if (subset.empty()) {
        ++pt.clients_skipped;
        continue;
      }
      total += personalizer(subset, c.client_id)(c.split.evaluation);
      ++pt.clients_used;
    }
    pt.mean_metric = pt.clients_used == 0 ? 0.0 : total / static_cast<double>(pt.clients_used);
    out.push_back(pt);
  }
  return out;
}

}  // namespace pfl
