#include "pfl/types.hpp"

#include <array>
#include <cmath>
#include <set>
#include <sstream>

namespace pfl {

namespace {

template <typename Enum, std::size_t N>
Enum parse_enum(std::string_view s, const std::array<std::pair<std::string_view, Enum>, N>& table,
                std::string_view what) {
  for (const auto& [name, value] : table) {
    if (name == s) return value;
  }
  throw ConfigError("unknown " + std::string(what) + ": '" + std::string(s) + "'");
}

constexpr std::array<std::pair<std::string_view, TaskKind>, 2> kTaskKinds{{
    {"classification", TaskKind::classification},
    {"regression", TaskKind::regression},
}};
constexpr std::array<std::pair<std::string_view, MetricKind>, 2> kMetricKinds{{
    {"accuracy", MetricKind::accuracy},
    {"mse", MetricKind::mse},
}};
constexpr std::array<std::pair<std::string_view, Regime>, 2> kRegimes{{
    {"cross_device", Regime::cross_device},
    {"cross_silo", Regime::cross_silo},
}};
constexpr std::array<std::pair<std::string_view, SplitTag>, 5> kSplitTags{{
    {"train", SplitTag::train},
    {"valid", SplitTag::valid},
    {"test", SplitTag::test},
    {"personalization", SplitTag::personalization},
    {"evaluation", SplitTag::evaluation},
}};
constexpr std::array<std::pair<std::string_view, ClientRole>, 4> kRoles{{
    {"train", ClientRole::train},
    {"valid", ClientRole::valid},
    {"test", ClientRole::test},
    {"all", ClientRole::all},
}};
constexpr std::array<std::pair<std::string_view, ModelFamily>, 5> kFamilies{{
    {"linear_regression", ModelFamily::linear_regression},
    {"linear_svm", ModelFamily::linear_svm},
    {"softmax_classifier", ModelFamily::softmax_classifier},
    {"mlp_classifier", ModelFamily::mlp_classifier},
    {"mlp_regressor", ModelFamily::mlp_regressor},
}};

template <typename Enum, std::size_t N>
std::string_view name_of(Enum value, const std::array<std::pair<std::string_view, Enum>, N>& table) {
  for (const auto& [name, v] : table) {
    if (v == value) return name;
  }
  return "unknown";
}

}  // namespace

std::string_view to_string(TaskKind k) { return name_of(k, kTaskKinds); }
std::string_view to_string(MetricKind k) { return name_of(k, kMetricKinds); }
std::string_view to_string(Regime r) { return name_of(r, kRegimes); }
std::string_view to_string(SplitTag t) { return name_of(t, kSplitTags); }
std::string_view to_string(ClientRole r) { return name_of(r, kRoles); }
std::string_view to_string(ModelFamily f) { return name_of(f, kFamilies); }

TaskKind parse_task_kind(std::string_view s) { return parse_enum(s, kTaskKinds, "task kind"); }
MetricKind parse_metric_kind(std::string_view s) { return parse_enum(s, kMetricKinds, "metric kind"); }
Regime parse_regime(std::string_view s) { return parse_enum(s, kRegimes, "regime"); }
SplitTag parse_split_tag(std::string_view s) { return parse_enum(s, kSplitTags, "split tag"); }
ClientRole parse_client_role(std::string_view s) { return parse_enum(s, kRoles, "client role"); }
ModelFamily parse_model_family(std::string_view s) { return parse_enum(s, kFamilies, "model family"); }

ExampleRefs refs_of(std::span<const Example> examples) {
  ExampleRefs out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(&e);
  return out;
}

bool ClientDataset::has_tag(SplitTag tag) const {
  for (const auto t : tags) {
    if (t == tag) return true;
  }
  return false;
}

ExampleRefs ClientDataset::select(SplitTag tag) const {
  ExampleRefs out;
  for (std::size_t i = 0; i < tags.size() && i < examples.size(); ++i) {
    if (tags[i] == tag) out.push_back(&examples[i]);
  }
  return out;
}

const ClientDataset& FederatedDataset::client(std::string_view id) const {
  for (const auto& c : clients) {
    if (c.client_id == id) return c;
  }
  throw std::out_of_range("unknown client id: " + std::string(id));
}

std::vector<const ClientDataset*> FederatedDataset::clients_with_role(ClientRole role) const {
  std::vector<const ClientDataset*> out;
  for (const auto& c : clients) {
    const auto it = client_role.find(c.client_id);
    if (it != client_role.end() && it->second == role) out.push_back(&c);
  }
  return out;
}

const LayerSlice& ModelParams::layer(std::string_view name) const {
  for (const auto& l : layers) {
    if (l.name == name) return l;
  }
  throw std::out_of_range("unknown layer: " + std::string(name));
}

std::vector<std::string> validate_dataset(const FederatedDataset& ds) {
  std::vector<std::string> report;
  auto add = [&report](const std::string& msg) { report.push_back(msg); };

  if (ds.feature_dim == 0) add("feature_dim must be positive");
  if (ds.num_classes == 0) add("num_classes must be positive");
  if (ds.task == TaskKind::regression && ds.num_classes != 1) add("regression datasets use num_classes = 1");

  std::set<std::string> seen;
  for (const auto& c : ds.clients) {
    if (!seen.insert(c.client_id).second) add("duplicate client_id '" + c.client_id + "'");
    for (std::size_t i = 0; i < c.examples.size(); ++i) {
      const Example& e = c.examples[i];
      if (e.x.size() != ds.feature_dim) {
        std::ostringstream msg;
        msg << "client '" << c.client_id << "' example " << i << ": feature dimension " << e.x.size()
            << " != " << ds.feature_dim;
        add(msg.str());
      }
      if (ds.task == TaskKind::classification) {
        const bool integral = std::floor(e.y) == e.y;
        if (!integral || e.y < 0 || e.y >= static_cast<double>(ds.num_classes)) {
          std::ostringstream msg;
          msg << "client '" << c.client_id << "' example " << i << ": label " << e.y
              << " is not a class index in [0, " << ds.num_classes << ")";
          add(msg.str());
        }
      } else if (!std::isfinite(e.y)) {
        add("client '" + c.client_id + "' has a non-finite regression target");
      }
    }
    if (c.has_tags() && c.tags.size() != c.examples.size()) {
      add("client '" + c.client_id + "': split tags do not cover every example exactly once");
    }
  }

  if (ds.client_role.empty()) return report;

  for (const auto& c : ds.clients) {
    if (!ds.client_role.contains(c.client_id)) add("client '" + c.client_id + "' has no role");
  }
  for (const auto& [id, role] : ds.client_role) {
    if (!seen.contains(id)) add("role assigned to unknown client '" + id + "'");
  }

  const bool silo = ds.client_role.begin()->second == ClientRole::all;
  if (silo) {
    for (const auto& c : ds.clients) {
      const auto it = ds.client_role.find(c.client_id);
      if (it != ds.client_role.end() && it->second != ClientRole::all) {
        add("client '" + c.client_id + "': cross-silo datasets give every client role 'all'");
      }
      if (!c.has_tags()) {
        add("client '" + c.client_id + "': cross-silo clients need per-example train/valid/test tags");
        continue;
      }
      for (const auto t : c.tags) {
        if (t != SplitTag::train && t != SplitTag::valid && t != SplitTag::test) {
          add("client '" + c.client_id + "': cross-silo tag '" + std::string(to_string(t)) + "' is not allowed");
          break;
        }
      }
    }
    return report;
  }

  std::map<ClientRole, std::size_t> counts;
  for (const auto& [id, role] : ds.client_role) ++counts[role];
  if (counts[ClientRole::all] > 0) add("cross-device datasets cannot mix in role 'all'");
  for (const ClientRole r : {ClientRole::train, ClientRole::valid, ClientRole::test}) {
    if (counts[r] == 0) add("missing " + std::string(to_string(r)) + " clients");
  }
  for (const auto& c : ds.clients) {
    const auto it = ds.client_role.find(c.client_id);
    if (it == ds.client_role.end()) continue;
    if (it->second == ClientRole::valid || it->second == ClientRole::test) {
      if (!c.has_tags()) {
        add("client '" + c.client_id + "': valid/test clients need personalization/evaluation tags");
        continue;
      }
      for (const auto t : c.tags) {
        if (t != SplitTag::personalization && t != SplitTag::evaluation) {
          add("client '" + c.client_id + "': tag '" + std::string(to_string(t)) +
              "' is not a personalization/evaluation tag");
          break;
        }
      }
    }
  }
  return report;
}

}  // namespace pfl
