#include "pfl/dataset_io.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <string>

namespace pfl {

using nlohmann::json;

void write_dataset(const FederatedDataset& ds, std::ostream& out) {
  out << json{{"dataset",
               {{"task", to_string(ds.task)}, {"feature_dim", ds.feature_dim}, {"num_classes", ds.num_classes}}}}
             .dump()
      << '\n';
  for (const auto& c : ds.clients) {
    json line;
    line["client_id"] = c.client_id;
    json examples = json::array();
    for (const auto& e : c.examples) {
      json je{{"x", e.x}, {"y", e.y}};
      if (e.t) je["t"] = *e.t;
      examples.push_back(std::move(je));
    }
    line["examples"] = std::move(examples);
    if (const auto it = ds.client_role.find(c.client_id); it != ds.client_role.end()) {
      line["role"] = to_string(it->second);
    }
    if (c.has_tags()) {
      json tags = json::array();
      for (const auto t : c.tags) tags.push_back(to_string(t));
      line["tags"] = std::move(tags);
    }
    out << line.dump() << '\n';
  }
}

void write_dataset(const FederatedDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset file: " + path.string());
  write_dataset(ds, out);
}

FederatedDataset read_dataset(std::istream& in, TaskKind default_task) {
  FederatedDataset ds;
  ds.task = default_task;
  bool have_header = false;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
    if (j.contains("dataset")) {
      const auto& h = j.at("dataset");
      ds.task = parse_task_kind(h.at("task").get<std::string>());
      ds.feature_dim = h.at("feature_dim").get<std::size_t>();
      ds.num_classes = h.at("num_classes").get<std::size_t>();
      have_header = true;
      continue;
    }
    ClientDataset c;
    c.client_id = j.at("client_id").get<std::string>();
    for (const auto& je : j.at("examples")) {
      Example e;
      e.x = je.at("x").get<std::vector<double>>();
      e.y = je.at("y").get<double>();
      if (je.contains("t")) e.t = je.at("t").get<std::int64_t>();
      c.examples.push_back(std::move(e));
    }
    if (j.contains("tags")) {
      for (const auto& t : j.at("tags")) c.tags.push_back(parse_split_tag(t.get<std::string>()));
    }
    if (j.contains("role")) ds.client_role[c.client_id] = parse_client_role(j.at("role").get<std::string>());
    ds.clients.push_back(std::move(c));
  }
  if (!have_header) {
    double max_label = 0.0;
    for (const auto& c : ds.clients) {
      for (const auto& e : c.examples) {
        if (ds.feature_dim == 0) ds.feature_dim = e.x.size();
        max_label = std::max(max_label, e.y);
      }
    }
    ds.num_classes = ds.task == TaskKind::classification ? static_cast<std::size_t>(max_label) + 1 : 1;
  }
  return ds;
}

FederatedDataset read_dataset(const std::filesystem::path& path, TaskKind default_task) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path.string());
  return read_dataset(in, default_task);
}

}  // namespace pfl
