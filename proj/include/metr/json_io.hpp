#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "metr/errors.hpp"
#include "metr/labelspace.hpp"
#include "metr/scene.hpp"
#include "metr/trainer.hpp"

namespace metr {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// scenes: JSON lines, one scene per line

inline json scene_to_json(const Scene& scene) {
  json j;
  j["id"] = scene.id;
  j["dataset"] = scene.dataset_id;
  j["grid"] = {scene.grid_h, scene.grid_w};
  json objs = json::array();
  for (const auto& o : scene.objects) {
    objs.push_back({{"category", o.category_id}, {"box", {o.box.cx, o.box.cy, o.box.w, o.box.h}}});
  }
  j["objects"] = objs;
  json unl = json::array();
  for (const auto& o : scene.unlabeled) {
    unl.push_back({{"category", o.category_id}, {"box", {o.box.cx, o.box.cy, o.box.w, o.box.h}}});
  }
  j["unlabeled"] = unl;
  return j;
}

inline Scene scene_from_json(const json& j) {
  Scene s;
  s.id = j.at("id").get<int>();
  s.dataset_id = j.at("dataset").get<int>();
  s.grid_h = j.at("grid").at(0).get<int>();
  s.grid_w = j.at("grid").at(1).get<int>();
  auto parse_obj = [](const json& o) {
    SceneObject obj;
    obj.category_id = o.at("category").get<int>();
    const auto& b = o.at("box");
    obj.box = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
    return obj;
  };
  for (const auto& o : j.at("objects")) s.objects.push_back(parse_obj(o));
  if (j.contains("unlabeled")) {
    for (const auto& o : j.at("unlabeled")) s.unlabeled.push_back(parse_obj(o));
  }
  return s;
}

inline void save_scenes(const std::string& path, const std::vector<Scene>& scenes) {
  std::ofstream out(path);
  if (!out) throw ConfigError("save_scenes: cannot open " + path);
  for (const auto& scene : scenes) out << scene_to_json(scene).dump() << '\n';
}

inline std::vector<Scene> load_scenes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("load_scenes: cannot open " + path);
  std::vector<Scene> scenes;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    scenes.push_back(scene_from_json(json::parse(line)));
  }
  return scenes;
}

// ---------------------------------------------------------------------------
// label space sidecar (names, per-dataset maps, alias pairs)

inline json labelspace_to_json(const LabelSpace& space, const std::vector<std::pair<int, int>>& alias_pairs) {
  json j;
  json cats = json::array();
  for (const auto& e : space.entries()) {
    cats.push_back({{"id", e.global_id},
                    {"name", e.name},
                    {"datasets", std::vector<int>(e.source_datasets.begin(), e.source_datasets.end())}});
  }
  j["categories"] = cats;
  json ds = json::array();
  for (const auto& d : space.datasets()) {
    ds.push_back({{"id", d.dataset_id}, {"name", d.name}, {"classes", d.local_to_global}});
  }
  j["datasets"] = ds;
  json aliases = json::array();
  for (const auto& [a, b] : alias_pairs) aliases.push_back({a, b});
  j["alias_pairs"] = aliases;
  return j;
}

struct LabelSpaceInfo {
  LabelSpace space;
  std::vector<DatasetDescriptor> datasets;
  std::vector<std::pair<int, int>> alias_pairs;
};

inline LabelSpaceInfo labelspace_from_json(const json& j) {
  LabelSpaceInfo info;
  // rebuild through registration to keep ids dense and names normalized
  std::vector<std::pair<std::string, std::vector<std::string>>> datasets;
  std::vector<std::string> names(j.at("categories").size());
  for (const auto& c : j.at("categories")) names.at(c.at("id").get<int>()) = c.at("name").get<std::string>();
  for (const auto& d : j.at("datasets")) {
    std::vector<std::string> classes;
    for (int gid : d.at("classes").get<std::vector<int>>()) classes.push_back(names.at(gid));
    info.datasets.push_back(info.space.register_dataset(d.at("name").get<std::string>(), classes));
  }
  for (const auto& p : j.at("alias_pairs")) {
    info.alias_pairs.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
  }
  return info;
}

// ---------------------------------------------------------------------------
// reports (wall clock intentionally excluded: reports must be byte-stable)

inline json config_to_json(const BenchConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["n_datasets"] = cfg.n_datasets;
  j["classes_per_dataset"] = cfg.classes_per_dataset;
  j["alias_fraction"] = cfg.alias_fraction;
  j["images_per_dataset"] = cfg.images_per_dataset;
  j["grid"] = cfg.grid;
  j["d"] = cfg.d;
  j["top_k"] = cfg.top_k;
  j["n_per_class"] = cfg.n_per_class;
  j["epochs"] = cfg.epochs;
  j["lr"] = cfg.lr;
  j["mu_asl"] = cfg.mu_asl;
  j["matching_mode"] = matching_mode_name(cfg.matching_mode);
  j["supervise_negatives"] = cfg.supervise_negatives;
  j["freeze_embeddings"] = cfg.freeze_embeddings;
  return j;
}

inline BenchConfig config_from_json(const json& j) {
  BenchConfig cfg;
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.n_datasets = j.at("n_datasets").get<int>();
  cfg.classes_per_dataset = j.at("classes_per_dataset").get<int>();
  cfg.alias_fraction = j.at("alias_fraction").get<double>();
  cfg.images_per_dataset = j.at("images_per_dataset").get<int>();
  cfg.grid = j.at("grid").get<int>();
  cfg.d = j.at("d").get<int>();
  cfg.top_k = j.at("top_k").get<int>();
  cfg.n_per_class = j.at("n_per_class").get<int>();
  cfg.epochs = j.at("epochs").get<int>();
  cfg.lr = j.at("lr").get<double>();
  cfg.mu_asl = j.at("mu_asl").get<double>();
  cfg.matching_mode = parse_matching_mode(j.at("matching_mode").get<std::string>());
  cfg.supervise_negatives = j.at("supervise_negatives").get<bool>();
  cfg.freeze_embeddings = j.at("freeze_embeddings").get<bool>();
  return cfg;
}

inline json report_to_json(const RunReport& report) {
  json j;
  j["config"] = config_to_json(report.cfg);
  j["loss_curve"] = report.loss_curve;
  j["multilabel"] = {{"precision", report.multilabel_precision}, {"recall", report.multilabel_recall}};
  j["mean_ap"] = report.mean_ap;
  json per_class = json::object();
  for (const auto& [gid, ap] : report.per_class_ap) per_class[std::to_string(gid)] = ap;
  j["per_class_ap"] = per_class;
  json per_ds = json::object();
  for (const auto& [ds, ap] : report.per_dataset_map) per_ds[std::to_string(ds)] = ap;
  j["per_dataset_map"] = per_ds;
  j["diverged_at_epoch"] = report.diverged_at_epoch;
  return j;
}

inline json compare_to_json(const CompareReport& rep) {
  json j;
  j["group"] = report_to_json(rep.group);
  j["standard_merged"] = report_to_json(rep.merged);
  j["aliased_classes"] = rep.aliased_classes;
  j["group_alias_map"] = rep.group_alias_map;
  j["merged_alias_map"] = rep.merged_alias_map;
  json delta = json::object();
  for (const auto& [gid, v] : rep.ap_delta) delta[std::to_string(gid)] = v;
  j["ap_delta"] = delta;
  return j;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open " + path + " for writing");
  out << content;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// per_class.csv: one row per category with its AP and gt dataset coverage
inline std::string per_class_csv(const RunReport& report, const LabelSpace& space) {
  std::string csv = "category_id,name,ap\n";
  for (const auto& [gid, ap] : report.per_class_ap) {
    std::ostringstream row;
    row << gid << ',' << space.name_of(gid) << ',' << ap << '\n';
    csv += row.str();
  }
  return csv;
}

}  // namespace metr
