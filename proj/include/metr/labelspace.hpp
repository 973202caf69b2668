#pragma once

#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "metr/errors.hpp"
#include "metr/mat.hpp"
#include "metr/rng.hpp"

namespace metr {

// One category of the unified label space. Identical normalized names from
// different datasets share one entry (and one embedding row); distinct
// names always get distinct entries, synonyms included.
struct CategoryEntry {
  int global_id = -1;
  std::string name;
  std::set<int> source_datasets;
  int embedding_row = -1;
};

struct DatasetDescriptor {
  int dataset_id = -1;
  std::string name;
  std::vector<std::string> local_classes;  // normalized
  std::vector<int> local_to_global;
};

struct EmbeddingTable {
  int k = 0;
  int d = 0;
  Mat rows;  // k x d
  bool learnable = true;
};

inline std::string normalize_name(const std::string& raw) {
  std::string out;
  out.reserve(raw.size());
  bool pending_space = false;
  for (char c : raw) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!out.empty()) pending_space = true;
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

class LabelSpace {
 public:
  DatasetDescriptor register_dataset(const std::string& dataset_name, const std::vector<std::string>& class_names) {
    if (class_names.empty()) throw ConfigError("register_dataset: empty class list for " + dataset_name);
    DatasetDescriptor desc;
    desc.dataset_id = static_cast<int>(datasets_.size());
    desc.name = dataset_name;
    std::set<std::string> seen;
    for (const auto& raw : class_names) {
      const std::string name = normalize_name(raw);
      if (name.empty()) throw ConfigError("register_dataset: empty class name in " + dataset_name);
      if (!seen.insert(name).second) {
        throw ConfigError("register_dataset: duplicate class '" + name + "' in " + dataset_name);
      }
      int gid;
      auto it = by_name_.find(name);
      if (it == by_name_.end()) {
        gid = static_cast<int>(entries_.size());
        entries_.push_back({gid, name, {desc.dataset_id}, gid});
        by_name_.emplace(name, gid);
      } else {
        gid = it->second;
        entries_[gid].source_datasets.insert(desc.dataset_id);
      }
      desc.local_classes.push_back(name);
      desc.local_to_global.push_back(gid);
    }
    datasets_.push_back(desc);
    return desc;
  }

  int size() const { return static_cast<int>(entries_.size()); }
  const std::vector<CategoryEntry>& entries() const { return entries_; }
  const std::vector<DatasetDescriptor>& datasets() const { return datasets_; }

  std::optional<int> find(const std::string& raw) const {
    auto it = by_name_.find(normalize_name(raw));
    if (it == by_name_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& name_of(int global_id) const { return entries_.at(global_id).name; }

 private:
  std::vector<CategoryEntry> entries_;
  std::vector<DatasetDescriptor> datasets_;
  std::map<std::string, int> by_name_;
};

// Deterministic unit-norm stand-in for a text-encoder embedding.
inline Vec synth_embedding(const std::string& name, int d, uint64_t seed) {
  if (d < 2) throw ConfigError("synth_embedding: d must be >= 2");
  Rng rng(mix_seed(seed, normalize_name(name)));
  Vec v(d);
  double norm_sq = 0.0;
  for (int i = 0; i < d; ++i) {
    v[i] = rng.normal();
    norm_sq += v[i] * v[i];
  }
  const double inv = 1.0 / std::sqrt(norm_sq);
  for (double& x : v) x *= inv;
  return v;
}

inline double cosine(const Vec& a, const Vec& b) { return dot(a, b) / (norm2(a) * norm2(b)); }

// Rebuild `target` so that cos(anchor, target) equals `target_cos`, keeping
// target's component orthogonal to anchor as the free direction. Both
// inputs must be unit vectors.
inline Vec force_cosine(const Vec& anchor, const Vec& target, double target_cos) {
  const double c = dot(anchor, target);
  Vec orth(target.size());
  for (size_t i = 0; i < target.size(); ++i) orth[i] = target[i] - c * anchor[i];
  double n = norm2(orth);
  if (n < 1e-12) {
    // target is (anti)parallel; pick a deterministic fallback direction
    orth.assign(target.size(), 0.0);
    size_t axis = 0;
    double amin = std::fabs(anchor[0]);
    for (size_t i = 1; i < anchor.size(); ++i) {
      if (std::fabs(anchor[i]) < amin) {
        amin = std::fabs(anchor[i]);
        axis = i;
      }
    }
    orth[axis] = 1.0;
    const double proj = dot(anchor, orth);
    for (size_t i = 0; i < orth.size(); ++i) orth[i] -= proj * anchor[i];
    n = norm2(orth);
  }
  const double s = std::sqrt(std::max(0.0, 1.0 - target_cos * target_cos));
  Vec out(target.size());
  for (size_t i = 0; i < target.size(); ++i) out[i] = target_cos * anchor[i] + s * orth[i] / n;
  return out;
}

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& tok, const char* context) {
  double v = 0.0;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
    throw DomainError(std::string(context) + ": bad number '" + tok + "'");
  }
  return v;
}

}  // namespace detail

// Text format: a "K d" header, then one line per category with the
// normalized name followed by d decimals. Values are printed with
// shortest-round-trip formatting so save/load is bit-exact.
inline void save_embeddings(const std::string& path, const std::vector<std::string>& names,
                            const EmbeddingTable& table) {
  if (static_cast<int>(names.size()) != table.k) throw ShapeError("save_embeddings: names/table size mismatch");
  std::ofstream out(path);
  if (!out) throw ConfigError("save_embeddings: cannot open " + path);
  out << table.k << ' ' << table.d << '\n';
  for (int i = 0; i < table.k; ++i) {
    out << names[i];
    for (int j = 0; j < table.d; ++j) out << ' ' << detail::format_double(table.rows(i, j));
    out << '\n';
  }
}

// Loads the table in the label space's global-id order; every registered
// category must be present with the right dimension.
inline EmbeddingTable load_embeddings(const std::string& path, const LabelSpace& space) {
  std::ifstream in(path);
  if (!in) throw ConfigError("load_embeddings: cannot open " + path);
  int k = 0, d = 0;
  if (!(in >> k >> d) || k <= 0 || d <= 0) throw DomainError("load_embeddings: bad header in " + path);
  std::string line;
  std::getline(in, line);
  std::map<std::string, Vec> by_name;
  for (int i = 0; i < k; ++i) {
    if (!std::getline(in, line)) throw DomainError("load_embeddings: truncated file " + path);
    std::istringstream ls(line);
    std::vector<std::string> toks;
    std::string tok;
    while (ls >> tok) toks.push_back(tok);
    if (static_cast<int>(toks.size()) < d + 1) {
      throw ShapeError("load_embeddings: row has " + std::to_string(toks.size()) + " tokens, need name + " +
                       std::to_string(d) + " values");
    }
    // name may contain single spaces: values are the last d tokens
    const size_t name_toks = toks.size() - static_cast<size_t>(d);
    std::string name = toks[0];
    for (size_t t = 1; t < name_toks; ++t) name += " " + toks[t];
    Vec v(d);
    for (int j = 0; j < d; ++j) v[j] = detail::parse_double(toks[name_toks + j], "load_embeddings");
    by_name.emplace(normalize_name(name), std::move(v));
  }
  EmbeddingTable table;
  table.k = space.size();
  table.d = d;
  table.rows = Mat(table.k, d);
  for (const auto& entry : space.entries()) {
    auto it = by_name.find(entry.name);
    if (it == by_name.end()) throw DomainError("embedding missing for category: " + entry.name);
    if (static_cast<int>(it->second.size()) != d) throw ShapeError("load_embeddings: dimension mismatch");
    for (int j = 0; j < d; ++j) table.rows(entry.global_id, j) = it->second[j];
  }
  return table;
}

}  // namespace metr
