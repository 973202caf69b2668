#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "metr/cem.hpp"
#include "metr/errors.hpp"
#include "metr/geometry.hpp"
#include "metr/labelspace.hpp"
#include "metr/mat.hpp"
#include "metr/rng.hpp"

namespace metr {

enum class MatchingMode { kGroup, kStandardMerged };

inline MatchingMode parse_matching_mode(const std::string& s) {
  if (s == "group") return MatchingMode::kGroup;
  if (s == "standard_merged") return MatchingMode::kStandardMerged;
  throw ConfigError("unknown matching mode '" + s + "' (expected group|standard_merged)");
}

inline const char* matching_mode_name(MatchingMode m) {
  return m == MatchingMode::kGroup ? "group" : "standard_merged";
}

struct BenchConfig {
  uint64_t seed = 42;
  int n_datasets = 2;
  int classes_per_dataset = 8;
  double alias_fraction = 0.25;
  int images_per_dataset = 300;
  int grid = 8;  // feature map is grid x grid
  int d = 16;
  int top_k = 6;
  int n_per_class = 4;
  int epochs = 30;
  double lr = 0.05;
  double mu_asl = 1.0;
  MatchingMode matching_mode = MatchingMode::kGroup;
  bool supervise_negatives = true;
  bool freeze_embeddings = false;

  int num_categories() const { return n_datasets * classes_per_dataset; }

  void validate() const {
    if (n_datasets < 1) throw ConfigError("config: n_datasets must be >= 1");
    if (classes_per_dataset < 1) throw ConfigError("config: classes_per_dataset must be >= 1");
    if (alias_fraction < 0.0 || alias_fraction > 1.0) throw ConfigError("config: alias_fraction must be in [0,1]");
    if (images_per_dataset < 1) throw ConfigError("config: images_per_dataset must be >= 1");
    if (grid < 2) throw ConfigError("config: grid must be >= 2");
    if (d < 2) throw ConfigError("config: d must be >= 2");
    if (top_k < 1) throw ConfigError("config: top_k must be >= 1");
    if (n_per_class < 1) throw ConfigError("config: queries per class must be >= 1");
    if (epochs < 0) throw ConfigError("config: epochs must be >= 0");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("config: lr must be finite and >= 0");
    if (!(mu_asl >= 0.0) || !std::isfinite(mu_asl)) throw ConfigError("config: mu_asl must be >= 0");
    if (n_datasets > 1 && alias_fraction > 0.0 && classes_per_dataset < 2) {
      throw ConfigError("config: aliasing needs at least 2 classes per dataset");
    }
  }
};

struct SceneObject {
  int category_id = -1;  // global id
  Box box;
};

struct Scene {
  int id = 0;
  int dataset_id = 0;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<SceneObject> objects;    // annotated in this dataset's taxonomy
  std::vector<SceneObject> unlabeled;  // present in the features, not annotated

  std::set<int> gt_classes() const {
    std::set<int> s;
    for (const auto& o : objects) s.insert(o.category_id);
    return s;
  }
};

struct GeneratedData {
  LabelSpace space;
  EmbeddingTable table;
  std::vector<DatasetDescriptor> datasets;
  std::vector<std::pair<int, int>> alias_pairs;  // (anchor gid, alias gid)
  std::vector<Scene> scenes;
};

namespace detail {

// Closest orthonormal set to the raw synthetic rows (symmetric
// orthogonalization). Permutation-equivariant, so registration order
// cannot leak into the result. Requires K <= d; callers fall back to the
// raw rows otherwise.
inline Mat orthogonalize_rows(const Mat& e) {
  Mat gram = matmul_nt(e, e);
  Mat vecs;
  Vec eig = jacobi_eigh(gram, vecs);
  const int k = e.rows;
  Mat inv_sqrt(k, k);
  for (int a = 0; a < k; ++a) {
    if (eig[a] <= 1e-12) throw NumericError("orthogonalize_rows: rank-deficient embedding set");
    const double s = 1.0 / std::sqrt(eig[a]);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) inv_sqrt(i, j) += vecs(i, a) * s * vecs(j, a);
  }
  return matmul(inv_sqrt, e);
}

inline Box random_box(Rng& rng) {
  const double w = rng.uniform(0.12, 0.5);
  const double h = rng.uniform(0.12, 0.5);
  const double cx = rng.uniform(w / 2.0, 1.0 - w / 2.0);
  const double cy = rng.uniform(h / 2.0, 1.0 - h / 2.0);
  return {cx, cy, w, h};
}

}  // namespace detail

// Builds the unified embedding table for a set of registered names:
// deterministic synthetic vectors, decorrelated when K <= d, and alias
// pairs forced to cosine 0.97.
inline EmbeddingTable build_embedding_table(const LabelSpace& space, int d, uint64_t seed,
                                            const std::vector<std::pair<int, int>>& alias_pairs) {
  EmbeddingTable table;
  table.k = space.size();
  table.d = d;
  table.rows = Mat(table.k, d);
  for (const auto& entry : space.entries()) {
    const Vec v = synth_embedding(entry.name, d, seed);
    for (int j = 0; j < d; ++j) table.rows(entry.global_id, j) = v[j];
  }
  if (table.k <= d && table.k >= 2) {
    table.rows = detail::orthogonalize_rows(table.rows);
  }
  for (const auto& [anchor, alias] : alias_pairs) {
    Vec a(d), b(d);
    for (int j = 0; j < d; ++j) {
      a[j] = table.rows(anchor, j);
      b[j] = table.rows(alias, j);
    }
    const Vec forced = force_cosine(a, b, 0.97);
    for (int j = 0; j < d; ++j) table.rows(alias, j) = forced[j];
  }
  return table;
}

// Scenes for one dataset; `salt` separates the train and eval streams.
inline std::vector<Scene> generate_scenes(const BenchConfig& cfg, const std::vector<DatasetDescriptor>& datasets,
                                          const std::vector<std::pair<int, int>>& alias_pairs, int per_dataset,
                                          const std::string& salt) {
  std::set<int> aliased;
  for (const auto& [a, b] : alias_pairs) {
    aliased.insert(a);
    aliased.insert(b);
  }
  // classes exclusive to one dataset (not part of any alias pair)
  std::vector<std::vector<int>> exclusive(datasets.size());
  for (size_t ds = 0; ds < datasets.size(); ++ds) {
    for (int gid : datasets[ds].local_to_global) {
      if (!aliased.count(gid)) exclusive[ds].push_back(gid);
    }
  }

  std::vector<Scene> scenes;
  int next_id = 0;
  for (size_t ds = 0; ds < datasets.size(); ++ds) {
    const auto& desc = datasets[ds];
    const int n_local = static_cast<int>(desc.local_to_global.size());
    Rng rng(mix_seed(mix_seed(cfg.seed, salt), static_cast<uint64_t>(ds)));
    for (int img = 0; img < per_dataset; ++img) {
      Scene scene;
      scene.id = next_id++;
      scene.dataset_id = desc.dataset_id;
      scene.grid_h = cfg.grid;
      scene.grid_w = cfg.grid;
      const int max_obj = std::min(cfg.top_k, n_local);
      const int n_obj = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(max_obj)));
      // distinct local classes via partial Fisher-Yates
      std::vector<int> perm(n_local);
      for (int i = 0; i < n_local; ++i) perm[i] = i;
      for (int i = 0; i < n_obj; ++i) {
        const int j = i + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n_local - i)));
        std::swap(perm[i], perm[j]);
      }
      bool has_alias = false;
      for (int i = 0; i < n_obj; ++i) {
        const int gid = desc.local_to_global[perm[i]];
        scene.objects.push_back({gid, detail::random_box(rng)});
        if (aliased.count(gid)) has_alias = true;
      }
      // cross-dataset background conflict: alias scenes may contain an
      // object of another dataset's exclusive class, visible but unlabeled
      if (has_alias && datasets.size() > 1 && rng.uniform() < 0.3) {
        const size_t other = (ds + 1 + rng.uniform_int(datasets.size() - 1)) % datasets.size();
        if (!exclusive[other].empty()) {
          const int gid = exclusive[other][rng.uniform_int(exclusive[other].size())];
          scene.unlabeled.push_back({gid, detail::random_box(rng)});
        }
      }
      scenes.push_back(std::move(scene));
    }
  }
  return scenes;
}

// Synthetic taxonomies with manufactured conflicts: dataset 0 holds the
// canonical concept names; each later dataset renames the first
// round(alias_fraction * classes) concepts (distinct string, near-identical
// embedding) and contributes fresh concepts for the rest.
inline GeneratedData generate_datasets(const BenchConfig& cfg) {
  cfg.validate();
  GeneratedData data;
  const int n_alias = cfg.n_datasets > 1
                          ? static_cast<int>(std::lround(cfg.alias_fraction * cfg.classes_per_dataset))
                          : 0;
  if (n_alias > cfg.classes_per_dataset) throw ConfigError("generate_datasets: infeasible alias count");

  std::vector<std::vector<std::string>> taxonomies(cfg.n_datasets);
  for (int ds = 0; ds < cfg.n_datasets; ++ds) {
    for (int c = 0; c < cfg.classes_per_dataset; ++c) {
      char buf[32];
      if (ds > 0 && c < n_alias) {
        std::snprintf(buf, sizeof(buf), "alt%d obj%02d", ds, c);  // alias of dataset 0's concept c
      } else {
        std::snprintf(buf, sizeof(buf), "ds%d obj%02d", ds, c);
      }
      taxonomies[ds].push_back(buf);
    }
  }
  for (int ds = 0; ds < cfg.n_datasets; ++ds) {
    data.datasets.push_back(data.space.register_dataset("dataset" + std::to_string(ds), taxonomies[ds]));
  }
  for (int ds = 1; ds < cfg.n_datasets; ++ds) {
    for (int c = 0; c < n_alias; ++c) {
      data.alias_pairs.emplace_back(data.datasets[0].local_to_global[c], data.datasets[ds].local_to_global[c]);
    }
  }
  data.table = build_embedding_table(data.space, cfg.d, cfg.seed, data.alias_pairs);
  data.table.learnable = !cfg.freeze_embeddings;
  data.scenes = generate_scenes(cfg, data.datasets, data.alias_pairs, cfg.images_per_dataset, "train-scenes");
  return data;
}

// Fixed 2-d sinusoidal encoding of a cell center, amplitude 0.5.
inline void positional_encoding(double x, double y, int d, double* out) {
  const int quarter = std::max(1, d / 4);
  const double amp = 0.5;
  for (int j = 0; j < d; ++j) out[j] = 0.0;
  for (int j = 0; j < quarter; ++j) {
    const double freq = 3.14159265358979323846 * std::pow(2.0, j);
    if (2 * j + 1 < d / 2) {
      out[2 * j] = amp * std::sin(freq * x);
      out[2 * j + 1] = amp * std::cos(freq * x);
    }
    if (d / 2 + 2 * j + 1 < d) {
      out[d / 2 + 2 * j] = amp * std::sin(freq * y);
      out[d / 2 + 2 * j + 1] = amp * std::cos(freq * y);
    }
  }
}

// F(cell) = sum of embeddings of the objects covering the cell center
// (labeled and unlabeled alike) + positional encoding + N(0, 0.05^2) noise.
// The noise stream depends only on (seed, scene.id, grid), so feature maps
// of scenes differing only in objects decompose additively.
inline Features synthesize_features(const Scene& scene, const EmbeddingTable& table, uint64_t seed) {
  Features feat;
  feat.h = scene.grid_h;
  feat.w = scene.grid_w;
  feat.f = Mat(feat.cells(), table.d);
  Rng noise(mix_seed(mix_seed(seed, "features"), static_cast<uint64_t>(scene.id)));
  for (double& v : feat.f.a) v = noise.normal(0.0, 0.05);

  std::vector<double> pe(table.d);
  for (int r = 0; r < feat.h; ++r) {
    for (int c = 0; c < feat.w; ++c) {
      const int cell = r * feat.w + c;
      const double cx = (c + 0.5) / feat.w;
      const double cy = (r + 0.5) / feat.h;
      positional_encoding(cx, cy, table.d, pe.data());
      double* row = feat.f.row(cell);
      for (int j = 0; j < table.d; ++j) row[j] += pe[j];
      auto add_if_covered = [&](const SceneObject& obj) {
        const BoxCorners bc = to_corners(obj.box);
        if (cx >= bc.x1 && cx <= bc.x2 && cy >= bc.y1 && cy <= bc.y2) {
          for (int j = 0; j < table.d; ++j) row[j] += table.rows(obj.category_id, j);
        }
      };
      for (const auto& obj : scene.objects) add_if_covered(obj);
      for (const auto& obj : scene.unlabeled) add_if_covered(obj);
    }
  }
  return feat;
}

}  // namespace metr
