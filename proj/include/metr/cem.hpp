#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>
#include <vector>

#include "metr/errors.hpp"
#include "metr/labelspace.hpp"
#include "metr/losses.hpp"
#include "metr/mat.hpp"
#include "metr/rng.hpp"

namespace metr {

// Encoder-feature stand-in: one d-vector per grid cell, row-major over (h, w).
struct Features {
  int h = 0;
  int w = 0;
  Mat f;  // (h*w) x d

  int cells() const { return h * w; }
};

// Per-dimension scale + shift, the "norm" of the class-decoder block.
struct AffineNorm {
  Vec scale;
  Vec shift;

  static AffineNorm identity(int d) {
    AffineNorm n;
    n.scale.assign(d, 1.0);
    n.shift.assign(d, 0.0);
    return n;
  }
};

// Cross-attention + FFN block without self-attention. Used both for the
// class-decoder layers of the CEM and for the toy query decoder.
struct ClassDecoderLayerParams {
  Mat wq, wk, wv, wo;  // d x d
  AffineNorm norm1, norm2;
  Mat w1;  // d x dff
  Vec b1;  // dff
  Mat w2;  // dff x d
  Vec b2;  // d
};

constexpr int kNumClassDecoderLayers = 2;

struct CemParams {
  std::array<ClassDecoderLayerParams, kNumClassDecoderLayers> layers;
  Mat score_proj;  // d x d
  Vec bias;        // K
};

struct CategoryScores {
  Vec s;  // K entries in (0,1)
};

// ---------------------------------------------------------------------------
// initialization & optimizer helpers

inline Mat uniform_mat(int r, int c, double bound, Rng& rng) {
  Mat m(r, c);
  for (double& v : m.a) v = rng.uniform(-bound, bound);
  return m;
}

inline ClassDecoderLayerParams init_class_decoder_layer(int d, int dff, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  ClassDecoderLayerParams p;
  p.wq = uniform_mat(d, d, bound, rng);
  p.wk = uniform_mat(d, d, bound, rng);
  p.wv = uniform_mat(d, d, bound, rng);
  p.wo = uniform_mat(d, d, bound, rng);
  p.norm1 = AffineNorm::identity(d);
  p.norm2 = AffineNorm::identity(d);
  p.w1 = uniform_mat(d, dff, bound, rng);
  p.b1.assign(dff, 0.0);
  p.w2 = uniform_mat(dff, d, bound, rng);
  p.b2.assign(d, 0.0);
  return p;
}

inline CemParams init_cem_params(int k, int d, Rng& rng) {
  CemParams p;
  const int dff = 2 * d;
  for (auto& layer : p.layers) layer = init_class_decoder_layer(d, dff, rng);
  p.score_proj = uniform_mat(d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  p.bias.assign(k, 0.0);
  return p;
}

inline ClassDecoderLayerParams zeros_like(const ClassDecoderLayerParams& p) {
  ClassDecoderLayerParams g;
  g.wq = Mat(p.wq.rows, p.wq.cols);
  g.wk = Mat(p.wk.rows, p.wk.cols);
  g.wv = Mat(p.wv.rows, p.wv.cols);
  g.wo = Mat(p.wo.rows, p.wo.cols);
  g.norm1.scale.assign(p.norm1.scale.size(), 0.0);
  g.norm1.shift.assign(p.norm1.shift.size(), 0.0);
  g.norm2.scale.assign(p.norm2.scale.size(), 0.0);
  g.norm2.shift.assign(p.norm2.shift.size(), 0.0);
  g.w1 = Mat(p.w1.rows, p.w1.cols);
  g.b1.assign(p.b1.size(), 0.0);
  g.w2 = Mat(p.w2.rows, p.w2.cols);
  g.b2.assign(p.b2.size(), 0.0);
  return g;
}

inline CemParams zeros_like(const CemParams& p) {
  CemParams g;
  for (int i = 0; i < kNumClassDecoderLayers; ++i) g.layers[i] = zeros_like(p.layers[i]);
  g.score_proj = Mat(p.score_proj.rows, p.score_proj.cols);
  g.bias.assign(p.bias.size(), 0.0);
  return g;
}

// v = momentum * v + g; x -= lr * v
inline void sgd_step(Vec& x, Vec& v, const Vec& g, double lr, double momentum) {
  for (size_t i = 0; i < x.size(); ++i) {
    v[i] = momentum * v[i] + g[i];
    x[i] -= lr * v[i];
  }
}

inline void sgd_step(Mat& x, Mat& v, const Mat& g, double lr, double momentum) { sgd_step(x.a, v.a, g.a, lr, momentum); }

inline void sgd_step(ClassDecoderLayerParams& p, ClassDecoderLayerParams& v, const ClassDecoderLayerParams& g,
                     double lr, double momentum) {
  sgd_step(p.wq, v.wq, g.wq, lr, momentum);
  sgd_step(p.wk, v.wk, g.wk, lr, momentum);
  sgd_step(p.wv, v.wv, g.wv, lr, momentum);
  sgd_step(p.wo, v.wo, g.wo, lr, momentum);
  sgd_step(p.norm1.scale, v.norm1.scale, g.norm1.scale, lr, momentum);
  sgd_step(p.norm1.shift, v.norm1.shift, g.norm1.shift, lr, momentum);
  sgd_step(p.norm2.scale, v.norm2.scale, g.norm2.scale, lr, momentum);
  sgd_step(p.norm2.shift, v.norm2.shift, g.norm2.shift, lr, momentum);
  sgd_step(p.w1, v.w1, g.w1, lr, momentum);
  sgd_step(p.b1, v.b1, g.b1, lr, momentum);
  sgd_step(p.w2, v.w2, g.w2, lr, momentum);
  sgd_step(p.b2, v.b2, g.b2, lr, momentum);
}

inline void sgd_step(CemParams& p, CemParams& v, const CemParams& g, double lr, double momentum) {
  for (int i = 0; i < kNumClassDecoderLayers; ++i) sgd_step(p.layers[i], v.layers[i], g.layers[i], lr, momentum);
  sgd_step(p.score_proj, v.score_proj, g.score_proj, lr, momentum);
  sgd_step(p.bias, v.bias, g.bias, lr, momentum);
}

// ---------------------------------------------------------------------------
// cross attention

struct AttnCache {
  Mat e_in;      // n x d
  Mat q, k, v;   // n x d, hw x d, hw x d
  Mat weights;   // n x hw (softmaxed)
  Mat attended;  // n x d (weights * v)
};

struct AttnGrads {
  Mat d_e_in;
  Mat d_wq, d_wk, d_wv, d_wo;
};

inline Mat cross_attention(const Mat& e_in, const Features& feat, const ClassDecoderLayerParams& p,
                           AttnCache* cache = nullptr) {
  const int d = e_in.cols;
  if (feat.f.cols != d) throw ShapeError("cross_attention: feature dim disagrees with embedding dim");
  if (feat.f.rows != feat.cells()) throw ShapeError("cross_attention: feature grid does not match matrix rows");
  Mat q = matmul(e_in, p.wq);
  Mat k = matmul(feat.f, p.wk);
  Mat v = matmul(feat.f, p.wv);
  Mat logits = matmul_nt(q, k);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& x : logits.a) x *= inv_sqrt_d;
  softmax_rows_inplace(logits);
  Mat attended = matmul(logits, v);
  Mat out = matmul(attended, p.wo);
  if (cache) {
    cache->e_in = e_in;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->weights = std::move(logits);
    cache->attended = std::move(attended);
  }
  return out;
}

inline AttnGrads cross_attention_backward(const Mat& d_out, const AttnCache& c, const Features& feat,
                                          const ClassDecoderLayerParams& p) {
  AttnGrads g;
  g.d_wo = matmul_tn(c.attended, d_out);
  Mat d_attended = matmul_nt(d_out, p.wo);
  Mat d_weights = matmul_nt(d_attended, c.v);
  Mat d_v = matmul_tn(c.weights, d_attended);
  // softmax rows: dl_ij = w_ij * (dw_ij - sum_k w_ik dw_ik)
  Mat d_logits(d_weights.rows, d_weights.cols);
  for (int i = 0; i < d_weights.rows; ++i) {
    const double* wrow = c.weights.row(i);
    const double* dwrow = d_weights.row(i);
    double row_dot = 0.0;
    for (int j = 0; j < d_weights.cols; ++j) row_dot += wrow[j] * dwrow[j];
    double* dlrow = d_logits.row(i);
    for (int j = 0; j < d_weights.cols; ++j) dlrow[j] = wrow[j] * (dwrow[j] - row_dot);
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(c.e_in.cols));
  for (double& x : d_logits.a) x *= inv_sqrt_d;
  Mat d_q = matmul(d_logits, c.k);
  Mat d_k = matmul_tn(d_logits, c.q);
  g.d_e_in = matmul_nt(d_q, p.wq);
  g.d_wq = matmul_tn(c.e_in, d_q);
  g.d_wk = matmul_tn(feat.f, d_k);
  g.d_wv = matmul_tn(feat.f, d_v);
  return g;
}

// ---------------------------------------------------------------------------
// class-decoder layer: norm2(a + FFN(a)) with a = norm1(e_in + attn(e_in))

struct LayerCache {
  AttnCache attn;
  Mat r1;      // e_in + attn_out
  Mat a;       // norm1(r1)
  Mat h_pre;   // a*w1 + b1
  Mat h_relu;  // relu(h_pre)
  Mat r2;      // a + ffn
};

inline Mat class_decoder_layer(const Mat& e_in, const Features& feat, const ClassDecoderLayerParams& p,
                               LayerCache* cache = nullptr) {
  AttnCache attn_cache;
  Mat attn_out = cross_attention(e_in, feat, p, cache ? &cache->attn : &attn_cache);
  Mat r1 = add(e_in, attn_out);
  const int d = e_in.cols;
  Mat a = r1;
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = p.norm1.scale[j] * r1(i, j) + p.norm1.shift[j];
  Mat h_pre = matmul(a, p.w1);
  for (int i = 0; i < h_pre.rows; ++i)
    for (int j = 0; j < h_pre.cols; ++j) h_pre(i, j) += p.b1[j];
  Mat h_relu = h_pre;
  for (double& x : h_relu.a) x = std::max(x, 0.0);
  Mat ffn = matmul(h_relu, p.w2);
  for (int i = 0; i < ffn.rows; ++i)
    for (int j = 0; j < d; ++j) ffn(i, j) += p.b2[j];
  Mat r2 = add(a, ffn);
  Mat out(r2.rows, d);
  for (int i = 0; i < r2.rows; ++i)
    for (int j = 0; j < d; ++j) out(i, j) = p.norm2.scale[j] * r2(i, j) + p.norm2.shift[j];
  if (cache) {
    cache->r1 = std::move(r1);
    cache->a = std::move(a);
    cache->h_pre = std::move(h_pre);
    cache->h_relu = std::move(h_relu);
    cache->r2 = std::move(r2);
  }
  return out;
}

struct LayerGrads {
  Mat d_e_in;
  ClassDecoderLayerParams d_params;
};

inline LayerGrads class_decoder_layer_backward(const Mat& d_out, const LayerCache& c, const Features& feat,
                                               const ClassDecoderLayerParams& p) {
  const int d = d_out.cols;
  LayerGrads g;
  g.d_params = zeros_like(p);

  Mat d_r2(d_out.rows, d);
  for (int i = 0; i < d_out.rows; ++i) {
    for (int j = 0; j < d; ++j) {
      const double go = d_out(i, j);
      d_r2(i, j) = go * p.norm2.scale[j];
      g.d_params.norm2.scale[j] += go * c.r2(i, j);
      g.d_params.norm2.shift[j] += go;
    }
  }
  Mat d_a = d_r2;  // residual branch
  // FFN branch
  Mat d_h_relu = matmul_nt(d_r2, p.w2);
  g.d_params.w2 = matmul_tn(c.h_relu, d_r2);
  for (int i = 0; i < d_r2.rows; ++i)
    for (int j = 0; j < d; ++j) g.d_params.b2[j] += d_r2(i, j);
  Mat d_h_pre = d_h_relu;
  for (size_t i = 0; i < d_h_pre.a.size(); ++i)
    if (c.h_pre.a[i] <= 0.0) d_h_pre.a[i] = 0.0;
  add_inplace(d_a, matmul_nt(d_h_pre, p.w1));
  g.d_params.w1 = matmul_tn(c.a, d_h_pre);
  for (int i = 0; i < d_h_pre.rows; ++i)
    for (int j = 0; j < d_h_pre.cols; ++j) g.d_params.b1[j] += d_h_pre(i, j);

  Mat d_r1(d_a.rows, d);
  for (int i = 0; i < d_a.rows; ++i) {
    for (int j = 0; j < d; ++j) {
      const double ga = d_a(i, j);
      d_r1(i, j) = ga * p.norm1.scale[j];
      g.d_params.norm1.scale[j] += ga * c.r1(i, j);
      g.d_params.norm1.shift[j] += ga;
    }
  }
  AttnGrads ag = cross_attention_backward(d_r1, c.attn, feat, p);
  g.d_params.wq = std::move(ag.d_wq);
  g.d_params.wk = std::move(ag.d_wk);
  g.d_params.wv = std::move(ag.d_wv);
  g.d_params.wo = std::move(ag.d_wo);
  g.d_e_in = add(d_r1, ag.d_e_in);  // residual + attention query path
  return g;
}

// ---------------------------------------------------------------------------
// CEM forward / backward

namespace detail {

inline uint64_t hash_mat(uint64_t h, const Mat& m) {
  h = fnv1a_u64(static_cast<uint64_t>(m.rows), h);
  h = fnv1a_u64(static_cast<uint64_t>(m.cols), h);
  return fnv1a(std::string_view(reinterpret_cast<const char*>(m.a.data()), m.a.size() * sizeof(double)), h);
}

inline uint64_t hash_vec(uint64_t h, const Vec& v) {
  return fnv1a(std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)), h);
}

inline uint64_t hash_layer(uint64_t h, const ClassDecoderLayerParams& p) {
  h = hash_mat(h, p.wq);
  h = hash_mat(h, p.wk);
  h = hash_mat(h, p.wv);
  h = hash_mat(h, p.wo);
  h = hash_vec(h, p.norm1.scale);
  h = hash_vec(h, p.norm1.shift);
  h = hash_vec(h, p.norm2.scale);
  h = hash_vec(h, p.norm2.shift);
  h = hash_mat(h, p.w1);
  h = hash_vec(h, p.b1);
  h = hash_mat(h, p.w2);
  h = hash_vec(h, p.b2);
  return h;
}

inline uint64_t cem_fingerprint(const EmbeddingTable& table, const Features& feat, const CemParams& params) {
  uint64_t h = 0xcbf29ce484222325ULL;
  h = hash_mat(h, table.rows);
  h = hash_mat(h, feat.f);
  for (const auto& layer : params.layers) h = hash_layer(h, layer);
  h = hash_mat(h, params.score_proj);
  h = hash_vec(h, params.bias);
  return h;
}

}  // namespace detail

struct CemCache {
  std::array<LayerCache, kNumClassDecoderLayers> layers;
  Mat e1, e2;
  Mat proj;   // e2 * score_proj
  Vec z;      // pre-sigmoid logits
  Vec s;      // sigmoid(z)
  uint64_t fingerprint = 0;
};

struct CemForward {
  CategoryScores scores;
  Mat e2;
};

// Two class-decoder layers over the embedding table, then per-category
// scoring against the original embedding rows: s_i = sigmoid(<proj_i, E_i>/sqrt(d) + b_i).
inline CemForward cem_forward(const EmbeddingTable& table, const Features& feat, const CemParams& params,
                              CemCache* cache = nullptr) {
  if (static_cast<int>(params.bias.size()) != table.k) throw ShapeError("cem_forward: bias length != K");
  CemCache local;
  CemCache& c = cache ? *cache : local;
  c.e1 = class_decoder_layer(table.rows, feat, params.layers[0], &c.layers[0]);
  c.e2 = class_decoder_layer(c.e1, feat, params.layers[1], &c.layers[1]);
  c.proj = matmul(c.e2, params.score_proj);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(table.d));
  c.z.assign(table.k, 0.0);
  c.s.assign(table.k, 0.0);
  for (int i = 0; i < table.k; ++i) {
    c.z[i] = dot(c.proj.row(i), table.rows.row(i), table.d) * inv_sqrt_d + params.bias[i];
    c.s[i] = sigmoid(c.z[i]);
  }
  if (cache) cache->fingerprint = detail::cem_fingerprint(table, feat, params);
  return {CategoryScores{c.s}, c.e2};
}

struct CemGrads {
  CemParams d_params;
  Mat d_embeddings;  // K x d
};

// Exact reverse-mode gradients for d(loss)/d(S). The cache must come from a
// cem_forward over the same table/features/params.
inline CemGrads cem_backward(const Vec& d_scores, const CemCache& cache, const EmbeddingTable& table,
                             const Features& feat, const CemParams& params) {
  if (static_cast<int>(d_scores.size()) != table.k) throw ShapeError("cem_backward: grad length != K");
  if (cache.fingerprint != detail::cem_fingerprint(table, feat, params)) {
    throw ContractError("cem_backward: stale forward cache (inputs or params changed since cem_forward)");
  }
  CemGrads g;
  g.d_params = zeros_like(params);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(table.d));

  Mat d_proj(table.k, table.d);
  Mat d_e_direct(table.k, table.d);
  for (int i = 0; i < table.k; ++i) {
    const double dz = d_scores[i] * cache.s[i] * (1.0 - cache.s[i]);
    g.d_params.bias[i] = dz;
    for (int j = 0; j < table.d; ++j) {
      d_proj(i, j) = dz * table.rows(i, j) * inv_sqrt_d;
      d_e_direct(i, j) = dz * cache.proj(i, j) * inv_sqrt_d;
    }
  }
  g.d_params.score_proj = matmul_tn(cache.e2, d_proj);
  Mat d_e2 = matmul_nt(d_proj, params.score_proj);

  LayerGrads g2 = class_decoder_layer_backward(d_e2, cache.layers[1], feat, params.layers[1]);
  g.d_params.layers[1] = std::move(g2.d_params);
  LayerGrads g1 = class_decoder_layer_backward(g2.d_e_in, cache.layers[0], feat, params.layers[0]);
  g.d_params.layers[0] = std::move(g1.d_params);

  g.d_embeddings = std::move(g1.d_e_in);
  add_inplace(g.d_embeddings, d_e_direct);
  return g;
}

// ---------------------------------------------------------------------------
// category selection

// Highest-scoring category ids, descending score, ties to the lower id.
inline std::vector<int> topk_select(const CategoryScores& scores, int top_k) {
  if (top_k < 1) throw ConfigError("topk_select: top_k must be >= 1");
  const int k = static_cast<int>(scores.s.size());
  std::vector<int> ids(k);
  std::iota(ids.begin(), ids.end(), 0);
  std::sort(ids.begin(), ids.end(), [&](int a, int b) {
    if (scores.s[a] != scores.s[b]) return scores.s[a] > scores.s[b];
    return a < b;
  });
  ids.resize(std::min(top_k, k));
  return ids;
}

// Teacher-forced training category set: every ground-truth class first
// (ascending id), then the best-scoring remaining categories to fill
// exactly top_k slots.
inline std::vector<int> training_category_set(const std::set<int>& gt_classes, const CategoryScores& scores,
                                              int top_k) {
  if (static_cast<int>(gt_classes.size()) > top_k) {
    throw ConfigError("training_category_set: " + std::to_string(gt_classes.size()) +
                      " ground-truth classes exceed top_k=" + std::to_string(top_k) + "; increase top_k");
  }
  std::vector<int> out(gt_classes.begin(), gt_classes.end());
  const int k = static_cast<int>(scores.s.size());
  std::vector<int> ids(k);
  std::iota(ids.begin(), ids.end(), 0);
  std::sort(ids.begin(), ids.end(), [&](int a, int b) {
    if (scores.s[a] != scores.s[b]) return scores.s[a] > scores.s[b];
    return a < b;
  });
  for (int id : ids) {
    if (static_cast<int>(out.size()) >= top_k) break;
    if (gt_classes.count(id)) continue;
    out.push_back(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// standalone CEM training (multi-label classification task)

struct CemSample {
  Features features;
  std::vector<int> targets;  // multi-hot, length K
};

struct CemOptState {
  CemParams vel;
  Mat vel_embeddings;

  static CemOptState make(const CemParams& params, const EmbeddingTable& table) {
    CemOptState s;
    s.vel = zeros_like(params);
    s.vel_embeddings = Mat(table.rows.rows, table.rows.cols);
    return s;
  }
};

// One SGD(momentum 0.9) step on the mean asymmetric loss of the batch.
// Returns the pre-step loss value.
inline double cem_train_step(const std::vector<CemSample>& batch, CemParams& params, EmbeddingTable& table,
                             const AslConfig& cfg, double mu_asl, double lr, CemOptState& opt,
                             double momentum = 0.9) {
  if (batch.empty()) throw ConfigError("cem_train_step: empty batch");
  CemParams grad = zeros_like(params);
  Mat grad_e(table.rows.rows, table.rows.cols);
  double loss = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const auto& sample : batch) {
    CemCache cache;
    CemForward fwd = cem_forward(table, sample.features, params, &cache);
    Vec clamped(fwd.scores.s.size());
    for (size_t i = 0; i < clamped.size(); ++i) clamped[i] = clamp_prob(fwd.scores.s[i]);
    LossAndGrad asl = asymmetric_loss(clamped, sample.targets, cfg, mu_asl);
    loss += asl.value * inv_b;
    for (double& gv : asl.grad) gv *= inv_b;
    CemGrads g = cem_backward(asl.grad, cache, table, sample.features, params);
    for (int i = 0; i < kNumClassDecoderLayers; ++i) {
      auto& acc = grad.layers[i];
      const auto& cur = g.d_params.layers[i];
      add_inplace(acc.wq, cur.wq);
      add_inplace(acc.wk, cur.wk);
      add_inplace(acc.wv, cur.wv);
      add_inplace(acc.wo, cur.wo);
      for (size_t j = 0; j < acc.norm1.scale.size(); ++j) {
        acc.norm1.scale[j] += cur.norm1.scale[j];
        acc.norm1.shift[j] += cur.norm1.shift[j];
        acc.norm2.scale[j] += cur.norm2.scale[j];
        acc.norm2.shift[j] += cur.norm2.shift[j];
      }
      add_inplace(acc.w1, cur.w1);
      for (size_t j = 0; j < acc.b1.size(); ++j) acc.b1[j] += cur.b1[j];
      add_inplace(acc.w2, cur.w2);
      for (size_t j = 0; j < acc.b2.size(); ++j) acc.b2[j] += cur.b2[j];
    }
    add_inplace(grad.score_proj, g.d_params.score_proj);
    for (size_t j = 0; j < grad.bias.size(); ++j) grad.bias[j] += g.d_params.bias[j];
    add_inplace(grad_e, g.d_embeddings);
  }
  if (!std::isfinite(loss)) throw NumericError("cem_train_step: non-finite loss");
  sgd_step(params, opt.vel, grad, lr, momentum);
  if (table.learnable) sgd_step(table.rows, opt.vel_embeddings, grad_e, lr, momentum);
  return loss;
}

}  // namespace metr
