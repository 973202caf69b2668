#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "metr/cem.hpp"
#include "metr/errors.hpp"
#include "metr/geometry.hpp"
#include "metr/labelspace.hpp"
#include "metr/mat.hpp"

namespace metr {

// One object query: a pre-assigned category, a content vector derived from
// that category's language embedding, and a reference box to refine.
struct Query {
  int class_id = -1;
  Vec content;
  Box reference;
};

struct QuerySet {
  std::vector<Query> queries;
  std::vector<int> category_list;  // group order; n_per_class queries per entry
  int n_per_class = 0;

  int size() const { return static_cast<int>(queries.size()); }

  Mat contents() const {
    if (queries.empty()) return Mat();
    Mat m(size(), static_cast<int>(queries[0].content.size()));
    for (int i = 0; i < size(); ++i)
      for (int j = 0; j < m.cols; ++j) m(i, j) = queries[i].content[j];
    return m;
  }
};

struct HeadParams {
  // single linear d -> d whose output is dotted with the class embedding
  Mat cls_w;  // d x d
  Vec cls_b;  // d
  // 3-layer box MLP d -> d -> d -> 4 with ReLU
  Mat box_w1;  // d x d
  Vec box_b1;
  Mat box_w2;  // d x d
  Vec box_b2;
  Mat box_w3;  // d x 4
  Vec box_b3;
  ClassDecoderLayerParams toy_decoder;
};

inline HeadParams init_head_params(int d, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  HeadParams p;
  p.cls_w = uniform_mat(d, d, bound, rng);
  p.cls_b.assign(d, 0.0);
  p.box_w1 = uniform_mat(d, d, bound, rng);
  p.box_b1.assign(d, 0.1);  // start the ReLUs alive
  p.box_w2 = uniform_mat(d, d, bound, rng);
  p.box_b2.assign(d, 0.1);
  p.box_w3 = uniform_mat(d, 4, bound, rng);
  p.box_b3.assign(4, 0.0);
  p.toy_decoder = init_class_decoder_layer(d, 2 * d, rng);
  // box regression needs sharply peaked attention over the feature grid;
  // start the query/key projections hot so the softmax can separate cells
  // within the training budget
  p.toy_decoder.wq = uniform_mat(d, d, 4.0 * bound, rng);
  p.toy_decoder.wk = uniform_mat(d, d, 4.0 * bound, rng);
  return p;
}

inline HeadParams zeros_like(const HeadParams& p) {
  HeadParams g;
  g.cls_w = Mat(p.cls_w.rows, p.cls_w.cols);
  g.cls_b.assign(p.cls_b.size(), 0.0);
  g.box_w1 = Mat(p.box_w1.rows, p.box_w1.cols);
  g.box_b1.assign(p.box_b1.size(), 0.0);
  g.box_w2 = Mat(p.box_w2.rows, p.box_w2.cols);
  g.box_b2.assign(p.box_b2.size(), 0.0);
  g.box_w3 = Mat(p.box_w3.rows, p.box_w3.cols);
  g.box_b3.assign(p.box_b3.size(), 0.0);
  g.toy_decoder = zeros_like(p.toy_decoder);
  return g;
}

inline void sgd_step(HeadParams& p, HeadParams& v, const HeadParams& g, double lr, double momentum) {
  sgd_step(p.cls_w, v.cls_w, g.cls_w, lr, momentum);
  sgd_step(p.cls_b, v.cls_b, g.cls_b, lr, momentum);
  sgd_step(p.box_w1, v.box_w1, g.box_w1, lr, momentum);
  sgd_step(p.box_b1, v.box_b1, g.box_b1, lr, momentum);
  sgd_step(p.box_w2, v.box_w2, g.box_w2, lr, momentum);
  sgd_step(p.box_b2, v.box_b2, g.box_b2, lr, momentum);
  sgd_step(p.box_w3, v.box_w3, g.box_w3, lr, momentum);
  sgd_step(p.box_b3, v.box_b3, g.box_b3, lr, momentum);
  sgd_step(p.toy_decoder, v.toy_decoder, g.toy_decoder, lr, momentum);
}

// Fixed lattice of reference boxes: ceil(sqrt(N)) x ceil(sqrt(N)) centers per
// class, w = h = 0.2, repeated for every class group.
inline std::vector<Box> grid_references(int num_classes, int n_per_class) {
  const int g = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n_per_class))));
  std::vector<Box> refs;
  refs.reserve(static_cast<size_t>(num_classes) * n_per_class);
  for (int c = 0; c < num_classes; ++c) {
    for (int q = 0; q < n_per_class; ++q) {
      const int row = q / g;
      const int col = q % g;
      refs.push_back({(col + 0.5) / g, (row + 0.5) / g, 0.2, 0.2});
    }
  }
  return refs;
}

// Builds the query set: n_per_class queries per category, grouped
// contiguously, content = base_content + embedding row of the category.
inline QuerySet assign_queries(const std::vector<int>& category_ids, const EmbeddingTable& table,
                               const Vec& base_content, const std::vector<Box>& refs, int n_per_class) {
  if (static_cast<int>(base_content.size()) != table.d) throw ShapeError("assign_queries: base_content dim != d");
  if (refs.size() != category_ids.size() * static_cast<size_t>(n_per_class)) {
    throw ShapeError("assign_queries: expected " + std::to_string(category_ids.size() * n_per_class) +
                     " references, got " + std::to_string(refs.size()));
  }
  QuerySet qs;
  qs.category_list = category_ids;
  qs.n_per_class = n_per_class;
  qs.queries.reserve(refs.size());
  for (size_t c = 0; c < category_ids.size(); ++c) {
    const int gid = category_ids[c];
    if (gid < 0 || gid >= table.k) throw std::out_of_range("assign_queries: category id out of range");
    for (int q = 0; q < n_per_class; ++q) {
      Query query;
      query.class_id = gid;
      query.content.resize(table.d);
      for (int j = 0; j < table.d; ++j) query.content[j] = base_content[j] + table.rows(gid, j);
      query.reference = refs[c * n_per_class + q];
      qs.queries.push_back(std::move(query));
    }
  }
  return qs;
}

// One class-decoder layer over the query contents; stands in for the real
// deformable decoder at desk scale.
inline Mat toy_decoder(const QuerySet& qs, const Features& feat, const HeadParams& p, LayerCache* cache = nullptr) {
  return class_decoder_layer(qs.contents(), feat, p.toy_decoder, cache);
}

// ---------------------------------------------------------------------------
// head prediction (matchability score + refined box per query)

struct HeadOutputs {
  Vec scores;              // matchability per query, in (0,1)
  std::vector<Box> boxes;  // refined boxes, center form
};

struct HeadCache {
  Mat qd;             // n x d input
  Mat emb;            // n x d assigned embeddings
  Mat pcls;           // n x d
  Vec z;              // score logits
  Vec score;          // sigmoid(z)
  Mat h1pre, h1, h2pre, h2;  // box MLP intermediates
  Mat pbox;           // n x 4 logits
  Mat box;            // n x 4 sigmoided
  std::vector<Box> refs;
};

// Algorithm: P_cls = linear(Q_d); score = sigmoid(<P_cls, E_class>/sqrt(d) + b_class);
// P_box = MLP(Q_d); box = sigmoid(P_box + inverse_sigmoid(reference)).
inline HeadOutputs head_predict(const Mat& qd, const Mat& assigned_embeddings, const std::vector<Box>& refs,
                                const HeadParams& p, const Vec& bias_per_query, HeadCache* cache = nullptr) {
  const int n = qd.rows;
  const int d = qd.cols;
  if (assigned_embeddings.rows != n || assigned_embeddings.cols != d)
    throw ShapeError("head_predict: embedding rows misaligned with queries");
  if (static_cast<int>(refs.size()) != n) throw ShapeError("head_predict: reference count != query count");
  if (static_cast<int>(bias_per_query.size()) != n) throw ShapeError("head_predict: bias count != query count");

  HeadCache local;
  HeadCache& c = cache ? *cache : local;
  c.qd = qd;
  c.emb = assigned_embeddings;
  c.refs = refs;

  c.pcls = matmul(qd, p.cls_w);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) c.pcls(i, j) += p.cls_b[j];
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  c.z.assign(n, 0.0);
  c.score.assign(n, 0.0);
  for (int i = 0; i < n; ++i) {
    c.z[i] = dot(c.pcls.row(i), assigned_embeddings.row(i), d) * inv_sqrt_d + bias_per_query[i];
    c.score[i] = sigmoid(c.z[i]);
  }

  c.h1pre = matmul(qd, p.box_w1);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) c.h1pre(i, j) += p.box_b1[j];
  c.h1 = c.h1pre;
  for (double& x : c.h1.a) x = std::max(x, 0.0);
  c.h2pre = matmul(c.h1, p.box_w2);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) c.h2pre(i, j) += p.box_b2[j];
  c.h2 = c.h2pre;
  for (double& x : c.h2.a) x = std::max(x, 0.0);
  c.pbox = matmul(c.h2, p.box_w3);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < 4; ++j) c.pbox(i, j) += p.box_b3[j];

  c.box = Mat(n, 4);
  HeadOutputs out;
  out.scores = c.score;
  out.boxes.resize(n);
  for (int i = 0; i < n; ++i) {
    const double ref[4] = {refs[i].cx, refs[i].cy, refs[i].w, refs[i].h};
    double coord[4];
    for (int j = 0; j < 4; ++j) {
      coord[j] = sigmoid(c.pbox(i, j) + inverse_sigmoid(ref[j]));
      if (!std::isfinite(coord[j])) {
        throw NumericError("head_predict: non-finite box coordinate at query " + std::to_string(i));
      }
      c.box(i, j) = coord[j];
    }
    if (!std::isfinite(out.scores[i])) {
      throw NumericError("head_predict: non-finite score at query " + std::to_string(i));
    }
    out.boxes[i] = {coord[0], coord[1], coord[2], coord[3]};
  }
  return out;
}

struct HeadGrads {
  Mat d_cls_w;
  Vec d_cls_b;
  Mat d_box_w1;
  Vec d_box_b1;
  Mat d_box_w2;
  Vec d_box_b2;
  Mat d_box_w3;
  Vec d_box_b3;
  Mat d_qd;    // n x d
  Mat d_emb;   // n x d per-query embedding grads (caller scatters to table rows)
  Vec d_bias;  // n per-query bias grads (caller scatters to b)
};

// Backward through the linear classification map and the box MLP given
// upstream gradients at P_cls and at the sigmoided box. The per-query
// embedding/bias grads of the score dot-product are the caller's business.
inline HeadGrads head_backward_core(const Mat& d_pcls, const Mat& d_box, const HeadCache& c, const HeadParams& p) {
  const int n = c.qd.rows;
  const int d = c.qd.cols;
  HeadGrads g;
  g.d_cls_w = matmul_tn(c.qd, d_pcls);
  g.d_cls_b.assign(d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) g.d_cls_b[j] += d_pcls(i, j);
  g.d_qd = matmul_nt(d_pcls, p.cls_w);

  // box path: box = sigmoid(pbox + inv_sigmoid(ref))
  Mat d_pbox(n, 4);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < 4; ++j) d_pbox(i, j) = d_box(i, j) * c.box(i, j) * (1.0 - c.box(i, j));
  g.d_box_w3 = matmul_tn(c.h2, d_pbox);
  g.d_box_b3.assign(4, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < 4; ++j) g.d_box_b3[j] += d_pbox(i, j);
  Mat d_h2 = matmul_nt(d_pbox, p.box_w3);
  for (size_t i = 0; i < d_h2.a.size(); ++i)
    if (c.h2pre.a[i] <= 0.0) d_h2.a[i] = 0.0;
  g.d_box_w2 = matmul_tn(c.h1, d_h2);
  g.d_box_b2.assign(d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) g.d_box_b2[j] += d_h2(i, j);
  Mat d_h1 = matmul_nt(d_h2, p.box_w2);
  for (size_t i = 0; i < d_h1.a.size(); ++i)
    if (c.h1pre.a[i] <= 0.0) d_h1.a[i] = 0.0;
  g.d_box_w1 = matmul_tn(c.qd, d_h1);
  g.d_box_b1.assign(d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) g.d_box_b1[j] += d_h1(i, j);
  add_inplace(g.d_qd, matmul_nt(d_h1, p.box_w1));
  return g;
}

inline HeadGrads head_predict_backward(const Vec& d_score, const Mat& d_box, const HeadCache& c,
                                       const HeadParams& p) {
  const int n = c.qd.rows;
  const int d = c.qd.cols;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Mat d_pcls(n, d);
  Mat d_emb(n, d);
  Vec d_bias(n, 0.0);
  for (int i = 0; i < n; ++i) {
    const double dz = d_score[i] * c.score[i] * (1.0 - c.score[i]);
    d_bias[i] = dz;
    for (int j = 0; j < d; ++j) {
      d_pcls(i, j) = dz * c.emb(i, j) * inv_sqrt_d;
      d_emb(i, j) = dz * c.pcls(i, j) * inv_sqrt_d;
    }
  }
  HeadGrads g = head_backward_core(d_pcls, d_box, c, p);
  g.d_emb = std::move(d_emb);
  g.d_bias = std::move(d_bias);
  return g;
}

// ---------------------------------------------------------------------------
// inference pipeline

struct Detection {
  int category_id = -1;
  double score = 0.0;
  Box box;
};

namespace detail {

inline std::vector<Detection> run_head_pipeline(const Features& feat, const EmbeddingTable& table,
                                                const CemParams& cem_params, const HeadParams& head_params,
                                                const Vec& base_content, const std::vector<int>& category_ids,
                                                int n_per_class, double score_threshold) {
  std::vector<Detection> out;
  if (category_ids.empty()) return out;
  const std::vector<Box> refs = grid_references(static_cast<int>(category_ids.size()), n_per_class);
  const QuerySet qs = assign_queries(category_ids, table, base_content, refs, n_per_class);
  const Mat qd = toy_decoder(qs, feat, head_params);
  Mat emb(qs.size(), table.d);
  Vec bias(qs.size());
  for (int i = 0; i < qs.size(); ++i) {
    const int gid = qs.queries[i].class_id;
    for (int j = 0; j < table.d; ++j) emb(i, j) = table.rows(gid, j);
    bias[i] = cem_params.bias[gid];
  }
  const HeadOutputs ho = head_predict(qd, emb, refs, head_params, bias);
  for (int i = 0; i < qs.size(); ++i) {
    if (ho.scores[i] > score_threshold) {
      out.push_back({qs.queries[i].class_id, ho.scores[i], ho.boxes[i]});
    }
  }
  return out;
}

}  // namespace detail

// Full inference: CEM proposes the category set, queries are built per class
// and refined by the toy decoder, detections below the threshold dropped.
inline std::vector<Detection> detect(const Features& feat, const EmbeddingTable& table, const CemParams& cem_params,
                                     const HeadParams& head_params, const Vec& base_content, int top_k,
                                     int n_per_class, double score_threshold) {
  const CemForward fwd = cem_forward(table, feat, cem_params);
  const std::vector<int> category_ids = topk_select(fwd.scores, top_k);
  return detail::run_head_pipeline(feat, table, cem_params, head_params, base_content, category_ids, n_per_class,
                                   score_threshold);
}

// Language-aware mode: the caller names the categories and the CEM is
// bypassed; only those classes can appear in the output.
inline std::vector<Detection> detect_with_categories(const Features& feat, const EmbeddingTable& table,
                                                     const CemParams& cem_params, const HeadParams& head_params,
                                                     const Vec& base_content, const std::vector<int>& user_category_ids,
                                                     int n_per_class, double score_threshold) {
  std::set<int> seen;
  for (int gid : user_category_ids) {
    if (gid < 0 || gid >= table.k) {
      throw std::out_of_range("detect_with_categories: unknown category id " + std::to_string(gid));
    }
    if (!seen.insert(gid).second) throw ConfigError("detect_with_categories: duplicate category id");
  }
  return detail::run_head_pipeline(feat, table, cem_params, head_params, base_content, user_category_ids, n_per_class,
                                   score_threshold);
}

}  // namespace metr
