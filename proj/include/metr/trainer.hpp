#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "metr/cem.hpp"
#include "metr/checkpoint.hpp"
#include "metr/head.hpp"
#include "metr/labelspace.hpp"
#include "metr/losses.hpp"
#include "metr/matching.hpp"
#include "metr/metrics.hpp"
#include "metr/scene.hpp"

namespace metr {

struct DeskModel {
  LabelSpace space;
  std::vector<DatasetDescriptor> datasets;
  std::vector<std::pair<int, int>> alias_pairs;
  EmbeddingTable table;        // the model's copy; rows move when learnable
  EmbeddingTable world_table;  // frozen generator table; scene features only
  CemParams cem;
  HeadParams head;
  Vec base_content;
  BenchConfig cfg;
};

inline DeskModel init_model(const GeneratedData& data, const BenchConfig& cfg) {
  DeskModel m;
  m.space = data.space;
  m.datasets = data.datasets;
  m.alias_pairs = data.alias_pairs;
  m.table = data.table;
  m.world_table = data.table;
  m.world_table.learnable = false;
  m.cfg = cfg;
  Rng rng(mix_seed(cfg.seed, "model-init"));
  m.cem = init_cem_params(m.table.k, m.table.d, rng);
  m.head = init_head_params(m.table.d, rng);
  m.base_content.assign(m.table.d, 0.0);
  return m;
}

struct ModelGrads {
  CemParams cem;
  HeadParams head;
  Vec base_content;
  Mat embeddings;

  static ModelGrads zeros(const DeskModel& m) {
    ModelGrads g;
    g.cem = zeros_like(m.cem);
    g.head = zeros_like(m.head);
    g.base_content.assign(m.base_content.size(), 0.0);
    g.embeddings = Mat(m.table.rows.rows, m.table.rows.cols);
    return g;
  }
};

struct ModelOptState {
  ModelGrads vel;

  static ModelOptState make(const DeskModel& m) { return {ModelGrads::zeros(m)}; }
};

inline void accumulate(ClassDecoderLayerParams& acc, const ClassDecoderLayerParams& g, double scale) {
  axpy_inplace(acc.wq, scale, g.wq);
  axpy_inplace(acc.wk, scale, g.wk);
  axpy_inplace(acc.wv, scale, g.wv);
  axpy_inplace(acc.wo, scale, g.wo);
  for (size_t j = 0; j < acc.norm1.scale.size(); ++j) {
    acc.norm1.scale[j] += scale * g.norm1.scale[j];
    acc.norm1.shift[j] += scale * g.norm1.shift[j];
    acc.norm2.scale[j] += scale * g.norm2.scale[j];
    acc.norm2.shift[j] += scale * g.norm2.shift[j];
  }
  axpy_inplace(acc.w1, scale, g.w1);
  for (size_t j = 0; j < acc.b1.size(); ++j) acc.b1[j] += scale * g.b1[j];
  axpy_inplace(acc.w2, scale, g.w2);
  for (size_t j = 0; j < acc.b2.size(); ++j) acc.b2[j] += scale * g.b2[j];
}

// ---------------------------------------------------------------------------
// per-sample loss + gradients

struct SampleResult {
  double detection_loss = 0.0;
  double asl_loss = 0.0;

  double total() const { return detection_loss + asl_loss; }
};

namespace detail {

inline std::vector<int> asl_targets(const Scene& scene, int num_categories) {
  std::vector<int> t(num_categories, 0);
  for (const auto& obj : scene.objects) t[obj.category_id] = 1;
  return t;
}

// No positive supervision may leave the sample's own taxonomy.
inline void check_supervision_scope(const Scene& scene, const DatasetDescriptor& desc) {
  std::set<int> allowed(desc.local_to_global.begin(), desc.local_to_global.end());
  for (const auto& obj : scene.objects) {
    if (!allowed.count(obj.category_id)) {
      throw ContractError("supervision scope violated: class " + std::to_string(obj.category_id) +
                          " is not in dataset " + std::to_string(scene.dataset_id));
    }
  }
}

// All-class sigmoid scores for every query (merged-label-space baseline):
// probs(j, k) = sigmoid(<P_cls_j, E_k>/sqrt(d) + b_k).
inline Mat merged_class_probs(const HeadCache& hc, const EmbeddingTable& table, const Vec& bias) {
  Mat z = matmul_nt(hc.pcls, table.rows);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(table.d));
  for (int j = 0; j < z.rows; ++j)
    for (int k = 0; k < z.cols; ++k) z(j, k) = sigmoid(z(j, k) * inv_sqrt_d + bias[k]);
  return z;
}

}  // namespace detail

// Training-time references: each class group starts with its ground-truth
// boxes jittered by uniform +-10% per coordinate, the remaining slots are
// grid anchors. Inference uses the plain grid.
inline std::vector<Box> training_references(const std::vector<int>& cat_ids, int n_per_class,
                                            const std::vector<GtObject>& gts, uint64_t seed, int scene_id) {
  std::vector<Box> refs = grid_references(static_cast<int>(cat_ids.size()), n_per_class);
  Rng rng(mix_seed(mix_seed(seed, "ref-jitter"), static_cast<uint64_t>(scene_id)));
  for (size_t c = 0; c < cat_ids.size(); ++c) {
    int slot = 0;
    for (const auto& gt : gts) {
      if (gt.class_id != cat_ids[c] || slot >= n_per_class) continue;
      Box b = gt.box;
      b.w = std::min(std::max(b.w * (1.0 + rng.uniform(-0.1, 0.1)), 0.02), 1.0);
      b.h = std::min(std::max(b.h * (1.0 + rng.uniform(-0.1, 0.1)), 0.02), 1.0);
      b.cx = std::min(std::max(b.cx * (1.0 + rng.uniform(-0.1, 0.1)), b.w / 2), 1.0 - b.w / 2);
      b.cy = std::min(std::max(b.cy * (1.0 + rng.uniform(-0.1, 0.1)), b.h / 2), 1.0 - b.h / 2);
      refs[c * n_per_class + slot] = b;
      ++slot;
    }
  }
  return refs;
}

// Forward + backward of one training sample; gradients are accumulated into
// `grads` with weight `scale`. Covers both matching modes.
inline SampleResult sample_loss(const DeskModel& m, const Scene& scene, const Features& feat,
                                const MatchWeights& weights, const FocalConfig& focal_cfg, const AslConfig& asl_cfg,
                                ModelGrads* grads, double scale = 1.0) {
  SampleResult res;
  const int d = m.table.d;
  detail::check_supervision_scope(scene, m.datasets.at(scene.dataset_id));

  // CEM multi-label task
  CemCache cem_cache;
  const CemForward cem_out = cem_forward(m.table, feat, m.cem, &cem_cache);
  Vec clamped(cem_out.scores.s.size());
  for (size_t i = 0; i < clamped.size(); ++i) clamped[i] = clamp_prob(cem_out.scores.s[i]);
  const std::vector<int> targets = detail::asl_targets(scene, m.table.k);
  LossAndGrad asl = asymmetric_loss(clamped, targets, asl_cfg, m.cfg.mu_asl);
  res.asl_loss = asl.value;

  std::vector<GtObject> gts;
  gts.reserve(scene.objects.size());
  for (const auto& obj : scene.objects) gts.push_back({obj.category_id, obj.box});

  // queries from the teacher-forced category set
  const std::vector<int> cat_ids = training_category_set(scene.gt_classes(), cem_out.scores, m.cfg.top_k);
  const std::vector<Box> refs = grid_references(static_cast<int>(cat_ids.size()), m.cfg.n_per_class);
  const QuerySet qs = assign_queries(cat_ids, m.table, m.base_content, refs, m.cfg.n_per_class);
  LayerCache toy_cache;
  const Mat qd = toy_decoder(qs, feat, m.head, &toy_cache);
  Mat emb(qs.size(), d);
  Vec bias(qs.size());
  for (int i = 0; i < qs.size(); ++i) {
    const int gid = qs.queries[i].class_id;
    for (int j = 0; j < d; ++j) emb(i, j) = m.table.rows(gid, j);
    bias[i] = m.cem.bias[gid];
  }
  HeadCache head_cache;
  const HeadOutputs ho = head_predict(qd, emb, refs, m.head, bias, &head_cache);

  HeadGrads head_grads;
  if (m.cfg.matching_mode == MatchingMode::kGroup) {
    const GroupMatchResult matches = match_group(qs, gts, ho.scores, ho.boxes, weights, focal_cfg);
    const DetectionLossGrad det =
        training_loss(matches, qs, ho.scores, ho.boxes, gts, weights, focal_cfg, m.cfg.supervise_negatives);
    res.detection_loss = det.value;
    if (grads) {
      Mat d_box(qs.size(), 4);
      for (int i = 0; i < qs.size(); ++i)
        for (int j = 0; j < 4; ++j) d_box(i, j) = det.d_boxes[i][j];
      head_grads = head_predict_backward(det.d_scores, d_box, head_cache, m.head);
    }
  } else {
    // standard matching over the naively merged label space
    const Mat probs = detail::merged_class_probs(head_cache, m.table, m.cem.bias);
    std::vector<PredObject> preds(qs.size());
    for (int j = 0; j < qs.size(); ++j) {
      preds[j].probs.assign(probs.row(j), probs.row(j) + m.table.k);
      for (double& p : preds[j].probs) p = clamp_prob(p);
      preds[j].box = ho.boxes[j];
    }
    const Assignment assignment = match_standard(preds, gts, weights, focal_cfg);
    std::vector<int> matched_gt(qs.size(), -1);
    for (const auto& [gi, qj] : assignment.pairs) matched_gt[qj] = gi;

    Mat d_probs(qs.size(), m.table.k);
    Mat d_box(qs.size(), 4);
    for (int j = 0; j < qs.size(); ++j) {
      const int gi = matched_gt[j];
      if (gi >= 0) {
        for (int k = 0; k < m.table.k; ++k) {
          LossAndGrad f = binary_focal(preds[j].probs[k], k == gts[gi].class_id ? 1 : 0, focal_cfg);
          res.detection_loss += weights.mu_cls * f.value;
          d_probs(j, k) = weights.mu_cls * f.grad[0];
        }
        std::array<double, 4> dbox{};
        res.detection_loss += box_cost_grad(ho.boxes[j], gts[gi].box, weights, dbox);
        for (int k = 0; k < 4; ++k) d_box(j, k) = dbox[k];
      } else if (m.cfg.supervise_negatives) {
        for (int k = 0; k < m.table.k; ++k) {
          LossAndGrad f = binary_focal(preds[j].probs[k], 0, focal_cfg);
          res.detection_loss += weights.mu_cls * f.value;
          d_probs(j, k) = weights.mu_cls * f.grad[0];
        }
      }
    }
    if (grads) {
      // d_probs -> d_pcls, d embeddings, d bias
      const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
      Mat d_z(qs.size(), m.table.k);
      for (int j = 0; j < qs.size(); ++j)
        for (int k = 0; k < m.table.k; ++k) d_z(j, k) = d_probs(j, k) * probs(j, k) * (1.0 - probs(j, k));
      Mat d_pcls = matmul(d_z, m.table.rows);
      for (double& v : d_pcls.a) v *= inv_sqrt_d;
      Mat d_emb_all = matmul_tn(d_z, head_cache.pcls);  // K x d
      for (double& v : d_emb_all.a) v *= inv_sqrt_d;
      axpy_inplace(grads->embeddings, scale, d_emb_all);
      for (int j = 0; j < qs.size(); ++j)
        for (int k = 0; k < m.table.k; ++k) grads->cem.bias[k] += scale * d_z(j, k);
      head_grads = head_backward_core(d_pcls, d_box, head_cache, m.head);
    }
  }

  if (!grads) return res;

  // head parameter grads
  axpy_inplace(grads->head.cls_w, scale, head_grads.d_cls_w);
  for (size_t j = 0; j < grads->head.cls_b.size(); ++j) grads->head.cls_b[j] += scale * head_grads.d_cls_b[j];
  axpy_inplace(grads->head.box_w1, scale, head_grads.d_box_w1);
  for (size_t j = 0; j < grads->head.box_b1.size(); ++j) grads->head.box_b1[j] += scale * head_grads.d_box_b1[j];
  axpy_inplace(grads->head.box_w2, scale, head_grads.d_box_w2);
  for (size_t j = 0; j < grads->head.box_b2.size(); ++j) grads->head.box_b2[j] += scale * head_grads.d_box_b2[j];
  axpy_inplace(grads->head.box_w3, scale, head_grads.d_box_w3);
  for (size_t j = 0; j < grads->head.box_b3.size(); ++j) grads->head.box_b3[j] += scale * head_grads.d_box_b3[j];

  // per-query embedding/bias grads from the single-class score path
  if (head_grads.d_emb.rows == qs.size()) {
    for (int i = 0; i < qs.size(); ++i) {
      const int gid = qs.queries[i].class_id;
      for (int j = 0; j < d; ++j) grads->embeddings(gid, j) += scale * head_grads.d_emb(i, j);
      grads->cem.bias[gid] += scale * head_grads.d_bias[i];
    }
  }

  // toy decoder backward: d_qd -> layer params + query contents
  LayerGrads toy_grads = class_decoder_layer_backward(head_grads.d_qd, toy_cache, feat, m.head.toy_decoder);
  accumulate(grads->head.toy_decoder, toy_grads.d_params, scale);
  for (int i = 0; i < qs.size(); ++i) {
    const int gid = qs.queries[i].class_id;
    for (int j = 0; j < d; ++j) {
      const double g = toy_grads.d_e_in(i, j);
      grads->base_content[j] += scale * g;
      grads->embeddings(gid, j) += scale * g;
    }
  }

  // CEM backward from the asymmetric loss
  CemGrads cem_grads = cem_backward(asl.grad, cem_cache, m.table, feat, m.cem);
  for (int i = 0; i < kNumClassDecoderLayers; ++i)
    accumulate(grads->cem.layers[i], cem_grads.d_params.layers[i], scale);
  axpy_inplace(grads->cem.score_proj, scale, cem_grads.d_params.score_proj);
  for (size_t j = 0; j < grads->cem.bias.size(); ++j) grads->cem.bias[j] += scale * cem_grads.d_params.bias[j];
  axpy_inplace(grads->embeddings, scale, cem_grads.d_embeddings);

  return res;
}

namespace detail {

inline void norm_sq_acc(const Vec& v, double& acc) {
  for (double x : v) acc += x * x;
}

inline void norm_sq_acc(const Mat& m, double& acc) { norm_sq_acc(m.a, acc); }

inline void norm_sq_acc(const ClassDecoderLayerParams& p, double& acc) {
  norm_sq_acc(p.wq, acc);
  norm_sq_acc(p.wk, acc);
  norm_sq_acc(p.wv, acc);
  norm_sq_acc(p.wo, acc);
  norm_sq_acc(p.norm1.scale, acc);
  norm_sq_acc(p.norm1.shift, acc);
  norm_sq_acc(p.norm2.scale, acc);
  norm_sq_acc(p.norm2.shift, acc);
  norm_sq_acc(p.w1, acc);
  norm_sq_acc(p.b1, acc);
  norm_sq_acc(p.w2, acc);
  norm_sq_acc(p.b2, acc);
}

inline double grad_norm(const ModelGrads& g) {
  double acc = 0.0;
  for (const auto& layer : g.cem.layers) norm_sq_acc(layer, acc);
  norm_sq_acc(g.cem.score_proj, acc);
  norm_sq_acc(g.cem.bias, acc);
  norm_sq_acc(g.head.cls_w, acc);
  norm_sq_acc(g.head.cls_b, acc);
  norm_sq_acc(g.head.box_w1, acc);
  norm_sq_acc(g.head.box_b1, acc);
  norm_sq_acc(g.head.box_w2, acc);
  norm_sq_acc(g.head.box_b2, acc);
  norm_sq_acc(g.head.box_w3, acc);
  norm_sq_acc(g.head.box_b3, acc);
  norm_sq_acc(g.head.toy_decoder, acc);
  norm_sq_acc(g.base_content, acc);
  norm_sq_acc(g.embeddings, acc);
  return std::sqrt(acc);
}

inline void scale_vec(Vec& v, double s) {
  for (double& x : v) x *= s;
}

inline void scale_layer(ClassDecoderLayerParams& p, double s) {
  scale_vec(p.wq.a, s);
  scale_vec(p.wk.a, s);
  scale_vec(p.wv.a, s);
  scale_vec(p.wo.a, s);
  scale_vec(p.norm1.scale, s);
  scale_vec(p.norm1.shift, s);
  scale_vec(p.norm2.scale, s);
  scale_vec(p.norm2.shift, s);
  scale_vec(p.w1.a, s);
  scale_vec(p.b1, s);
  scale_vec(p.w2.a, s);
  scale_vec(p.b2, s);
}

inline void scale_grads(ModelGrads& g, double s) {
  for (auto& layer : g.cem.layers) scale_layer(layer, s);
  scale_vec(g.cem.score_proj.a, s);
  scale_vec(g.cem.bias, s);
  scale_vec(g.head.cls_w.a, s);
  scale_vec(g.head.cls_b, s);
  scale_vec(g.head.box_w1.a, s);
  scale_vec(g.head.box_b1, s);
  scale_vec(g.head.box_w2.a, s);
  scale_vec(g.head.box_b2, s);
  scale_vec(g.head.box_w3.a, s);
  scale_vec(g.head.box_b3, s);
  scale_layer(g.head.toy_decoder, s);
  scale_vec(g.base_content, s);
  scale_vec(g.embeddings.a, s);
}

}  // namespace detail

constexpr double kGradClipNorm = 1.0;

inline void apply_step(DeskModel& m, ModelOptState& opt, ModelGrads& grads, double lr, double momentum = 0.9) {
  const double norm = detail::grad_norm(grads);
  if (norm > kGradClipNorm) detail::scale_grads(grads, kGradClipNorm / norm);
  sgd_step(m.cem, opt.vel.cem, grads.cem, lr, momentum);
  sgd_step(m.head, opt.vel.head, grads.head, lr, momentum);
  sgd_step(m.base_content, opt.vel.base_content, grads.base_content, lr, momentum);
  if (m.table.learnable) sgd_step(m.table.rows, opt.vel.embeddings, grads.embeddings, lr, momentum);
}

// ---------------------------------------------------------------------------
// inference for the merged baseline: per-query argmax over all K classes

inline std::vector<Detection> detect_merged(const Features& feat, const DeskModel& m, double score_threshold) {
  std::vector<Detection> out;
  const CemForward fwd = cem_forward(m.table, feat, m.cem);
  const std::vector<int> cat_ids = topk_select(fwd.scores, m.cfg.top_k);
  if (cat_ids.empty()) return out;
  const std::vector<Box> refs = grid_references(static_cast<int>(cat_ids.size()), m.cfg.n_per_class);
  const QuerySet qs = assign_queries(cat_ids, m.table, m.base_content, refs, m.cfg.n_per_class);
  const Mat qd = toy_decoder(qs, feat, m.head);
  Mat emb(qs.size(), m.table.d);
  Vec bias(qs.size());
  for (int i = 0; i < qs.size(); ++i) {
    const int gid = qs.queries[i].class_id;
    for (int j = 0; j < m.table.d; ++j) emb(i, j) = m.table.rows(gid, j);
    bias[i] = m.cem.bias[gid];
  }
  HeadCache hc;
  const HeadOutputs ho = head_predict(qd, emb, refs, m.head, bias, &hc);
  const Mat probs = detail::merged_class_probs(hc, m.table, m.cem.bias);
  for (int j = 0; j < qs.size(); ++j) {
    int best = 0;
    for (int k = 1; k < m.table.k; ++k)
      if (probs(j, k) > probs(j, best)) best = k;
    if (probs(j, best) > score_threshold) out.push_back({best, probs(j, best), ho.boxes[j]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// training driver and reports

struct RunReport {
  BenchConfig cfg;
  std::vector<double> loss_curve;  // mean per-sample total loss per epoch
  double multilabel_precision = 0.0;
  double multilabel_recall = 0.0;
  double mean_ap = 0.0;
  std::map<int, double> per_class_ap;
  std::map<int, double> per_dataset_map;
  int diverged_at_epoch = -1;  // -1: completed
  double wall_clock_sec = 0.0;  // console diagnostics only, never serialized
};

constexpr int kBatchSize = 8;
constexpr int kEvalImagesPerDataset = 60;

inline std::vector<std::vector<Detection>> run_inference(const DeskModel& m, const std::vector<Scene>& scenes,
                                                         double score_threshold = 0.0) {
  std::vector<std::vector<Detection>> dets;
  dets.reserve(scenes.size());
  for (const auto& scene : scenes) {
    const Features feat = synthesize_features(scene, m.world_table, m.cfg.seed);
    if (m.cfg.matching_mode == MatchingMode::kGroup) {
      dets.push_back(detect(feat, m.table, m.cem, m.head, m.base_content, m.cfg.top_k, m.cfg.n_per_class,
                            score_threshold));
    } else {
      dets.push_back(detect_merged(feat, m, score_threshold));
    }
  }
  return dets;
}

inline void evaluate_into_report(const DeskModel& m, const std::vector<Scene>& eval_scenes, RunReport& report) {
  std::vector<std::vector<int>> topk_sets;
  topk_sets.reserve(eval_scenes.size());
  for (const auto& scene : eval_scenes) {
    const Features feat = synthesize_features(scene, m.world_table, m.cfg.seed);
    const CemForward fwd = cem_forward(m.table, feat, m.cem);
    topk_sets.push_back(topk_select(fwd.scores, m.cfg.top_k));
  }
  const MultilabelResult ml = evaluate_multilabel(topk_sets, eval_scenes, m.cfg.top_k, m.table.k);
  report.multilabel_precision = ml.precision;
  report.multilabel_recall = ml.recall;

  const std::vector<std::vector<Detection>> dets = run_inference(m, eval_scenes);
  const DetectionEval det_eval = evaluate_detection(dets, eval_scenes);
  report.mean_ap = det_eval.mean_ap;
  report.per_class_ap = det_eval.per_class_ap;

  for (const auto& desc : m.datasets) {
    std::vector<Scene> subset;
    std::vector<std::vector<Detection>> subset_dets;
    for (size_t i = 0; i < eval_scenes.size(); ++i) {
      if (eval_scenes[i].dataset_id == desc.dataset_id) {
        subset.push_back(eval_scenes[i]);
        subset_dets.push_back(dets[i]);
      }
    }
    report.per_dataset_map[desc.dataset_id] = evaluate_detection(subset_dets, subset).mean_ap;
  }
}

struct TrainOutput {
  DeskModel model;
  RunReport report;
  std::vector<Scene> eval_scenes;
};

// Step schedule: linear warmup over the first 5%, then a 10x drop over the
// last 30% of training.
inline double scheduled_lr(double base_lr, int step, int total_steps) {
  if (total_steps <= 0) return base_lr;
  const int warmup = std::max(1, total_steps / 20);
  if (step < warmup) return base_lr * (step + 1) / warmup;
  return step >= (7 * total_steps) / 10 ? base_lr * 0.1 : base_lr;
}

inline TrainOutput run_train(const BenchConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  GeneratedData data = generate_datasets(cfg);
  TrainOutput out;
  out.model = init_model(data, cfg);
  DeskModel& model = out.model;
  out.report.cfg = cfg;

  const MatchWeights weights;
  const FocalConfig focal_cfg;
  const AslConfig asl_cfg;

  std::vector<Features> features;
  features.reserve(data.scenes.size());
  for (const auto& scene : data.scenes) features.push_back(synthesize_features(scene, model.world_table, cfg.seed));

  ModelOptState opt = ModelOptState::make(model);
  const int n_scenes = static_cast<int>(data.scenes.size());
  std::vector<int> order(n_scenes);
  for (int i = 0; i < n_scenes; ++i) order[i] = i;

  DeskModel snapshot = model;
  const int batches_per_epoch = (n_scenes + kBatchSize - 1) / kBatchSize;
  const int total_steps = cfg.epochs * batches_per_epoch;
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(mix_seed(cfg.seed, "shuffle"), static_cast<uint64_t>(epoch)));
    for (int i = n_scenes - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle_rng.uniform_int(static_cast<uint64_t>(i + 1)));
      std::swap(order[i], order[j]);
    }
    double epoch_loss = 0.0;
    bool diverged = false;
    for (int start = 0; start < n_scenes; start += kBatchSize) {
      const int end = std::min(start + kBatchSize, n_scenes);
      ModelGrads grads = ModelGrads::zeros(model);
      const double scale = 1.0 / static_cast<double>(end - start);
      double batch_loss = 0.0;
      for (int b = start; b < end; ++b) {
        const int idx = order[b];
        const SampleResult r =
            sample_loss(model, data.scenes[idx], features[idx], weights, focal_cfg, asl_cfg, &grads, scale);
        batch_loss += r.total() * scale;
      }
      if (!std::isfinite(batch_loss)) {
        diverged = true;
        break;
      }
      apply_step(model, opt, grads, scheduled_lr(cfg.lr, step, total_steps));
      ++step;
      epoch_loss += batch_loss * static_cast<double>(end - start);
    }
    if (diverged) {
      model = snapshot;  // last good state
      out.report.diverged_at_epoch = epoch;
      break;
    }
    out.report.loss_curve.push_back(epoch_loss / static_cast<double>(n_scenes));
    snapshot = model;
  }

  out.eval_scenes = generate_scenes(cfg, model.datasets, model.alias_pairs, kEvalImagesPerDataset, "eval-scenes");
  evaluate_into_report(model, out.eval_scenes, out.report);
  out.report.wall_clock_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ---------------------------------------------------------------------------
// group vs standard-merged comparison

struct CompareReport {
  RunReport group;
  RunReport merged;
  std::vector<int> aliased_classes;
  double group_alias_map = 0.0;   // mean AP over aliased classes, group mode
  double merged_alias_map = 0.0;  // same, merged mode
  std::map<int, double> ap_delta;  // per class: group - merged
};

// Trains twice from the same seed: group matching vs standard matching over
// the naively merged label space (aliases stay duplicated competitors).
inline CompareReport compare_modes(const BenchConfig& cfg) {
  BenchConfig group_cfg = cfg;
  group_cfg.matching_mode = MatchingMode::kGroup;
  BenchConfig merged_cfg = cfg;
  merged_cfg.matching_mode = MatchingMode::kStandardMerged;

  CompareReport rep;
  TrainOutput group_out = run_train(group_cfg);
  TrainOutput merged_out = run_train(merged_cfg);
  rep.group = group_out.report;
  rep.merged = merged_out.report;

  std::set<int> aliased;
  for (const auto& [a, b] : group_out.model.alias_pairs) {
    aliased.insert(a);
    aliased.insert(b);
  }
  rep.aliased_classes.assign(aliased.begin(), aliased.end());
  int n_alias_scored = 0;
  for (int gid : rep.aliased_classes) {
    auto g = rep.group.per_class_ap.find(gid);
    auto s = rep.merged.per_class_ap.find(gid);
    if (g != rep.group.per_class_ap.end() && s != rep.merged.per_class_ap.end()) {
      rep.group_alias_map += g->second;
      rep.merged_alias_map += s->second;
      ++n_alias_scored;
    }
  }
  if (n_alias_scored > 0) {
    rep.group_alias_map /= n_alias_scored;
    rep.merged_alias_map /= n_alias_scored;
  }
  for (const auto& [gid, ap] : rep.group.per_class_ap) {
    auto s = rep.merged.per_class_ap.find(gid);
    if (s != rep.merged.per_class_ap.end()) rep.ap_delta[gid] = ap - s->second;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// checkpointing of the full model

inline Checkpoint model_to_checkpoint(const DeskModel& m) {
  Checkpoint ckpt;
  auto put_layer = [&](const std::string& prefix, const ClassDecoderLayerParams& p) {
    ckpt.put(prefix + ".wq", p.wq);
    ckpt.put(prefix + ".wk", p.wk);
    ckpt.put(prefix + ".wv", p.wv);
    ckpt.put(prefix + ".wo", p.wo);
    ckpt.put(prefix + ".norm1.scale", p.norm1.scale);
    ckpt.put(prefix + ".norm1.shift", p.norm1.shift);
    ckpt.put(prefix + ".norm2.scale", p.norm2.scale);
    ckpt.put(prefix + ".norm2.shift", p.norm2.shift);
    ckpt.put(prefix + ".ffn.w1", p.w1);
    ckpt.put(prefix + ".ffn.b1", p.b1);
    ckpt.put(prefix + ".ffn.w2", p.w2);
    ckpt.put(prefix + ".ffn.b2", p.b2);
  };
  put_layer("cem.layer0", m.cem.layers[0]);
  put_layer("cem.layer1", m.cem.layers[1]);
  ckpt.put("cem.score_proj", m.cem.score_proj);
  ckpt.put("cem.bias", m.cem.bias);
  ckpt.put("head.cls_w", m.head.cls_w);
  ckpt.put("head.cls_b", m.head.cls_b);
  ckpt.put("head.box_w1", m.head.box_w1);
  ckpt.put("head.box_b1", m.head.box_b1);
  ckpt.put("head.box_w2", m.head.box_w2);
  ckpt.put("head.box_b2", m.head.box_b2);
  ckpt.put("head.box_w3", m.head.box_w3);
  ckpt.put("head.box_b3", m.head.box_b3);
  put_layer("head.toy_decoder", m.head.toy_decoder);
  ckpt.put("base_content", m.base_content);
  ckpt.put("embeddings", m.table.rows);
  ckpt.put_scalar("embeddings.learnable", m.table.learnable ? 1.0 : 0.0);
  ckpt.put("world_embeddings", m.world_table.rows);
  return ckpt;
}

inline void checkpoint_to_model(const Checkpoint& ckpt, DeskModel& m) {
  auto get_layer = [&](const std::string& prefix, ClassDecoderLayerParams& p) {
    p.wq = ckpt.get_mat(prefix + ".wq");
    p.wk = ckpt.get_mat(prefix + ".wk");
    p.wv = ckpt.get_mat(prefix + ".wv");
    p.wo = ckpt.get_mat(prefix + ".wo");
    p.norm1.scale = ckpt.get_vec(prefix + ".norm1.scale");
    p.norm1.shift = ckpt.get_vec(prefix + ".norm1.shift");
    p.norm2.scale = ckpt.get_vec(prefix + ".norm2.scale");
    p.norm2.shift = ckpt.get_vec(prefix + ".norm2.shift");
    p.w1 = ckpt.get_mat(prefix + ".ffn.w1");
    p.b1 = ckpt.get_vec(prefix + ".ffn.b1");
    p.w2 = ckpt.get_mat(prefix + ".ffn.w2");
    p.b2 = ckpt.get_vec(prefix + ".ffn.b2");
  };
  get_layer("cem.layer0", m.cem.layers[0]);
  get_layer("cem.layer1", m.cem.layers[1]);
  m.cem.score_proj = ckpt.get_mat("cem.score_proj");
  m.cem.bias = ckpt.get_vec("cem.bias");
  m.head.cls_w = ckpt.get_mat("head.cls_w");
  m.head.cls_b = ckpt.get_vec("head.cls_b");
  m.head.box_w1 = ckpt.get_mat("head.box_w1");
  m.head.box_b1 = ckpt.get_vec("head.box_b1");
  m.head.box_w2 = ckpt.get_mat("head.box_w2");
  m.head.box_b2 = ckpt.get_vec("head.box_b2");
  m.head.box_w3 = ckpt.get_mat("head.box_w3");
  m.head.box_b3 = ckpt.get_vec("head.box_b3");
  get_layer("head.toy_decoder", m.head.toy_decoder);
  m.base_content = ckpt.get_vec("base_content");
  m.table.rows = ckpt.get_mat("embeddings");
  m.table.k = m.table.rows.rows;
  m.table.d = m.table.rows.cols;
  m.table.learnable = ckpt.get_scalar("embeddings.learnable") != 0.0;
  m.world_table.rows = ckpt.get_mat("world_embeddings");
  m.world_table.k = m.world_table.rows.rows;
  m.world_table.d = m.world_table.rows.cols;
  m.world_table.learnable = false;
}

}  // namespace metr
