#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <vector>

#include "metr/geometry.hpp"
#include "metr/head.hpp"
#include "metr/scene.hpp"

namespace metr {

struct MultilabelResult {
  double precision = 0.0;
  double recall = 0.0;
};

// Category-set quality of the CEM: per scene, recall is the fraction of
// ground-truth classes inside the TopK set, precision the fraction of
// usable TopK slots that hit a ground-truth class.
inline MultilabelResult evaluate_multilabel(const std::vector<std::vector<int>>& topk_sets,
                                            const std::vector<Scene>& scenes, int top_k, int num_categories) {
  if (topk_sets.size() != scenes.size()) throw ShapeError("evaluate_multilabel: outputs misaligned with scenes");
  MultilabelResult res;
  if (scenes.empty()) return res;
  const double denom_p = static_cast<double>(std::min(top_k, num_categories));
  for (size_t i = 0; i < scenes.size(); ++i) {
    const std::set<int> gt = scenes[i].gt_classes();
    if (gt.empty()) continue;
    int hits = 0;
    for (int id : topk_sets[i])
      if (gt.count(id)) ++hits;
    res.recall += static_cast<double>(hits) / static_cast<double>(gt.size());
    res.precision += static_cast<double>(hits) / denom_p;
  }
  res.recall /= static_cast<double>(scenes.size());
  res.precision /= static_cast<double>(scenes.size());
  return res;
}

struct DetectionEval {
  std::map<int, double> per_class_ap;  // only classes with >= 1 ground truth
  std::map<int, int> gt_counts;
  double mean_ap = 0.0;
};

namespace detail {

struct RankedDet {
  int scene = -1;
  double score = 0.0;
  Box box;
};

inline bool ranked_before(const RankedDet& a, const RankedDet& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.box.cx != b.box.cx) return a.box.cx < b.box.cx;
  if (a.box.cy != b.box.cy) return a.box.cy < b.box.cy;
  if (a.box.w != b.box.w) return a.box.w < b.box.w;
  return a.box.h < b.box.h;
}

inline double eleven_point_ap(const std::vector<double>& precision, const std::vector<double>& recall) {
  double ap = 0.0;
  for (int i = 0; i <= 10; ++i) {
    const double r = i / 10.0;
    double best = 0.0;
    for (size_t k = 0; k < recall.size(); ++k) {
      if (recall[k] >= r) best = std::max(best, precision[k]);
    }
    ap += best / 11.0;
  }
  return ap;
}

}  // namespace detail

// AP@0.5 per class with greedy highest-score-first matching (each ground
// truth claimed at most once) and 11-point interpolation. Equal scores are
// ordered by box coordinates so the result is input-order invariant.
inline DetectionEval evaluate_detection(const std::vector<std::vector<Detection>>& detections,
                                        const std::vector<Scene>& scenes, double iou_threshold = 0.5) {
  if (detections.size() != scenes.size()) throw ShapeError("evaluate_detection: detections misaligned with scenes");
  DetectionEval eval;
  std::map<int, std::vector<detail::RankedDet>> dets_by_class;
  std::map<int, std::vector<std::pair<int, Box>>> gts_by_class;  // (scene, box)
  for (size_t s = 0; s < scenes.size(); ++s) {
    for (const auto& obj : scenes[s].objects) {
      gts_by_class[obj.category_id].emplace_back(static_cast<int>(s), obj.box);
      eval.gt_counts[obj.category_id]++;
    }
    for (const auto& det : detections[s]) {
      dets_by_class[det.category_id].push_back({static_cast<int>(s), det.score, det.box});
    }
  }

  double ap_sum = 0.0;
  for (const auto& [class_id, gts] : gts_by_class) {
    auto dit = dets_by_class.find(class_id);
    if (dit == dets_by_class.end() || dit->second.empty()) {
      eval.per_class_ap[class_id] = 0.0;
      continue;
    }
    std::vector<detail::RankedDet> ranked = dit->second;
    std::sort(ranked.begin(), ranked.end(), detail::ranked_before);
    std::vector<char> claimed(gts.size(), 0);
    int tp = 0, fp = 0;
    std::vector<double> precision, recall;
    precision.reserve(ranked.size());
    recall.reserve(ranked.size());
    for (const auto& det : ranked) {
      int best_gt = -1;
      double best_iou = 0.0;
      const BoxCorners dc = to_corners(det.box);
      for (size_t g = 0; g < gts.size(); ++g) {
        if (claimed[g] || gts[g].first != det.scene) continue;
        const double v = iou(dc, to_corners(gts[g].second));
        if (v > best_iou) {
          best_iou = v;
          best_gt = static_cast<int>(g);
        }
      }
      if (best_gt >= 0 && best_iou >= iou_threshold) {
        claimed[best_gt] = 1;
        ++tp;
      } else {
        ++fp;
      }
      precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
      recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
    }
    const double ap = detail::eleven_point_ap(precision, recall);
    eval.per_class_ap[class_id] = ap;
    ap_sum += ap;
  }
  if (!eval.per_class_ap.empty()) eval.mean_ap = ap_sum / static_cast<double>(eval.per_class_ap.size());
  return eval;
}

}  // namespace metr
