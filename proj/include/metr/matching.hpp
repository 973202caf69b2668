#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "metr/errors.hpp"
#include "metr/geometry.hpp"
#include "metr/head.hpp"
#include "metr/losses.hpp"
#include "metr/mat.hpp"

namespace metr {

// Rectangular matching cost: rows are ground truths, columns queries.
using CostMatrix = Mat;

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (row/gt index, col/query index)
  double total_cost = 0.0;
};

struct GtObject {
  int class_id = -1;
  Box box;
};

struct PredObject {
  Vec probs;  // per-class sigmoid scores, length K
  Box box;
};

// Exact one-to-one assignment with globally minimal total cost (shortest
// augmenting path with potentials). Requires rows <= cols; deterministic,
// equal-cost alternatives resolve toward the lowest column index.
inline Assignment hungarian(const CostMatrix& cost) {
  const int n = cost.rows;
  const int m = cost.cols;
  Assignment result;
  if (n == 0) return result;
  if (n > m) {
    throw DomainError("hungarian: infeasible, " + std::to_string(n) + " rows > " + std::to_string(m) + " cols");
  }
  for (double v : cost.a) {
    if (!std::isfinite(v)) throw DomainError("hungarian: non-finite cost entry");
  }

  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> match(m + 1, 0);  // match[j] = row (1-based) assigned to column j
  std::vector<int> way(m + 1, 0);

  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = match[j0];
      double delta = kInf;
      int j1 = -1;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  result.pairs.reserve(n);
  for (int j = 1; j <= m; ++j) {
    if (match[j] != 0) result.pairs.emplace_back(match[j] - 1, j - 1);
  }
  std::sort(result.pairs.begin(), result.pairs.end());
  for (const auto& [r, c] : result.pairs) result.total_cost += cost(r, c);
  return result;
}

// Standard DETR matching cost over the full label space:
// entry(i,j) = mu_cls * focal(probs_j[class_i]) + box_cost(box_j, gt_i).
inline CostMatrix build_cost_standard(const std::vector<PredObject>& preds, const std::vector<GtObject>& gts,
                                      const MatchWeights& w, const FocalConfig& cfg) {
  CostMatrix cost(static_cast<int>(gts.size()), static_cast<int>(preds.size()));
  for (size_t i = 0; i < gts.size(); ++i) {
    for (size_t j = 0; j < preds.size(); ++j) {
      cost(static_cast<int>(i), static_cast<int>(j)) =
          w.mu_cls * multiclass_focal_cost(preds[j].probs, gts[i].class_id, cfg) +
          box_cost(preds[j].box, gts[i].box, w);
    }
  }
  return cost;
}

inline Assignment match_standard(const std::vector<PredObject>& preds, const std::vector<GtObject>& gts,
                                 const MatchWeights& w, const FocalConfig& cfg) {
  if (gts.empty()) return {};
  return hungarian(build_cost_standard(preds, gts, w, cfg));
}

// ---------------------------------------------------------------------------
// group bipartite matching

struct ClassGroup {
  int class_id = -1;
  std::vector<int> gt_indices;
  std::vector<int> query_indices;
};

struct ClassPartition {
  std::vector<ClassGroup> groups;     // in category-list order
  std::vector<int> orphaned_gts;      // gts whose class has no query group
};

inline ClassPartition partition_by_class(const QuerySet& qs, const std::vector<GtObject>& gts) {
  ClassPartition part;
  std::map<int, int> group_of_class;
  for (size_t c = 0; c < qs.category_list.size(); ++c) {
    ClassGroup group;
    group.class_id = qs.category_list[c];
    for (int q = 0; q < qs.n_per_class; ++q) {
      group.query_indices.push_back(static_cast<int>(c) * qs.n_per_class + q);
    }
    group_of_class[group.class_id] = static_cast<int>(part.groups.size());
    part.groups.push_back(std::move(group));
  }
  for (size_t i = 0; i < gts.size(); ++i) {
    auto it = group_of_class.find(gts[i].class_id);
    if (it == group_of_class.end()) {
      part.orphaned_gts.push_back(static_cast<int>(i));
    } else {
      part.groups[it->second].gt_indices.push_back(static_cast<int>(i));
    }
  }
  return part;
}

struct GroupedMatch {
  int class_id = -1;
  std::vector<int> gt_indices;     // global gt indices of this group
  std::vector<int> query_indices;  // global query indices of this group
  Assignment assignment;           // local (gt slot, query slot) pairs

  std::vector<std::pair<int, int>> global_pairs() const {
    std::vector<std::pair<int, int>> out;
    out.reserve(assignment.pairs.size());
    for (const auto& [gi, qi] : assignment.pairs) out.emplace_back(gt_indices[gi], query_indices[qi]);
    return out;
  }
};

struct GroupMatchResult {
  std::vector<GroupedMatch> groups;
  std::vector<int> orphaned_gts;  // no query group, or overflow beyond n_per_class
};

// Per-class one-to-one assignment: a ground truth of class Omega may only
// match queries pre-assigned Omega. Costs use the query's single-class
// matchability. When a class has more gts than queries, the cheapest
// min(M', N') pairs are kept and the rest reported as orphaned.
inline GroupMatchResult match_group(const QuerySet& qs, const std::vector<GtObject>& gts, const Vec& matchability,
                                    const std::vector<Box>& pred_boxes, const MatchWeights& w,
                                    const FocalConfig& cfg) {
  if (static_cast<int>(matchability.size()) != qs.size() || static_cast<int>(pred_boxes.size()) != qs.size()) {
    throw ShapeError("match_group: predictions misaligned with query set");
  }
  ClassPartition part = partition_by_class(qs, gts);
  GroupMatchResult result;
  result.orphaned_gts = part.orphaned_gts;

  for (auto& pgroup : part.groups) {
    GroupedMatch gm;
    gm.class_id = pgroup.class_id;
    gm.gt_indices = pgroup.gt_indices;
    gm.query_indices = pgroup.query_indices;
    const int m_gt = static_cast<int>(gm.gt_indices.size());
    const int n_q = static_cast<int>(gm.query_indices.size());
    if (m_gt == 0) {
      result.groups.push_back(std::move(gm));
      continue;
    }
    Vec cls_cost(n_q);
    for (int j = 0; j < n_q; ++j) {
      cls_cost[j] = w.mu_cls * class_match_cost(clamp_prob(matchability[gm.query_indices[j]]), cfg);
    }
    if (m_gt <= n_q) {
      CostMatrix cost(m_gt, n_q);
      for (int i = 0; i < m_gt; ++i) {
        const Box& gt_box = gts[gm.gt_indices[i]].box;
        for (int j = 0; j < n_q; ++j) {
          cost(i, j) = cls_cost[j] + box_cost(pred_boxes[gm.query_indices[j]], gt_box, w);
        }
      }
      gm.assignment = hungarian(cost);
    } else {
      // overflow: more gts than queries; match every query, orphan the rest
      CostMatrix cost(n_q, m_gt);
      for (int j = 0; j < n_q; ++j) {
        for (int i = 0; i < m_gt; ++i) {
          cost(j, i) = cls_cost[j] + box_cost(pred_boxes[gm.query_indices[j]], gts[gm.gt_indices[i]].box, w);
        }
      }
      Assignment transposed = hungarian(cost);
      std::vector<char> gt_used(m_gt, 0);
      for (const auto& [qj, gi] : transposed.pairs) {
        gm.assignment.pairs.emplace_back(gi, qj);
        gm.assignment.total_cost += cost(qj, gi);
        gt_used[gi] = 1;
      }
      std::sort(gm.assignment.pairs.begin(), gm.assignment.pairs.end());
      for (int i = 0; i < m_gt; ++i) {
        if (!gt_used[i]) result.orphaned_gts.push_back(gm.gt_indices[i]);
      }
    }
    result.groups.push_back(std::move(gm));
  }
  std::sort(result.orphaned_gts.begin(), result.orphaned_gts.end());
  return result;
}

// ---------------------------------------------------------------------------
// training loss over matched/unmatched queries

struct DetectionLossGrad {
  double value = 0.0;
  Vec d_scores;                             // d(value)/d(matchability), per query
  std::vector<std::array<double, 4>> d_boxes;  // per query, center form; zero when unmatched
};

// Matched query: mu_cls * focal(p, 1) + box_cost against its gt. Unmatched
// query: mu_cls * focal(p, 0) as background, no box term (disable via
// supervise_negatives for the ablation).
inline DetectionLossGrad training_loss(const GroupMatchResult& matches, const QuerySet& qs,
                                       const Vec& matchability, const std::vector<Box>& pred_boxes,
                                       const std::vector<GtObject>& gts, const MatchWeights& w,
                                       const FocalConfig& cfg, bool supervise_negatives = true) {
  const int n = qs.size();
  if (static_cast<int>(matchability.size()) != n || static_cast<int>(pred_boxes.size()) != n) {
    throw ShapeError("training_loss: predictions misaligned with query set");
  }
  DetectionLossGrad out;
  out.d_scores.assign(n, 0.0);
  out.d_boxes.assign(n, {0.0, 0.0, 0.0, 0.0});
  std::vector<char> matched(n, 0);

  for (const auto& gm : matches.groups) {
    for (const auto& [gi, qi] : gm.assignment.pairs) {
      const int q = gm.query_indices[qi];
      const int g = gm.gt_indices[gi];
      matched[q] = 1;
      const double p = clamp_prob(matchability[q]);
      LossAndGrad focal = binary_focal(p, 1, cfg);
      out.value += w.mu_cls * focal.value;
      out.d_scores[q] += w.mu_cls * focal.grad[0];
      std::array<double, 4> dbox{};
      out.value += box_cost_grad(pred_boxes[q], gts[g].box, w, dbox);
      out.d_boxes[q] = dbox;
    }
  }
  if (supervise_negatives) {
    for (int q = 0; q < n; ++q) {
      if (matched[q]) continue;
      const double p = clamp_prob(matchability[q]);
      LossAndGrad focal = binary_focal(p, 0, cfg);
      out.value += w.mu_cls * focal.value;
      out.d_scores[q] += w.mu_cls * focal.grad[0];
    }
  }
  return out;
}

}  // namespace metr
