#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "metr/errors.hpp"

namespace metr {

// Center-format box in normalized image coordinates.
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  bool valid() const {
    return cx >= 0.0 && cx <= 1.0 && cy >= 0.0 && cy <= 1.0 && w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0;
  }

  bool operator==(const Box& o) const { return cx == o.cx && cy == o.cy && w == o.w && h == o.h; }
};

struct BoxCorners {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double area() const { return (x2 - x1) * (y2 - y1); }
};

// Cost trade-offs of the matching objective: mu_cls scales the
// classification term, lambda_l1/lambda_giou the two box terms.
struct MatchWeights {
  double mu_cls = 2.0;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
};

inline BoxCorners to_corners(const Box& b) {
  return {b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0};
}

inline double iou(const BoxCorners& a, const BoxCorners& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double giou(const BoxCorners& a, const BoxCorners& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
  const double uni = a.area() + b.area() - inter;
  const double cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double ch = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double enclose = cw * ch;
  const double i = uni > 0.0 ? inter / uni : 0.0;
  if (enclose <= 0.0) return i;
  return i - (enclose - uni) / enclose;
}

// GIoU of (pred, gt) plus its gradient in pred's center parameterization.
// Non-differentiable only where an intersection/enclosure edge switches
// owner; a subgradient is returned there.
inline double giou_grad_center(const Box& pred, const Box& gt, std::array<double, 4>& dcenter) {
  const BoxCorners p = to_corners(pred);
  const BoxCorners g = to_corners(gt);

  const double wi = std::min(p.x2, g.x2) - std::max(p.x1, g.x1);
  const double hi = std::min(p.y2, g.y2) - std::max(p.y1, g.y1);
  const bool has_inter = wi > 0.0 && hi > 0.0;
  const double inter = has_inter ? wi * hi : 0.0;
  const double ap = p.area();
  const double uni = ap + g.area() - inter;

  const double wc = std::max(p.x2, g.x2) - std::min(p.x1, g.x1);
  const double hc = std::max(p.y2, g.y2) - std::min(p.y1, g.y1);
  const double enclose = wc * hc;

  // d inter / d pred corners
  double di_x1 = 0.0, di_y1 = 0.0, di_x2 = 0.0, di_y2 = 0.0;
  if (has_inter) {
    if (p.x1 > g.x1) di_x1 = -hi;
    if (p.x2 < g.x2) di_x2 = hi;
    if (p.y1 > g.y1) di_y1 = -wi;
    if (p.y2 < g.y2) di_y2 = wi;
  }
  // d pred-area / d pred corners
  const double da_x1 = -(p.y2 - p.y1), da_x2 = p.y2 - p.y1;
  const double da_y1 = -(p.x2 - p.x1), da_y2 = p.x2 - p.x1;
  // d union = d area - d inter
  const double du_x1 = da_x1 - di_x1, du_x2 = da_x2 - di_x2;
  const double du_y1 = da_y1 - di_y1, du_y2 = da_y2 - di_y2;
  // d enclose / d pred corners
  const double dc_x1 = (p.x1 < g.x1) ? -hc : 0.0;
  const double dc_x2 = (p.x2 > g.x2) ? hc : 0.0;
  const double dc_y1 = (p.y1 < g.y1) ? -wc : 0.0;
  const double dc_y2 = (p.y2 > g.y2) ? wc : 0.0;

  const double u2 = uni * uni;
  const double c2 = enclose * enclose;
  // giou = inter/union - 1 + union/enclose
  auto corner_grad = [&](double di, double du, double dc) {
    return (di * uni - inter * du) / u2 + (du * enclose - uni * dc) / c2;
  };
  const double gx1 = corner_grad(di_x1, du_x1, dc_x1);
  const double gx2 = corner_grad(di_x2, du_x2, dc_x2);
  const double gy1 = corner_grad(di_y1, du_y1, dc_y1);
  const double gy2 = corner_grad(di_y2, du_y2, dc_y2);

  // corners -> (cx, cy, w, h)
  dcenter[0] = gx1 + gx2;
  dcenter[1] = gy1 + gy2;
  dcenter[2] = 0.5 * (gx2 - gx1);
  dcenter[3] = 0.5 * (gy2 - gy1);

  return inter / uni - (enclose - uni) / enclose;
}

// lambda_l1 * |pred - gt|_1 (center form) + lambda_giou * (1 - giou).
inline double box_cost(const Box& pred, const Box& gt, const MatchWeights& w) {
  const double l1 =
      std::fabs(pred.cx - gt.cx) + std::fabs(pred.cy - gt.cy) + std::fabs(pred.w - gt.w) + std::fabs(pred.h - gt.h);
  return w.lambda_l1 * l1 + w.lambda_giou * (1.0 - giou(to_corners(pred), to_corners(gt)));
}

// box_cost value plus gradient in pred's (cx, cy, w, h).
inline double box_cost_grad(const Box& pred, const Box& gt, const MatchWeights& w, std::array<double, 4>& dpred) {
  std::array<double, 4> dgiou{};
  const double gi = giou_grad_center(pred, gt, dgiou);
  const double dp[4] = {pred.cx - gt.cx, pred.cy - gt.cy, pred.w - gt.w, pred.h - gt.h};
  double l1 = 0.0;
  for (int k = 0; k < 4; ++k) {
    l1 += std::fabs(dp[k]);
    const double sign = dp[k] > 0.0 ? 1.0 : (dp[k] < 0.0 ? -1.0 : 0.0);
    dpred[k] = w.lambda_l1 * sign - w.lambda_giou * dgiou[k];
  }
  return w.lambda_l1 * l1 + w.lambda_giou * (1.0 - gi);
}

}  // namespace metr
