#pragma once

// Independent reference implementations used to derive and check expected
// values. Everything here is deliberately written as plain loops against
// raw buffers so it shares no code path with the library.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "metr/geometry.hpp"
#include "metr/mat.hpp"
#include "metr/rng.hpp"

namespace oracle {

struct McAreas {
  double iou = 0.0;
  double giou = 0.0;
};

// Monte-Carlo area sampling inside the enclosing hull of the two boxes.
// iou = P(in both)/P(in either); giou = iou - P(in neither-region of hull).
inline McAreas mc_iou_giou(const metr::BoxCorners& a, const metr::BoxCorners& b, int samples, uint64_t seed) {
  const double hx1 = std::min(a.x1, b.x1), hy1 = std::min(a.y1, b.y1);
  const double hx2 = std::max(a.x2, b.x2), hy2 = std::max(a.y2, b.y2);
  metr::Rng rng(seed);
  long long in_both = 0, in_either = 0;
  for (int i = 0; i < samples; ++i) {
    const double x = hx1 + (hx2 - hx1) * rng.uniform();
    const double y = hy1 + (hy2 - hy1) * rng.uniform();
    const bool in_a = x >= a.x1 && x <= a.x2 && y >= a.y1 && y <= a.y2;
    const bool in_b = x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2;
    if (in_a && in_b) ++in_both;
    if (in_a || in_b) ++in_either;
  }
  McAreas out;
  const double p_both = static_cast<double>(in_both) / samples;
  const double p_either = static_cast<double>(in_either) / samples;
  out.iou = p_either > 0.0 ? p_both / p_either : 0.0;
  out.giou = out.iou - (1.0 - p_either);
  return out;
}

// Minimum-cost injection of rows into columns by full enumeration.
inline double brute_force_assignment(const std::vector<std::vector<double>>& cost, std::vector<int>* best_cols = nullptr) {
  const int rows = static_cast<int>(cost.size());
  if (rows == 0) return 0.0;
  const int cols = static_cast<int>(cost[0].size());
  std::vector<int> pick(rows, -1), best(rows, -1);
  std::vector<char> used(cols, 0);
  double best_cost = std::numeric_limits<double>::infinity();
  // no partial-sum pruning: costs may be negative
  std::function<void(int, double)> rec = [&](int r, double acc) {
    if (r == rows) {
      if (acc < best_cost) {
        best_cost = acc;
        best = pick;
      }
      return;
    }
    for (int c = 0; c < cols; ++c) {
      if (used[c]) continue;
      used[c] = 1;
      pick[r] = c;
      rec(r + 1, acc + cost[r][c]);
      used[c] = 0;
    }
  };
  rec(0, 0.0);
  if (best_cols) *best_cols = best;
  return best_cost;
}

// Central finite difference of a scalar function of one scalar.
inline double central_diff(const std::function<double(double)>& f, double x, double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

// Checks an analytic gradient against central differences. Differences at
// or below the finite-difference noise floor (roundoff cancellation at
// h = 1e-5 plus the h^2 truncation term) count as matching regardless of
// the relative error, which is meaningless there.
inline bool grad_matches(double analytic, double numeric, double tol = 1e-4) {
  if (std::fabs(analytic - numeric) <= 2e-9) return true;
  return rel_err(analytic, numeric) < tol;
}

// ---------------------------------------------------------------------------
// naive dense-matrix forward of the class-decoder stack, raw loops only

using Grid = std::vector<std::vector<double>>;

inline Grid to_grid(const metr::Mat& m) {
  Grid g(m.rows, std::vector<double>(m.cols));
  for (int i = 0; i < m.rows; ++i)
    for (int j = 0; j < m.cols; ++j) g[i][j] = m(i, j);
  return g;
}

inline Grid naive_matmul(const Grid& a, const Grid& b) {
  Grid c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < b[0].size(); ++j)
      for (size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

struct NaiveLayer {
  Grid wq, wk, wv, wo, w1, w2;
  std::vector<double> n1s, n1b, n2s, n2b, b1, b2;
};

inline Grid naive_cross_attention(const Grid& e, const Grid& f, const NaiveLayer& p, Grid* weights_out = nullptr) {
  const size_t n = e.size(), hw = f.size(), d = e[0].size();
  Grid q = naive_matmul(e, p.wq);
  Grid k = naive_matmul(f, p.wk);
  Grid v = naive_matmul(f, p.wv);
  Grid w(n, std::vector<double>(hw, 0.0));
  for (size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < hw; ++j) {
      double s = 0.0;
      for (size_t t = 0; t < d; ++t) s += q[i][t] * k[j][t];
      w[i][j] = s / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, w[i][j]);
    }
    double sum = 0.0;
    for (size_t j = 0; j < hw; ++j) {
      w[i][j] = std::exp(w[i][j] - mx);
      sum += w[i][j];
    }
    for (size_t j = 0; j < hw; ++j) w[i][j] /= sum;
  }
  if (weights_out) *weights_out = w;
  Grid av = naive_matmul(w, v);
  return naive_matmul(av, p.wo);
}

inline Grid naive_class_decoder_layer(const Grid& e, const Grid& f, const NaiveLayer& p) {
  const size_t n = e.size(), d = e[0].size();
  Grid attn = naive_cross_attention(e, f, p);
  Grid a(n, std::vector<double>(d));
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j) a[i][j] = p.n1s[j] * (e[i][j] + attn[i][j]) + p.n1b[j];
  Grid h = naive_matmul(a, p.w1);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < h[0].size(); ++j) h[i][j] = std::max(h[i][j] + p.b1[j], 0.0);
  Grid ffn = naive_matmul(h, p.w2);
  Grid out(n, std::vector<double>(d));
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j) out[i][j] = p.n2s[j] * (a[i][j] + ffn[i][j] + p.b2[j]) + p.n2b[j];
  return out;
}

}  // namespace oracle
