#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "metr/errors.hpp"

namespace metr {

// Dense row-major matrix of doubles. Sized for desk-scale numerics
// (K, HW, d all in the tens), so everything is plain loops.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c, double fill = 0.0) : rows(r), cols(c), a(static_cast<size_t>(r) * c, fill) {}

  double& operator()(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }

  const double* row(int i) const { return a.data() + static_cast<size_t>(i) * cols; }
  double* row(int i) { return a.data() + static_cast<size_t>(i) * cols; }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

using Vec = std::vector<double>;

inline void require_shape(const Mat& m, int r, int c, const char* name) {
  if (m.rows != r || m.cols != c) {
    throw ShapeError(std::string(name) + ": expected " + std::to_string(r) + "x" + std::to_string(c) +
                     ", got " + std::to_string(m.rows) + "x" + std::to_string(m.cols));
  }
}

// C = A * B
inline Mat matmul(const Mat& A, const Mat& B) {
  if (A.cols != B.rows) throw ShapeError("matmul: inner dims disagree");
  Mat C(A.rows, B.cols);
  for (int i = 0; i < A.rows; ++i) {
    for (int k = 0; k < A.cols; ++k) {
      const double aik = A(i, k);
      if (aik == 0.0) continue;
      const double* brow = B.row(k);
      double* crow = C.row(i);
      for (int j = 0; j < B.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return C;
}

// C = A^T * B
inline Mat matmul_tn(const Mat& A, const Mat& B) {
  if (A.rows != B.rows) throw ShapeError("matmul_tn: inner dims disagree");
  Mat C(A.cols, B.cols);
  for (int k = 0; k < A.rows; ++k) {
    const double* arow = A.row(k);
    const double* brow = B.row(k);
    for (int i = 0; i < A.cols; ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* crow = C.row(i);
      for (int j = 0; j < B.cols; ++j) crow[j] += aki * brow[j];
    }
  }
  return C;
}

// C = A * B^T
inline Mat matmul_nt(const Mat& A, const Mat& B) {
  if (A.cols != B.cols) throw ShapeError("matmul_nt: inner dims disagree");
  Mat C(A.rows, B.rows);
  for (int i = 0; i < A.rows; ++i) {
    const double* arow = A.row(i);
    for (int j = 0; j < B.rows; ++j) {
      const double* brow = B.row(j);
      double s = 0.0;
      for (int k = 0; k < A.cols; ++k) s += arow[k] * brow[k];
      C(i, j) = s;
    }
  }
  return C;
}

inline Mat transpose(const Mat& A) {
  Mat T(A.cols, A.rows);
  for (int i = 0; i < A.rows; ++i)
    for (int j = 0; j < A.cols; ++j) T(j, i) = A(i, j);
  return T;
}

inline void add_inplace(Mat& A, const Mat& B) {
  if (!A.same_shape(B)) throw ShapeError("add_inplace: shape mismatch");
  for (size_t i = 0; i < A.a.size(); ++i) A.a[i] += B.a[i];
}

inline void axpy_inplace(Mat& A, double s, const Mat& B) {
  if (!A.same_shape(B)) throw ShapeError("axpy_inplace: shape mismatch");
  for (size_t i = 0; i < A.a.size(); ++i) A.a[i] += s * B.a[i];
}

inline Mat add(const Mat& A, const Mat& B) {
  Mat C = A;
  add_inplace(C, B);
  return C;
}

inline bool all_finite(const Mat& A) {
  for (double v : A.a)
    if (!std::isfinite(v)) return false;
  return true;
}

inline double dot(const double* x, const double* y, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

inline double dot(const Vec& x, const Vec& y) {
  if (x.size() != y.size()) throw ShapeError("dot: length mismatch");
  return dot(x.data(), y.data(), static_cast<int>(x.size()));
}

inline double norm2(const Vec& x) { return std::sqrt(dot(x, x)); }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Inverse sigmoid with the input clamped to [1e-5, 1 - 1e-5].
inline double inverse_sigmoid(double p) {
  const double lo = 1e-5;
  p = std::min(std::max(p, lo), 1.0 - lo);
  return std::log(p / (1.0 - p));
}

// Row-wise softmax, numerically stabilized by the row max.
inline void softmax_rows_inplace(Mat& M) {
  for (int i = 0; i < M.rows; ++i) {
    double* r = M.row(i);
    double mx = r[0];
    for (int j = 1; j < M.cols; ++j) mx = std::max(mx, r[j]);
    double sum = 0.0;
    for (int j = 0; j < M.cols; ++j) {
      r[j] = std::exp(r[j] - mx);
      sum += r[j];
    }
    for (int j = 0; j < M.cols; ++j) r[j] /= sum;
  }
}

// Eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.
// Returns eigenvalues; V's columns hold the corresponding eigenvectors.
inline Vec jacobi_eigh(Mat S, Mat& V) {
  const int n = S.rows;
  if (S.cols != n) throw ShapeError("jacobi_eigh: matrix not square");
  V = Mat(n, n);
  for (int i = 0; i < n; ++i) V(i, i) = 1.0;
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += S(p, q) * S(p, q);
    if (off < 1e-26) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = S(p, q);
        if (std::fabs(apq) < 1e-300) continue;
        const double theta = (S(q, q) - S(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double skp = S(k, p), skq = S(k, q);
          S(k, p) = c * skp - s * skq;
          S(k, q) = s * skp + c * skq;
        }
        for (int k = 0; k < n; ++k) {
          const double spk = S(p, k), sqk = S(q, k);
          S(p, k) = c * spk - s * sqk;
          S(q, k) = s * spk + c * sqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = V(k, p), vkq = V(k, q);
          V(k, p) = c * vkp - s * vkq;
          V(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  Vec eig(n);
  for (int i = 0; i < n; ++i) eig[i] = S(i, i);
  return eig;
}

}  // namespace metr
