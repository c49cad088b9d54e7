#pragma once
// Dense float64 containers (row-major) and the deterministic kernels the
// trace algebra is built from. Every reduction runs left-to-right over the
// contracted index, so identical inputs give bit-identical results. There is
// no broadcasting: shape mismatches throw instead of being coerced.

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace bpl {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

struct Vec {
  std::vector<double> d;

  Vec() = default;
  explicit Vec(std::size_t n, double fill = 0.0) : d(n, fill) {}
  Vec(std::initializer_list<double> xs) : d(xs) {}

  std::size_t size() const { return d.size(); }
  double& operator[](std::size_t i) { return d[i]; }
  double operator[](std::size_t i) const { return d[i]; }
  double* data() { return d.data(); }
  const double* data() const { return d.data(); }
  void zero() { std::fill(d.begin(), d.end(), 0.0); }
};

struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> d;  // row-major, d[r*cols + c]

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), d(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return d[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return d[r * cols + c]; }
  double* row(std::size_t r) { return d.data() + r * cols; }
  const double* row(std::size_t r) const { return d.data() + r * cols; }
  void zero() { std::fill(d.begin(), d.end(), 0.0); }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
  }
};

// Rank-3 tensor, shape (d0, d1, d2), flat index ((i0*d1)+i1)*d2+i2. The trace
// algebra only ever contracts over the leading index, which is why the flat
// layout doubles as a (d0, d1*d2) matrix view.
struct Tensor3 {
  std::size_t d0 = 0, d1 = 0, d2 = 0;
  std::vector<double> d;

  Tensor3() = default;
  Tensor3(std::size_t a, std::size_t b, std::size_t c, double fill = 0.0)
      : d0(a), d1(b), d2(c), d(a * b * c, fill) {}

  double& at(std::size_t i, std::size_t j, std::size_t k) { return d[(i * d1 + j) * d2 + k]; }
  double at(std::size_t i, std::size_t j, std::size_t k) const { return d[(i * d1 + j) * d2 + k]; }
  double* slab(std::size_t i) { return d.data() + i * d1 * d2; }  // slice i as a d1*d2 block
  const double* slab(std::size_t i) const { return d.data() + i * d1 * d2; }
  void zero() { std::fill(d.begin(), d.end(), 0.0); }
};

// ---- elementwise / BLAS-1 style ----

inline double dot(const Vec& a, const Vec& b) {
  require(a.size() == b.size(), "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const Vec& a) { return std::sqrt(dot(a, a)); }

inline double norm_inf(const Vec& a) {
  double m = 0.0;
  for (double x : a.d) m = std::max(m, std::fabs(x));
  return m;
}

inline double frobenius(const Mat& a) {
  double s = 0.0;
  for (double x : a.d) s += x * x;
  return std::sqrt(s);
}

inline double max_abs(const Mat& a) {
  double m = 0.0;
  for (double x : a.d) m = std::max(m, std::fabs(x));
  return m;
}

inline void axpy(double alpha, const Vec& x, Vec& y) {
  require(x.size() == y.size(), "axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void axpy(double alpha, const Mat& x, Mat& y) {
  require(x.rows == y.rows && x.cols == y.cols, "axpy: shape mismatch");
  for (std::size_t i = 0; i < x.d.size(); ++i) y.d[i] += alpha * x.d[i];
}

inline Vec add(const Vec& a, const Vec& b) {
  require(a.size() == b.size(), "add: length mismatch");
  Vec r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] + b[i];
  return r;
}

inline Vec sub(const Vec& a, const Vec& b) {
  require(a.size() == b.size(), "sub: length mismatch");
  Vec r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
  return r;
}

inline Vec scaled(const Vec& a, double s) {
  Vec r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = s * a[i];
  return r;
}

inline Mat scaled(const Mat& a, double s) {
  Mat r(a.rows, a.cols);
  for (std::size_t i = 0; i < a.d.size(); ++i) r.d[i] = s * a.d[i];
  return r;
}

// ---- matrix products ----

// y = m x
inline Vec matvec(const Mat& m, const Vec& x) {
  require(m.cols == x.size(), "matvec: shape mismatch");
  Vec y(m.rows);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double* mi = m.row(i);
    double s = 0.0;
    for (std::size_t k = 0; k < m.cols; ++k) s += mi[k] * x[k];
    y[i] = s;
  }
  return y;
}

// y = m^T x  (pullback through m); accumulation over rows of m, ascending
inline Vec matvec_t(const Mat& m, const Vec& x) {
  require(m.rows == x.size(), "matvec_t: shape mismatch");
  Vec y(m.cols);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double* mi = m.row(i);
    const double xi = x[i];
    for (std::size_t j = 0; j < m.cols; ++j) y[j] += xi * mi[j];
  }
  return y;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  require(a.cols == b.rows, "matmul: shape mismatch");
  Mat c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ai = a.row(i);
    double* ci = c.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = ai[k];
      const double* bk = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

inline Mat outer(const Vec& a, const Vec& b) {
  Mat m(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    double* mi = m.row(i);
    for (std::size_t j = 0; j < b.size(); ++j) mi[j] = a[i] * b[j];
  }
  return m;
}

// ---- leading-index tensor contraction ----
//
// The eligibility-trace recursion multiplies a state Jacobian into a rank-3
// trace along the trace's leading (state) index. Concretely the tensor is
// reshaped to a (d0, d1*d2) matrix, left-multiplied, and reshaped back; with
// a single row vector on the left the leading index contracts away and the
// result is the (d1, d2) parameter-shaped matrix.

// out(r, e.d1, e.d2), out[i][j][k] = sum_v a[i][v] e[v][j][k]
inline Tensor3 trace_contract(const Mat& a, const Tensor3& e) {
  require(a.cols == e.d0, "trace_contract: leading-dim mismatch");
  Tensor3 out(a.rows, e.d1, e.d2);
  const std::size_t inner = e.d1 * e.d2;
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ai = a.row(i);
    double* oi = out.slab(i);
    for (std::size_t v = 0; v < e.d0; ++v) {
      const double aiv = ai[v];
      const double* ev = e.slab(v);
      for (std::size_t j = 0; j < inner; ++j) oi[j] += aiv * ev[j];
    }
  }
  return out;
}

// row-vector case: out[j][k] = sum_v row[v] e[v][j][k]
inline Mat trace_contract(const Vec& row, const Tensor3& e) {
  require(row.size() == e.d0, "trace_contract: leading-dim mismatch");
  Mat out(e.d1, e.d2);
  for (std::size_t v = 0; v < e.d0; ++v) {
    const double rv = row[v];
    const double* ev = e.slab(v);
    for (std::size_t j = 0; j < out.d.size(); ++j) out.d[j] += rv * ev[j];
  }
  return out;
}

inline bool all_finite(const Vec& v) {
  for (double x : v.d)
    if (!std::isfinite(x)) return false;
  return true;
}

inline bool all_finite(const Mat& m) {
  for (double x : m.d)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace bpl
