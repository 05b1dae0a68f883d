#pragma once

// Small row-major dense matrix and vector helpers, templated on the scalar so
// the same model code runs on double and on Dual<...>.

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "crag/core.hpp"
#include "crag/dual.hpp"

namespace crag {

template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T(0.0)) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::size_t size() const { return data.size(); }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1.0);
    return m;
  }

  template <typename S>
  Matrix<S> cast() const {
    Matrix<S> out;
    out.rows = rows;
    out.cols = cols;
    out.data.reserve(data.size());
    for (const T& x : data) out.data.push_back(S(x));
    return out;
  }

  bool operator==(const Matrix&) const = default;
};

template <typename T>
Matrix<double> values_of(const Matrix<T>& m) {
  Matrix<double> out(m.rows, m.cols);
  for (std::size_t i = 0; i < m.size(); ++i) out.data[i] = value_of(m.data[i]);
  return out;
}

/// Gaussian-initialized matrix with standard deviation `scale`.
inline Matrix<double> random_matrix(std::size_t rows, std::size_t cols, double scale,
                                    std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix<double> m(rows, cols);
  for (double& x : m.data) x = normal(rng);
  return m;
}

template <typename T, typename V>
std::vector<T> matvec(const Matrix<T>& m, const std::vector<V>& x) {
  require(m.cols == x.size(), ErrorCode::DimensionMismatch,
          "matvec: " + std::to_string(m.cols) + " columns vs vector of " +
              std::to_string(x.size()));
  std::vector<T> out(m.rows, T(0.0));
  for (std::size_t r = 0; r < m.rows; ++r) {
    T acc(0.0);
    for (std::size_t c = 0; c < m.cols; ++c) acc = acc + m(r, c) * x[c];
    out[r] = acc;
  }
  return out;
}

template <typename A, typename B>
auto dot(const std::vector<A>& a, const std::vector<B>& b) {
  require(a.size() == b.size(), ErrorCode::DimensionMismatch, "dot: size mismatch");
  using R = decltype(a[0] * b[0]);
  R acc(0.0);
  for (std::size_t i = 0; i < a.size(); ++i) acc = acc + a[i] * b[i];
  return acc;
}

inline double norm2(const Vec& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline Vec normalized(Vec v) {
  const double n = norm2(v);
  require(n > 0.0, ErrorCode::InvalidArgument, "cannot normalize a zero vector");
  for (double& x : v) x /= n;
  return v;
}

inline double cosine(const Vec& a, const Vec& b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

inline bool all_finite(const Vec& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

/// Softmax of values / temperature, shifted by the max for stability.
template <typename S>
std::vector<S> softmax(const std::vector<S>& values, double temperature = 1.0) {
  std::vector<S> out;
  if (values.empty()) return out;
  double shift = value_of(values[0]);
  for (const S& v : values) shift = std::max(shift, value_of(v));
  using std::exp;
  S total(0.0);
  out.reserve(values.size());
  for (const S& v : values) {
    S e = exp((v - S(shift)) / S(temperature));
    total = total + e;
    out.push_back(e);
  }
  for (S& e : out) e = e / total;
  return out;
}

}  // namespace crag
