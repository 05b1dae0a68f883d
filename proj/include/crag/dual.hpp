#pragma once

// Forward-mode automatic differentiation.
//
// Dual<T> carries a value and a dense gradient with respect to a fixed set of
// seeded directions. An empty gradient means "constant", which keeps the
// common case (data, frozen parameters) allocation free. Nesting Dual<Dual<T>>
// gives higher-order derivatives, which is what unrolled hypergradients need:
// the inner gradient step is differentiated with respect to the outer seeds.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <type_traits>
#include <utility>
#include <vector>

namespace crag {

template <typename T>
class Dual;

template <typename T>
struct is_dual : std::false_type {};
template <typename T>
struct is_dual<Dual<T>> : std::true_type {};

template <typename T>
inline constexpr bool is_dual_v = is_dual<T>::value;

inline double value_of(double x) { return x; }

template <typename T>
double value_of(const Dual<T>& x) {
  return value_of(x.value());
}

template <typename T>
class Dual {
 public:
  using value_type = T;

  Dual() : value_(0.0) {}
  Dual(T value) : value_(std::move(value)) {}  // NOLINT: implicit lift of constants
  template <typename U>
    requires(std::is_arithmetic_v<U> && !std::is_same_v<U, T>)
  Dual(U value) : value_(static_cast<double>(value)) {}  // NOLINT
  Dual(T value, std::vector<T> grad) : value_(std::move(value)), grad_(std::move(grad)) {}

  /// Seeds direction `index` of `n` with unit derivative.
  static Dual variable(T value, std::size_t index, std::size_t n) {
    std::vector<T> g(n, T(0.0));
    g[index] = T(1.0);
    return Dual(std::move(value), std::move(g));
  }

  const T& value() const { return value_; }
  const std::vector<T>& grad() const { return grad_; }
  bool is_constant() const { return grad_.empty(); }

  T partial(std::size_t i) const { return i < grad_.size() ? grad_[i] : T(0.0); }

  Dual& operator+=(const Dual& o) { return *this = *this + o; }
  Dual& operator-=(const Dual& o) { return *this = *this - o; }
  Dual& operator*=(const Dual& o) { return *this = *this * o; }
  Dual& operator/=(const Dual& o) { return *this = *this / o; }

  friend Dual operator+(const Dual& a, const Dual& b) {
    return Dual(a.value_ + b.value_, combine(T(1.0), a.grad_, T(1.0), b.grad_));
  }
  friend Dual operator-(const Dual& a, const Dual& b) {
    return Dual(a.value_ - b.value_, combine(T(1.0), a.grad_, T(-1.0), b.grad_));
  }
  friend Dual operator-(const Dual& a) { return Dual(-a.value_, scale(T(-1.0), a.grad_)); }
  friend Dual operator*(const Dual& a, const Dual& b) {
    return Dual(a.value_ * b.value_, combine(b.value_, a.grad_, a.value_, b.grad_));
  }
  friend Dual operator/(const Dual& a, const Dual& b) {
    T inv = T(1.0) / b.value_;
    T q = a.value_ * inv;
    return Dual(q, combine(inv, a.grad_, -q * inv, b.grad_));
  }

  friend bool operator<(const Dual& a, const Dual& b) { return value_of(a) < value_of(b); }
  friend bool operator>(const Dual& a, const Dual& b) { return value_of(a) > value_of(b); }
  friend bool operator<=(const Dual& a, const Dual& b) { return value_of(a) <= value_of(b); }
  friend bool operator>=(const Dual& a, const Dual& b) { return value_of(a) >= value_of(b); }

  friend Dual exp(const Dual& a) {
    using std::exp;
    T e = exp(a.value_);
    return Dual(e, scale(e, a.grad_));
  }
  friend Dual log(const Dual& a) {
    using std::log;
    return Dual(log(a.value_), scale(T(1.0) / a.value_, a.grad_));
  }
  friend Dual tanh(const Dual& a) {
    using std::tanh;
    T t = tanh(a.value_);
    return Dual(t, scale(T(1.0) - t * t, a.grad_));
  }
  friend Dual sqrt(const Dual& a) {
    using std::sqrt;
    T s = sqrt(a.value_);
    return Dual(s, scale(T(0.5) / s, a.grad_));
  }

 private:
  static std::vector<T> scale(const T& c, const std::vector<T>& g) {
    std::vector<T> out;
    out.reserve(g.size());
    for (const T& x : g) out.push_back(c * x);
    return out;
  }

  static std::vector<T> combine(const T& ca, const std::vector<T>& ga, const T& cb,
                                const std::vector<T>& gb) {
    if (ga.empty()) return scale(cb, gb);
    if (gb.empty()) return scale(ca, ga);
    const std::size_t n = std::max(ga.size(), gb.size());
    std::vector<T> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (i < ga.size() && i < gb.size()) {
        out.push_back(ca * ga[i] + cb * gb[i]);
      } else if (i < ga.size()) {
        out.push_back(ca * ga[i]);
      } else {
        out.push_back(cb * gb[i]);
      }
    }
    return out;
  }

  T value_;
  std::vector<T> grad_;
};

/// Strips one level of differentiation.
template <typename T>
const T& strip(const Dual<T>& x) {
  return x.value();
}

/// Converts a double (or lower-order dual) into scalar type S as a constant.
template <typename S>
S lift(double x) {
  return S(x);
}

}  // namespace crag
