#include <cmath>

#include <gtest/gtest.h>

#include "crag/dual.hpp"
#include "crag/tensor.hpp"

using crag::Dual;
using D = Dual<double>;
using DD = Dual<D>;

TEST(Dual, ProductAndQuotientRules) {
  const D x = D::variable(3.0, 0, 2);
  const D y = D::variable(2.0, 1, 2);
  const D f = x * y + x / y;
  EXPECT_DOUBLE_EQ(f.value(), 7.5);
  EXPECT_DOUBLE_EQ(f.partial(0), 2.0 + 0.5);
  EXPECT_DOUBLE_EQ(f.partial(1), 3.0 - 3.0 / 4.0);
}

TEST(Dual, ElementaryFunctionsMatchFiniteDifferences) {
  auto f = [](auto x) {
    using std::exp;
    using std::log;
    using std::sqrt;
    using std::tanh;
    return exp(x) * tanh(x) + log(x + 2.0) * sqrt(x + 1.0);
  };
  const double x0 = 0.37;
  const double h = 1e-6;
  const double fd = (f(x0 + h) - f(x0 - h)) / (2 * h);
  EXPECT_NEAR(f(D::variable(x0, 0, 1)).partial(0), fd, 1e-7);
}

TEST(Dual, ConstantsCarryNoGradient) {
  const D c(4.0);
  EXPECT_TRUE(c.is_constant());
  EXPECT_DOUBLE_EQ((c * c).partial(0), 0.0);
}

TEST(Dual, NestedGivesSecondDerivative) {
  // f(x) = x^3, f'' = 6x.
  const DD x(D::variable(2.0, 0, 1), {D(1.0)});
  const DD f = x * x * x;
  EXPECT_DOUBLE_EQ(f.value().value(), 8.0);
  EXPECT_DOUBLE_EQ(f.partial(0).value(), 12.0);
  EXPECT_DOUBLE_EQ(f.partial(0).partial(0), 12.0);
}

TEST(Dual, SoftmaxGradientSumsToZero) {
  std::vector<D> z{D::variable(2.0, 0, 2), D::variable(1.0, 1, 2)};
  const auto p = crag::softmax(z);
  EXPECT_NEAR(p[0].value(), 0.7310585786, 1e-9);
  EXPECT_NEAR(p[0].partial(0) + p[1].partial(0), 0.0, 1e-12);
}
