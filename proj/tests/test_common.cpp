#include "bpds/common.hpp"

#include "doctest.h"

#include <atomic>
#include <cmath>
#include <limits>
#include <vector>

using namespace bpds;

TEST_CASE("derive_seed depends on every key and on nothing else") {
  const auto a = derive_seed(1, {2, 3});
  CHECK(a == derive_seed(1, {2, 3}));
  CHECK(a != derive_seed(1, {3, 2}));
  CHECK(a != derive_seed(2, {2, 3}));
  CHECK(derive_seed(1, {2}) != derive_seed(1, {2, 0}));
}

TEST_CASE("compensated sum recovers small addends lost by naive summation") {
  CompensatedSum s;
  s.add(1.0);
  for (int i = 0; i < 1000; ++i) s.add(1e-16);
  s.add(-1.0);
  CHECK(s.value() == doctest::Approx(1e-13).epsilon(1e-6));
}

TEST_CASE("log_sum_exp matches direct evaluation and handles extremes") {
  const std::vector<double> v{0.1, -2.0, 1.5};
  CHECK(log_sum_exp(v) == doctest::Approx(std::log(std::exp(0.1) + std::exp(-2.0) + std::exp(1.5))).epsilon(1e-14));
  const std::vector<double> big{1000.0, 1000.0};
  CHECK(log_sum_exp(big) == doctest::Approx(1000.0 + std::log(2.0)));
  const std::vector<double> none{-std::numeric_limits<double>::infinity()};
  CHECK(std::isinf(log_sum_exp(none)));
  CHECK(log_sum_exp(std::vector<double>{}) < 0);
}

TEST_CASE("normalize_log_weights sums to one and floors underflow") {
  Vector lw(3);
  lw << 0.0, -800.0, std::log(3.0);
  const Vector w = normalize_log_weights(lw);
  CHECK(w.sum() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(w(2) / w(0) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(w(1) > 0.0);
  CHECK(w(1) < 1e-299);
}

TEST_CASE("floored_factor reproduces a positive definite matrix and repairs a singular one") {
  Matrix s(2, 2);
  s << 4.0, 1.0, 1.0, 3.0;
  const Matrix l = floored_factor(s);
  CHECK((l * l.transpose() - s).cwiseAbs().maxCoeff() < 1e-12);
  Matrix sing(2, 2);
  sing << 1.0, 1.0, 1.0, 1.0;
  const Matrix ls = floored_factor(sing, 1e-8);
  CHECK(ls.allFinite());
  CHECK((ls * ls.transpose() - sing).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("parallel_for visits each index exactly once") {
  std::vector<std::atomic<int>> hits(257);
  parallel_for(hits.size(), [&](std::size_t i) { hits[i]++; });
  for (const auto& h : hits) CHECK(h.load() == 1);
}

TEST_CASE("format_double round-trips") {
  for (const double v : {0.1, 1.0 / 3.0, -2.5e-300, 12345.678901234567}) {
    CHECK(std::stod(format_double(v)) == v);
  }
}
