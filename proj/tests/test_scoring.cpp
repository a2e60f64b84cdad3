#include "bpds/scoring.hpp"

#include "doctest.h"

#include <cmath>

using namespace bpds;
using namespace bpds::scoring;

TEST_CASE("bandwidth spot values, linearity in d and monotonicity in eps") {
  CHECK(std::abs(bandwidth(2.0, 0.4) - 2.0 / std::sqrt(-2.0 * std::log(0.4))) < 1e-12);
  CHECK(bandwidth(2.0, 0.4) == doctest::Approx(1.4774).epsilon(1e-4));
  CHECK(bandwidth(1.0, 0.4) == doctest::Approx(0.7387).epsilon(1e-4));
  CHECK(std::abs(bandwidth(1.0, 0.4) - 0.5 * bandwidth(2.0, 0.4)) < 1e-15);
  double prev = 0.0;
  for (const double eps : {0.1, 0.4, 0.7, 0.9, 0.99, 0.999999}) {
    const double z = bandwidth(2.0, eps);
    CHECK(z > prev);
    prev = z;
  }
  CHECK(prev > 1000.0);
  CHECK_THROWS_AS(bandwidth(2.0, 1.0), DomainError);
  CHECK_THROWS_AS(bandwidth(2.0, 0.0), DomainError);
  CHECK_THROWS_AS(bandwidth(0.0, 0.4), DomainError);
}

TEST_CASE("utility at targets is the global maximum of zero") {
  UtilitySpec u;
  u.x_prev = 3.0;
  const Vector y = Vector::Constant(8, u.y_star);
  const Vector g = Vector::Constant(8, u.g_star);
  CHECK(utility(y, g, Vector::Constant(8, 3.0), u) == 0.0);
  CHECK(utility(y, g, Vector::Constant(8, 3.1), u) < 0.0);
}

TEST_CASE("single-horizon utility by hand") {
  UtilitySpec u;
  u.k = 1;
  u.theta = 0.5;
  u.x_prev = 1.0;
  CHECK(utility(Vector::Constant(1, 4.0), Vector::Constant(1, 2.5), Vector::Constant(1, 1.0), u) == doctest::Approx(-2.0));
  // Rate change of 0.5 adds 0.25 of smoothing loss.
  CHECK(utility(Vector::Constant(1, 4.0), Vector::Constant(1, 2.5), Vector::Constant(1, 1.5), u) == doctest::Approx(-2.25));
}

TEST_CASE("utility is invariant to permuting horizons when x is constant") {
  UtilitySpec u;
  u.k = 3;
  u.x_prev = 2.0;
  Vector y(3), g(3);
  y << 1.0, 2.5, 4.0;
  g << 3.0, 0.5, 2.0;
  Vector yp(3), gp(3);
  yp << 4.0, 1.0, 2.5;
  gp << 2.0, 3.0, 0.5;
  const Vector flat = Vector::Constant(3, 2.0);
  CHECK(utility(y, g, flat, u) == doctest::Approx(utility(yp, gp, flat, u)).epsilon(1e-15));
  Vector x(3), xp(3);
  x << 2.0, 3.0, 3.5;
  xp << 3.5, 2.0, 3.0;
  CHECK(utility(y, g, x, u) != doctest::Approx(utility(yp, gp, xp, u)));
}

TEST_CASE("score entries attain 2 at the targets with a flat path") {
  ScoreSpec s;
  s.x_prev = 1.0;
  const Vector sv = score_vector(Vector::Constant(8, s.y_star), Vector::Constant(8, s.g_star), Vector::Constant(8, 1.0), s);
  REQUIRE(sv.size() == 16);
  CHECK((sv.array() - 2.0).abs().maxCoeff() < 1e-15);
}

TEST_CASE("score entry at the reference deviation equals eps plus one") {
  ScoreSpec s;
  s.x_prev = 0.0;
  s.k = 1;
  const Vector flat = Vector::Zero(1);
  const Vector sv = score_vector(Vector::Constant(1, s.y_star + s.d_y), Vector::Constant(1, s.g_star + s.d_g), flat, s);
  CHECK(std::abs(sv(0) - 1.4) < 1e-12);
  CHECK(std::abs(sv(1) - 1.4) < 1e-12);
  const Vector below = score_vector(Vector::Constant(1, s.y_star - s.d_y), Vector::Constant(1, s.g_star), flat, s);
  CHECK(std::abs(below(0) - 1.4) < 1e-12);
  // Rate change of d_x on its own scores eps in the smoothing kernel.
  const Vector moved = score_vector(Vector::Constant(1, s.y_star), Vector::Constant(1, s.g_star), Vector::Constant(1, s.d_x), s);
  CHECK(std::abs(moved(0) - 1.4) < 1e-12);
}

TEST_CASE("score entries stay positive and vanish far from the targets") {
  ScoreSpec s;
  s.k = 2;
  Vector x(2);
  x << 50.0, 0.0;
  const Vector sv = score_vector(Vector::Constant(2, 1e3), Vector::Constant(2, -1e3), x, s);
  for (Eigen::Index i = 0; i < sv.size(); ++i) CHECK(sv(i) >= 0.0);
  CHECK(sv.maxCoeff() < 1e-100);
}

TEST_CASE("row-wise scores and utilities match the single-path versions") {
  ScoreSpec s;
  s.k = 3;
  s.x_prev = 1.0;
  UtilitySpec u;
  u.k = 3;
  u.x_prev = 1.0;
  RowMatrix draws(2, 9);
  draws << 1.0, 2.0, 3.0, 2.5, 2.0, 1.0, 9, 9, 9,
           0.0, 4.0, 2.0, 3.5, 1.0, 2.5, 9, 9, 9;
  Vector x(3);
  x << 1.5, 2.0, 2.0;
  const RowMatrix sm = score_matrix(draws, x, s);
  const Vector um = utilities(draws, x, u);
  for (int r = 0; r < 2; ++r) {
    const Vector y = draws.row(r).segment(0, 3).transpose();
    const Vector g = draws.row(r).segment(3, 3).transpose();
    CHECK((sm.row(r).transpose() - score_vector(y, g, x, s)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(um(r) == doctest::Approx(utility(y, g, x, u)).epsilon(1e-15));
  }
}
