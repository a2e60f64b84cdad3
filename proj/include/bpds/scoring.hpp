#pragma once

#include "bpds/common.hpp"

namespace bpds::scoring {

/// z = d / sqrt(-2 ln eps): an outcome at distance d from target scores eps.
double bandwidth(double d, double eps);

struct UtilitySpec {
  double theta = 0.5;
  double y_star = 2.0;
  double g_star = 2.5;
  int k = 8;
  double x_prev = 0.0;

  void validate() const;
};

struct ScoreSpec {
  double eps = 0.4;
  double d_y = 2.0;
  double d_g = 2.0;
  double d_x = 1.0;
  double y_star = 2.0;
  double g_star = 2.5;
  int k = 8;
  double x_prev = 0.0;

  [[nodiscard]] double z_y() const { return bandwidth(d_y, eps); }
  [[nodiscard]] double z_g() const { return bandwidth(d_g, eps); }
  [[nodiscard]] double z_x() const { return bandwidth(d_x, eps); }
  void validate() const;
};

/// -sum_h [theta (y_h - y*)^2 + (1 - theta)(g_h - g*)^2 + (x_h - x_{h-1})^2], x_0 = x_prev.
double utility(const Vector& y, const Vector& g, const Vector& x, const UtilitySpec& spec);

/// 2k entries (y_1, g_1, ..., y_k, g_k); each is a target-proximity kernel plus
/// the shared rate-smoothness kernel for that horizon, so entries lie in (0, 2].
Vector score_vector(const Vector& y, const Vector& g, const Vector& x, const ScoreSpec& spec);

/// Row-wise versions over a sample whose columns are inflation 1..k, growth 1..k,
/// rate 1..k. The decision x enters every row.
Vector utilities(const RowMatrix& draws, const Vector& x, const UtilitySpec& spec);
RowMatrix score_matrix(const RowMatrix& draws, const Vector& x, const ScoreSpec& spec);

}  // namespace bpds::scoring
