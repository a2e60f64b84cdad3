#include "bpds/scoring.hpp"

#include <cmath>

namespace bpds::scoring {

namespace {

void check_length(const Vector& v, int k, const char* what) {
  if (v.size() != k) throw DomainError(std::string(what) + " must have " + std::to_string(k) + " entries");
}

Vector rate_changes(const Vector& x, double x_prev) {
  Vector dx(x.size());
  double prev = x_prev;
  for (Eigen::Index h = 0; h < x.size(); ++h) {
    dx(h) = x(h) - prev;
    prev = x(h);
  }
  return dx;
}

}  // namespace

double bandwidth(double d, double eps) {
  if (!(eps > 0.0 && eps < 1.0)) throw DomainError("score level eps must lie in (0, 1)");
  if (!(d > 0.0)) throw DomainError("reference deviation must be positive");
  return d / std::sqrt(-2.0 * std::log(eps));
}

void UtilitySpec::validate() const {
  if (!(theta >= 0.0 && theta <= 1.0)) throw ConfigError("theta must lie in [0, 1]");
  if (k < 1) throw ConfigError("k must be >= 1");
}

void ScoreSpec::validate() const {
  if (k < 1) throw ConfigError("k must be >= 1");
  try {
    (void)z_y();
    (void)z_g();
    (void)z_x();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
}

double utility(const Vector& y, const Vector& g, const Vector& x, const UtilitySpec& spec) {
  check_length(y, spec.k, "inflation path");
  check_length(g, spec.k, "growth path");
  check_length(x, spec.k, "policy path");
  const Vector dx = rate_changes(x, spec.x_prev);
  return -(spec.theta * (y.array() - spec.y_star).square().sum() +
           (1.0 - spec.theta) * (g.array() - spec.g_star).square().sum() + dx.squaredNorm());
}

Vector score_vector(const Vector& y, const Vector& g, const Vector& x, const ScoreSpec& spec) {
  check_length(y, spec.k, "inflation path");
  check_length(g, spec.k, "growth path");
  check_length(x, spec.k, "policy path");
  const double zy = spec.z_y();
  const double zg = spec.z_g();
  const double zx = spec.z_x();
  const Vector dx = rate_changes(x, spec.x_prev);
  Vector s(2 * spec.k);
  for (int h = 0; h < spec.k; ++h) {
    const double smooth = std::exp(-dx(h) * dx(h) / (2.0 * zx * zx));
    const double ey = y(h) - spec.y_star;
    const double eg = g(h) - spec.g_star;
    s(2 * h) = std::exp(-ey * ey / (2.0 * zy * zy)) + smooth;
    s(2 * h + 1) = std::exp(-eg * eg / (2.0 * zg * zg)) + smooth;
  }
  return s;
}

Vector utilities(const RowMatrix& draws, const Vector& x, const UtilitySpec& spec) {
  const int k = spec.k;
  if (draws.cols() != 3 * k) throw DomainError("sample must have 3k columns");
  check_length(x, k, "policy path");
  const double smooth = rate_changes(x, spec.x_prev).squaredNorm();
  const auto y = draws.leftCols(k).array() - spec.y_star;
  const auto g = draws.middleCols(k, k).array() - spec.g_star;
  return -(spec.theta * y.square().rowwise().sum() + (1.0 - spec.theta) * g.square().rowwise().sum() + smooth).matrix();
}

RowMatrix score_matrix(const RowMatrix& draws, const Vector& x, const ScoreSpec& spec) {
  const int k = spec.k;
  if (draws.cols() != 3 * k) throw DomainError("sample must have 3k columns");
  check_length(x, k, "policy path");
  const double cy = -1.0 / (2.0 * spec.z_y() * spec.z_y());
  const double cg = -1.0 / (2.0 * spec.z_g() * spec.z_g());
  const double zx = spec.z_x();
  const Vector dx = rate_changes(x, spec.x_prev);
  RowMatrix s(draws.rows(), 2 * k);
  for (int h = 0; h < k; ++h) {
    const double smooth = std::exp(-dx(h) * dx(h) / (2.0 * zx * zx));
    s.col(2 * h) = ((draws.col(h).array() - spec.y_star).square() * cy).exp() + smooth;
    s.col(2 * h + 1) = ((draws.col(k + h).array() - spec.g_star).square() * cg).exp() + smooth;
  }
  return s;
}

}  // namespace bpds::scoring
