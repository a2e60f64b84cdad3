#include "bpds/decision.hpp"

#include "doctest.h"

#include <cmath>
#include <map>
#include <numbers>

using namespace bpds;
using namespace bpds::decision;

namespace {

using BankPtr = std::shared_ptr<const forecast::ConditionalPathBank>;

/// Bank whose draws are affine in x: rows of `base` plus gains that are the same for every draw.
BankPtr affine_bank(const RowMatrix& base, const Matrix& gain, const RowMatrix& policy_means, double policy_sd) {
  const Eigen::Index n = base.rows();
  const Eigen::Index k = gain.cols();
  Matrix gains(n * base.cols(), k);
  for (Eigen::Index d = 0; d < n; ++d) gains.middleRows(d * base.cols(), base.cols()) = gain;
  std::vector<Matrix> factors(static_cast<std::size_t>(n), policy_sd * Matrix::Identity(k, k));
  return std::make_shared<forecast::ConditionalPathBank>(base, gains, policy_means, factors);
}

BankPtr random_bank(int k, Eigen::Index n, std::uint64_t seed, double shift) {
  Rng rng(seed);
  RowMatrix base(n, 3 * k);
  RowMatrix means(n, k);
  for (Eigen::Index d = 0; d < n; ++d) {
    base.row(d) = standard_normal(rng, 3 * k).transpose() * 0.8;
    base.row(d).head(k).array() += 2.0 + shift;
    base.row(d).segment(k, k).array() += 2.5 - shift;
    means.row(d) = (standard_normal(rng, k).array() * 0.5 + 1.0 + shift).matrix().transpose();
  }
  Matrix gain = Matrix::Zero(3 * k, k);
  for (int h = 0; h < k; ++h) {
    for (int l = 0; l <= h; ++l) {
      gain(h, l) = -0.15 - 0.05 * shift;
      gain(k + h, l) = -0.1;
    }
    gain(2 * k + h, h) = 1.0;
  }
  return affine_bank(base, gain, means, 0.7);
}

QuarterState random_state(int k, int models, Eigen::Index n) {
  QuarterState st;
  for (int j = 0; j < models; ++j) st.banks.push_back(random_bank(k, n, 100 + j, 0.4 * j));
  st.prior = Vector::Constant(models, 1.0 / models);
  st.utility.k = k;
  st.utility.x_prev = 1.0;
  st.score.k = k;
  st.score.x_prev = 1.0;
  for (int j = 0; j < models; ++j) st.model_decisions.push_back(Vector::Constant(k, 1.0 + 0.2 * j));
  st.baseline_innov = synthesis::baseline_innovations(n, 3 * k, st.baseline_df, 9);
  set_baseline_policy_density(st, st.baseline_inflate);
  return st;
}

}  // namespace

TEST_CASE("a predictive sitting on the targets gives a flat optimum with zero utility") {
  const int k = 3;
  RowMatrix base(4, 3 * k);
  base.leftCols(k).setConstant(2.0);
  base.middleCols(k, k).setConstant(2.5);
  base.rightCols(k).setZero();
  const auto bank = affine_bank(base, Matrix::Zero(3 * k, k), RowMatrix::Zero(4, k), 1.0);
  scoring::UtilitySpec u;
  u.k = k;
  u.x_prev = 0.75;
  Vector start(k);
  start << 2.0, -1.0, 3.0;
  const auto res = model_optimal_path(*bank, u, optimize::Bounds::box(k, -10.0, 15.0), 200, start);
  CHECK((res.x.array() - 0.75).abs().maxCoeff() < 1e-4);
  CHECK(res.report.best_value > -1e-7);
  CHECK(res.report.best_value <= 0.0);
  CHECK_THROWS_AS(model_optimal_path(*bank, u, optimize::Bounds::box(k, -10.0, 15.0), 49), ConfigError);
}

TEST_CASE("scalar quadratic surrogate matches the closed-form optimum") {
  // y = a + b x + e, g = g*: E[U] = -theta E[(a + b x + e - y*)^2] - (x - x_prev)^2.
  const double a = 3.0;
  const double b = -0.8;
  scoring::UtilitySpec u;
  u.k = 1;
  u.x_prev = 0.5;
  const Eigen::Index n = 20000;
  Rng rng(4);
  RowMatrix base(n, 3);
  for (Eigen::Index d = 0; d < n; ++d) base.row(d) << a + standard_normal(rng, 1)(0), u.g_star, 0.0;
  Matrix gain(3, 1);
  gain << b, 0.0, 1.0;
  const auto bank = affine_bank(base, gain, RowMatrix::Zero(n, 1), 1.0);
  const auto res = model_optimal_path(*bank, u, optimize::Bounds::box(1, -10.0, 15.0), 100);
  const double population = (u.theta * b * (u.y_star - a) + u.x_prev) / (u.theta * b * b + 1.0);
  const double ebar = base.col(0).mean() - a;
  const double sample = (u.theta * b * (u.y_star - a - ebar) + u.x_prev) / (u.theta * b * b + 1.0);
  CHECK(std::abs(res.x(0) - population) < 1e-2);
  CHECK(std::abs(res.x(0) - sample) < 1e-5);
}

TEST_CASE("doubling the budget never lowers the achieved utility") {
  const auto st = random_state(4, 1, 400);
  const auto bounds = optimize::Bounds::box(4, -10.0, 15.0);
  for (const int budget : {50, 80, 120}) {
    const auto lo = model_optimal_path(*st.banks[0], st.utility, bounds, budget);
    const auto hi = model_optimal_path(*st.banks[0], st.utility, bounds, 2 * budget);
    CHECK(hi.report.best_value >= lo.report.best_value);
  }
}

TEST_CASE("without tilt and with equal probabilities the objective is the equal-weight model average") {
  auto st = random_state(3, 2, 300);
  st.features = {false, false, false};
  Vector x(3);
  x << 0.5, 1.5, 2.0;
  const double avg = 0.5 * (model_expected_utility(*st.banks[0], x, st.utility) + model_expected_utility(*st.banks[1], x, st.utility));
  const auto ev = evaluate_bpds(st, x);
  CHECK(ev.expected_utility == doctest::Approx(avg).epsilon(1e-12));
  CHECK(ev.initial_utility == ev.expected_utility);
  CHECK(ev.mixture.ess == 1.0);
}

TEST_CASE("a single model without tilt reproduces its own expected utility") {
  auto st = random_state(3, 1, 300);
  st.features.tilt = false;
  st.pi0 = 0.0;
  const Vector x = Vector::Constant(3, 0.2);
  CHECK(evaluate_bpds(st, x).expected_utility == doctest::Approx(model_expected_utility(*st.banks[0], x, st.utility)).epsilon(1e-13));
}

TEST_CASE("tilted expected utility matches exhaustive enumeration") {
  // k = 1, two models with three and two distinct outcomes; replicated draws.
  const int k = 1;
  const std::vector<std::vector<std::pair<Eigen::RowVector3d, int>>> outcomes{
      {{Eigen::RowVector3d(1.2, 2.0, 0.0), 2}, {Eigen::RowVector3d(2.6, 3.1, 0.0), 1}, {Eigen::RowVector3d(3.5, 1.4, 0.0), 1}},
      {{Eigen::RowVector3d(0.4, 2.9, 0.0), 3}, {Eigen::RowVector3d(2.2, 2.2, 0.0), 1}}};
  const std::vector<double> policy_mean{0.8, 1.6};
  QuarterState st;
  Matrix gain(3, 1);
  gain << -0.3, 0.1, 1.0;
  for (std::size_t j = 0; j < outcomes.size(); ++j) {
    int n = 0;
    for (const auto& o : outcomes[j]) n += o.second;
    RowMatrix base(n, 3);
    int r = 0;
    for (const auto& o : outcomes[j]) {
      for (int c = 0; c < o.second; ++c) base.row(r++) = o.first;
    }
    st.banks.push_back(affine_bank(base, gain, RowMatrix::Constant(n, 1, policy_mean[j]), 0.9));
  }
  st.prior = Vector(2);
  st.prior << 0.3, 0.7;
  st.pi0 = 0.0;
  st.utility.k = k;
  st.utility.x_prev = 1.0;
  st.score.k = k;
  st.score.x_prev = 1.0;
  st.model_decisions = {Vector::Constant(1, 0.9), Vector::Constant(1, 1.3)};
  st.tilt.tol = 1e-13;
  const Vector x = Vector::Constant(1, 1.1);
  const auto ev = evaluate_bpds(st, x);
  REQUIRE(ev.tilt.converged);
  REQUIRE_FALSE(ev.tilt_fallback);

  // Enumerated joint over (model, outcome), with decision-conditioned model weights.
  struct Atom {
    int model;
    double p;
    Vector s;
    double u;
  };
  std::vector<Atom> atoms;
  Vector pix(2);
  for (int j = 0; j < 2; ++j) {
    const double z = (x(0) - policy_mean[static_cast<std::size_t>(j)]) / 0.9;
    pix(j) = st.prior(j) * std::exp(-0.5 * z * z) / (0.9 * std::sqrt(2.0 * std::numbers::pi));
  }
  pix /= pix.sum();
  for (int j = 0; j < 2; ++j) {
    int n = 0;
    for (const auto& o : outcomes[static_cast<std::size_t>(j)]) n += o.second;
    for (const auto& o : outcomes[static_cast<std::size_t>(j)]) {
      const double y = o.first(0) + gain(0, 0) * x(0);
      const double g = o.first(1) + gain(1, 0) * x(0);
      const double xm = st.model_decisions[static_cast<std::size_t>(j)](0);
      const double zy = 2.0 / std::sqrt(-2.0 * std::log(0.4));
      const double zx = 1.0 / std::sqrt(-2.0 * std::log(0.4));
      const double smooth = std::exp(-std::pow(xm - 1.0, 2) / (2.0 * zx * zx));
      Vector s(2);
      s << std::exp(-std::pow(y - 2.0, 2) / (2.0 * zy * zy)) + smooth, std::exp(-std::pow(g - 2.5, 2) / (2.0 * zy * zy)) + smooth;
      const double u = -(0.5 * std::pow(y - 2.0, 2) + 0.5 * std::pow(g - 2.5, 2) + std::pow(x(0) - 1.0, 2));
      atoms.push_back({j, pix(j) * o.second / n, s, u});
    }
  }
  // Newton on the dual for E_tilted[s] = m_f.
  const Vector m_f = ev.target.m_f;
  Vector tau = Vector::Zero(2);
  std::vector<double> q(atoms.size());
  for (int it = 0; it < 100; ++it) {
    double z = 0.0;
    for (std::size_t i = 0; i < atoms.size(); ++i) z += q[i] = atoms[i].p * std::exp(tau.dot(atoms[i].s));
    Vector mean = Vector::Zero(2);
    for (std::size_t i = 0; i < atoms.size(); ++i) mean += q[i] / z * atoms[i].s;
    Matrix cov = Matrix::Zero(2, 2);
    for (std::size_t i = 0; i < atoms.size(); ++i) cov += q[i] / z * (atoms[i].s - mean) * (atoms[i].s - mean).transpose();
    if ((mean - m_f).norm() < 1e-15) break;
    tau -= cov.ldlt().solve(mean - m_f);
  }
  double z = 0.0;
  for (std::size_t i = 0; i < atoms.size(); ++i) z += q[i] = atoms[i].p * std::exp(tau.dot(atoms[i].s));
  double eu = 0.0;
  Vector model_prob = Vector::Zero(3);
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    eu += q[i] / z * atoms[i].u;
    model_prob(atoms[i].model + 1) += q[i] / z;
  }
  CHECK(std::abs(ev.expected_utility - eu) < 1e-10);
  CHECK((ev.pi_tilde.weights - model_prob).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((ev.pi_x.weights.tail(2) - pix).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("a full evaluation is deterministic and carries valid weights") {
  const auto st = random_state(4, 2, 500);
  const Vector x = Vector::Constant(4, 1.2);
  const auto a = evaluate_bpds(st, x);
  const auto b = evaluate_bpds(st, x);
  CHECK(a.expected_utility == b.expected_utility);
  CHECK((a.pi_tilde.weights - b.pi_tilde.weights).norm() == 0.0);
  CHECK(a.pi.valid());
  CHECK(a.pi_x.valid());
  CHECK(a.pi_tilde.valid());
  CHECK(a.pi.weights(0) == doctest::Approx(st.pi0));
  CHECK(a.mixture.ess > 0.0);
  CHECK(a.mixture.ess <= 1.0 + 1e-12);
  CHECK(a.direction_gain >= -1e-9);
}

TEST_CASE("all features off reduces the BPDS objective to the BMA objective exactly") {
  auto st = random_state(3, 2, 300);
  st.prior << 0.35, 0.65;
  st.features = {false, false, false};
  Rng rng(5);
  for (int i = 0; i < 5; ++i) {
    const Vector x = (standard_normal(rng, 3).array() + 1.0).matrix();
    CHECK(bpds_expected_utility(st, x) == bma_expected_utility(st, st.prior, x));
  }
  const auto bounds = optimize::Bounds::box(3, -10.0, 15.0);
  optimize::SwarmConfig sw;
  sw.particles = 10;
  sw.iterations = 8;
  sw.local_budget = 60;
  const auto bp = bpds_optimal_path(st, bounds, sw, 17);
  const auto bm = bma_optimal_path(st, st.prior, bounds, sw, 17);
  CHECK((bp.x - bm.x).norm() == 0.0);
  CHECK(bp.report.best_value == bm.report.best_value);
}

TEST_CASE("BMA comparator: single model, equal weights and reproducibility") {
  const auto one = random_state(3, 1, 300);
  const Vector x = Vector::Constant(3, 0.4);
  CHECK(bma_expected_utility(one, Vector::Ones(1), x) == doctest::Approx(model_expected_utility(*one.banks[0], x, one.utility)).epsilon(1e-13));
  const auto bounds = optimize::Bounds::box(3, -10.0, 15.0);
  const auto model = model_optimal_path(*one.banks[0], one.utility, bounds, 300);
  optimize::SwarmConfig sw;
  sw.particles = 12;
  sw.iterations = 15;
  const auto bma = bma_optimal_path(one, Vector::Ones(1), bounds, sw, 3);
  CHECK((bma.x - model.x).cwiseAbs().maxCoeff() < 1e-3);

  const auto two = random_state(3, 2, 300);
  const double avg = 0.5 * (model_expected_utility(*two.banks[0], x, two.utility) + model_expected_utility(*two.banks[1], x, two.utility));
  CHECK(bma_expected_utility(two, Vector::Constant(2, 3.0), x) == doctest::Approx(avg).epsilon(1e-12));

  const auto r1 = bma_optimal_path(two, Vector::Constant(2, 0.5), bounds, sw, 21);
  const auto r2 = bma_optimal_path(two, Vector::Constant(2, 0.5), bounds, sw, 21);
  CHECK((r1.x - r2.x).norm() == 0.0);
  CHECK(r1.report.evaluations == r2.report.evaluations);
}

TEST_CASE("the BPDS optimum is no worse than the warm start or the flat path") {
  const auto st = random_state(3, 2, 300);
  const auto bounds = optimize::Bounds::box(3, -10.0, 15.0);
  optimize::SwarmConfig sw;
  sw.particles = 10;
  sw.iterations = 6;
  sw.local_budget = 40;
  const Vector warm = Vector::Constant(3, 2.0);
  const auto res = bpds_optimal_path(st, bounds, sw, 8, {warm});
  CHECK(res.report.best_value >= bpds_expected_utility(st, warm));
  CHECK(res.report.best_value >= bpds_expected_utility(st, Vector::Constant(3, st.utility.x_prev)));
  CHECK(res.report.best_value == bpds_expected_utility(st, res.x));
}

TEST_CASE("warm starts shift the previous path") {
  Vector prev(3);
  prev << 1.0, 2.0, 3.0;
  const Vector w = shifted_warm_start(prev, 0.5, 3);
  CHECK(w(0) == 2.0);
  CHECK(w(1) == 3.0);
  CHECK(w(2) == 3.0);
  CHECK((shifted_warm_start(std::nullopt, 0.5, 3).array() == 0.5).all());
}

TEST_CASE("quarter state validation") {
  auto st = random_state(2, 2, 50);
  CHECK_NOTHROW(st.validate());
  st.model_decisions.pop_back();
  CHECK_THROWS_AS(st.validate(), ConfigError);
  CHECK_THROWS_AS(evaluate_bpds(random_state(2, 1, 50), Vector::Zero(3)), DomainError);
}
