// Acceptance checks: one PASS/FAIL line per criterion.
#include "bpds/config.hpp"
#include "bpds/forecast.hpp"
#include "bpds/harness.hpp"
#include "bpds/optimize.hpp"
#include "bpds/scoring.hpp"
#include "bpds/synthesis.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

using namespace bpds;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream o;
  o.precision(3);
  o << v;
  return o.str();
}

/// Scores of a two-component Gaussian mixture of (inflation, growth, rate) paths.
synthesis::ScorePool gaussian_pool(int k, Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  scoring::ScoreSpec spec;
  spec.k = k;
  spec.x_prev = 1.0;
  std::vector<RowMatrix> scores;
  for (int j = 0; j < 2; ++j) {
    RowMatrix draws(n, 3 * k);
    for (Eigen::Index i = 0; i < n; ++i) {
      draws.row(i) = standard_normal(rng, 3 * k).transpose() * (1.0 + 0.5 * j);
      draws.row(i).head(k).array() += 2.0 + 0.8 * j;
      draws.row(i).segment(k, k).array() += 2.0 - 0.6 * j;
    }
    scores.push_back(scoring::score_matrix(draws, Vector::Constant(k, 1.0 + 0.3 * j), spec));
  }
  return synthesis::make_pool(scores);
}

/// Mean score under the exponential tilt exp(tau's) of the pooled base weights.
Vector tilted_mean(const synthesis::ScorePool& pool, const Vector& pi, const Vector& tau) {
  const Vector l = (pool.base_weights(pi).array().log() + (pool.scores * tau).array()).matrix();
  const Vector w = (l.array() - l.maxCoeff()).exp().matrix();
  return pool.scores.transpose() * w / w.sum();
}

Outcome tilting_constraint() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto pool = gaussian_pool(2, 5000, 1);
  Vector pi(2);
  pi << 0.4, 0.6;
  Rng rng(2);
  synthesis::TiltOptions opts;
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    // Targets produced by a random tilt are interior points of the score hull.
    const Vector m_f = tilted_mean(pool, pi, standard_normal(rng, 4) * 1.5);
    const auto tv = synthesis::solve_tilting(pool, pi, m_f, opts);
    const auto mix = synthesis::tilted_mixture(pool, pi, tv.tau);
    worst = std::max(worst, (mix.expected_score - m_f).lpNorm<Eigen::Infinity>());
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-3 && secs < 5.0, "max |E_f[s] - m_f| = " + fmt(worst) + ", " + fmt(secs) + " s"};
}

/// Equality-constrained KL projection solved in the primal with an infeasible-start
/// Newton method: minimize sum q log(q / p) subject to A q = b.
Vector kl_projection(const Vector& p, const Matrix& a, const Vector& b) {
  const Eigen::Index n = p.size();
  const Eigen::Index m = a.rows();
  Vector q = p;
  Vector nu = Vector::Zero(m);
  const auto residual = [&](const Vector& qq, const Vector& vv) {
    Vector r(n + m);
    r.head(n) = ((qq.array() / p.array()).log() + 1.0).matrix() + a.transpose() * vv;
    r.tail(m) = a * qq - b;
    return r;
  };
  for (int it = 0; it < 200; ++it) {
    const Vector r = residual(q, nu);
    if (r.norm() < 1e-15) break;
    Matrix kkt = Matrix::Zero(n + m, n + m);
    kkt.topLeftCorner(n, n) = q.cwiseInverse().asDiagonal();
    kkt.topRightCorner(n, m) = a.transpose();
    kkt.bottomLeftCorner(m, n) = a;
    const Vector step = kkt.fullPivLu().solve(-r);
    double t = 1.0;
    while (((q + t * step.head(n)).array() <= 0.0).any()) t *= 0.5;
    while (t > 1e-12 && residual(q + t * step.head(n), nu + t * step.tail(m)).norm() > (1.0 - 0.01 * t) * r.norm()) t *= 0.5;
    q += t * step.head(n);
    nu += t * step.tail(m);
  }
  return q;
}

Outcome kl_minimality() {
  const auto t0 = std::chrono::steady_clock::now();
  // 25-point grid of (inflation, growth) outcomes, k = 1; each model puts integer
  // multiplicities on the grid and is scored at its own decision.
  const int k = 1;
  scoring::ScoreSpec spec;
  spec.k = k;
  spec.x_prev = 1.0;
  const std::vector<double> x_model{0.7, 1.6};
  Rng rng(3);
  std::uniform_int_distribution<int> mult(1, 6);
  std::vector<RowMatrix> scores;
  std::vector<std::vector<int>> counts(2);
  Matrix atom_scores(2, 50);
  Vector prior(50);
  Vector pi(2);
  pi << 0.45, 0.55;
  for (int j = 0; j < 2; ++j) {
    int total = 0;
    for (int g = 0; g < 25; ++g) total += counts[static_cast<std::size_t>(j)].emplace_back(mult(rng));
    RowMatrix s(total, 2);
    int r = 0;
    for (int g = 0; g < 25; ++g) {
      const double y = 0.5 + 0.75 * (g % 5);
      const double gr = 1.0 + 0.75 * (g / 5);
      const Vector sv = scoring::score_vector(Vector::Constant(1, y), Vector::Constant(1, gr), Vector::Constant(1, x_model[static_cast<std::size_t>(j)]), spec);
      atom_scores.col(25 * j + g) = sv;
      prior(25 * j + g) = pi(j) * counts[static_cast<std::size_t>(j)][static_cast<std::size_t>(g)] / static_cast<double>(total);
      for (int c = 0; c < counts[static_cast<std::size_t>(j)][static_cast<std::size_t>(g)]; ++c) s.row(r++) = sv.transpose();
    }
    scores.push_back(s);
  }
  const auto pool = synthesis::make_pool(scores);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const Vector m_f = tilted_mean(pool, pi, standard_normal(rng, 2));
    synthesis::TiltOptions opts;
    opts.tol = 1e-12;
    const auto tv = synthesis::solve_tilting(pool, pi, m_f, opts);
    const auto mix = synthesis::tilted_mixture(pool, pi, tv.tau);
    // Aggregate the replicated rows back onto the 50 (model, grid point) atoms.
    Vector joint = Vector::Zero(50);
    for (int j = 0; j < 2; ++j) {
      Eigen::Index row = pool.offsets[static_cast<std::size_t>(j)];
      for (int g = 0; g < 25; ++g) {
        for (int c = 0; c < counts[static_cast<std::size_t>(j)][static_cast<std::size_t>(g)]; ++c) joint(25 * j + g) += mix.weights(row++);
      }
    }
    Matrix a(3, 50);
    a.row(0).setOnes();
    a.bottomRows(2) = atom_scores;
    Vector b(3);
    b << 1.0, m_f;
    const Vector q = kl_projection(prior, a, b);
    worst = std::max(worst, (joint - q).cwiseAbs().maxCoeff());
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-4 && secs < 10.0, "max probability gap " + fmt(worst) + ", " + fmt(secs) + " s"};
}

Outcome second_order_tau() {
  double worst = 0.0;
  Rng rng(4);
  for (int inst = 0; inst < 50; ++inst) {
    const auto pool = gaussian_pool(2, 4000, 100 + static_cast<std::uint64_t>(inst));
    Vector pi(2);
    pi(0) = 0.2 + 0.6 * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    pi(1) = 1.0 - pi(0);
    const auto ts = synthesis::score_moments(pool, pi);
    Vector eps = standard_normal(rng, 4);
    eps *= 0.02 / eps.norm();
    const Vector m_f = ts.m_p + ts.C_p * eps;
    synthesis::TiltOptions opts;
    opts.tol = 1e-12;
    const auto tv = synthesis::solve_tilting(pool, pi, m_f, opts);
    const Vector approx = ts.V_p.ldlt().solve(m_f - ts.m_p);
    worst = std::max(worst, (tv.tau - approx).norm() / tv.tau.norm());
  }
  return {worst <= 0.10, "max relative gap " + fmt(worst) + " over 50 instances"};
}

bvar::StructuralDraw two_variable_system() {
  bvar::StructuralDraw d;
  d.impact = Matrix(2, 2);
  d.impact << 1.2, 0.0, -0.4, 0.9;
  d.impact_inverse = d.impact.inverse();
  d.intercept = Vector(2);
  d.intercept << 0.3, -0.1;
  Matrix b(2, 2);
  b << 0.5, 0.1, 0.2, 0.4;
  d.lags = {d.impact * b};
  return d;
}

Outcome conditional_forecast() {
  const auto path = forecast::unconditional_path(forecast::build_stacked_system(two_variable_system(), Matrix::Constant(1, 2, 0.7), 2));
  // Exact constraints on the first variable at both horizons against partitioned conditioning.
  forecast::ConstraintSet cons;
  cons.R = Matrix::Zero(2, 4);
  cons.R(0, 0) = 1.0;
  cons.R(1, 2) = 1.0;
  cons.r = Vector(2);
  cons.r << 1.5, -0.25;
  cons.omega = Matrix::Zero(2, 2);
  const auto cp = forecast::condition_path(path, cons);
  const std::vector<int> c1{0, 2};
  const std::vector<int> c2{1, 3};
  Matrix m11(2, 2), m21(2, 2), m22(2, 2);
  Vector mu1(2), mu2(2);
  for (int i = 0; i < 2; ++i) {
    mu1(i) = path.mean(c1[i]);
    mu2(i) = path.mean(c2[i]);
    for (int j = 0; j < 2; ++j) {
      m11(i, j) = path.cov(c1[i], c1[j]);
      m21(i, j) = path.cov(c2[i], c1[j]);
      m22(i, j) = path.cov(c2[i], c2[j]);
    }
  }
  const Vector cmean = mu2 + m21 * m11.inverse() * (cons.r - mu1);
  const Matrix ccov = m22 - m21 * m11.inverse() * m21.transpose();
  double exact_gap = 0.0;
  for (int i = 0; i < 2; ++i) {
    exact_gap = std::max({exact_gap, std::abs(cp.mean(c1[i]) - cons.r(i)), std::abs(cp.mean(c2[i]) - cmean(i))});
    for (int j = 0; j < 2; ++j) {
      exact_gap = std::max({exact_gap, std::abs(cp.cov(c2[i], c2[j]) - ccov(i, j)), std::abs(cp.cov(c1[i], c1[j]))});
    }
  }

  // Soft constraint against accept-reject draws from p(y) N(Ry; r, Omega) / N(Ry; Rm, RMR').
  Matrix R = Matrix::Zero(1, 4);
  R(0, 2) = 1.0;
  const double mu = (R * path.mean)(0);
  const double s2 = (R * path.cov * R.transpose())(0, 0);
  const double r = mu + 0.8 * std::sqrt(s2);
  const double om = 0.5 * s2;
  const auto soft = forecast::condition_path(path, {R, Vector::Constant(1, r), Matrix::Constant(1, 1, om)});
  const auto log_ratio = [&](double u) { return -0.5 * (u - r) * (u - r) / om + 0.5 * (u - mu) * (u - mu) / s2; };
  const double log_max = log_ratio((r / om - mu / s2) / (1.0 / om - 1.0 / s2));
  Rng rng(21);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const Matrix l = path.cov.llt().matrixL();
  const int want = 60000;
  Vector sum = Vector::Zero(4);
  for (int kept = 0; kept < want;) {
    const Vector y = path.mean + l * standard_normal(rng, 4);
    if (std::log(unif(rng)) < log_ratio(y(2)) - log_max) {
      sum += y;
      ++kept;
    }
  }
  double worst_se = 0.0;
  for (int i = 0; i < 4; ++i) worst_se = std::max(worst_se, std::abs(sum(i) / want - soft.mean(i)) / std::sqrt(soft.cov(i, i) / want));

  const auto full = forecast::condition_path(path, {Matrix::Identity(4, 4), Vector::LinSpaced(4, -1.0, 2.0), Matrix::Zero(4, 4)});
  const double collapse = full.cov.cwiseAbs().maxCoeff();
  return {exact_gap <= 1e-12 && worst_se <= 3.0 && collapse <= 1e-10,
          "exact gap " + fmt(exact_gap) + ", soft mean within " + fmt(worst_se) + " se, R=I covariance " + fmt(collapse)};
}

Outcome soft_identity() {
  const auto path = forecast::unconditional_path(forecast::build_stacked_system(two_variable_system(), Matrix::Constant(1, 2, 0.7), 3));
  Matrix R = Matrix::Zero(2, 6);
  R(0, 0) = 1.0;
  R(1, 4) = 1.0;
  const auto cp = forecast::condition_path(path, {R, Vector::Constant(2, 3.0), R * path.cov * R.transpose()});
  const double gap = (cp.cov - path.cov).cwiseAbs().maxCoeff();
  return {gap <= 1e-10, "max |M* - M| = " + fmt(gap)};
}

Outcome bma_reduction(const config::RunConfig& cfg) {
  const auto res = harness::run_backtest(cfg);
  double worst = 0.0;
  int n = 0;
  Vector cumulative = Vector::Zero(static_cast<Eigen::Index>(res.artifacts.models.size()));
  for (const auto& r : res.artifacts.records) {
    if (r.failed) return {false, r.quarter + " failed: " + r.error};
    cumulative += r.one_step_logdens;
    const Vector w = (cumulative.array() - cumulative.maxCoeff()).exp().matrix();
    worst = std::max(worst, (r.pi_tilde.tail(w.size()) - w / w.sum()).cwiseAbs().maxCoeff());
    worst = std::max(worst, std::abs(r.pi_tilde(0)));
    ++n;
  }
  return {n == 12 && worst <= 1e-12, std::to_string(n) + " quarters, max weight gap " + fmt(worst)};
}

Outcome score_spots() {
  const double z = scoring::bandwidth(2.0, 0.4);
  const double z_gap = std::abs(z - 2.0 / std::sqrt(-2.0 * std::log(0.4)));
  scoring::ScoreSpec spec;
  spec.k = 1;
  spec.x_prev = 1.0;
  const Vector s = scoring::score_vector(Vector::Constant(1, spec.y_star + spec.d_y), Vector::Constant(1, spec.g_star), Vector::Constant(1, 1.0), spec);
  const double s_gap = std::abs(s(0) - 1.4);
  return {z_gap <= 1e-12 && s_gap <= 1e-12, "bandwidth gap " + fmt(z_gap) + ", score at |y - y*| = d_y is " + fmt(s(0))};
}

Outcome optimizer_recovery() {
  const auto t0 = std::chrono::steady_clock::now();
  const int k = 8;
  Rng rng(5);
  Matrix g(k, k);
  for (int j = 0; j < k; ++j) g.col(j) = standard_normal(rng, k);
  const Matrix a = g * g.transpose() / k + Matrix::Identity(k, k);
  const Vector opt = Vector::LinSpaced(k, -3.0, 6.0);
  const Vector b = a * opt;
  const auto bounds = optimize::Bounds::box(k, -10.0, 15.0);
  int hits = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto rep = optimize::optimize_policy([&](const Vector& x) { return b.dot(x) - 0.5 * x.dot(a * x); }, bounds, optimize::SwarmConfig{}, s);
    if ((rep.best_x - opt).cwiseAbs().maxCoeff() <= 1e-2) ++hits;
  }
  const auto sphere = optimize::optimize_policy([](const Vector& x) { return -x.squaredNorm(); }, bounds, optimize::SwarmConfig{}, 7);
  const double sgap = sphere.best_x.cwiseAbs().maxCoeff();
  return {hits >= 95 && sgap <= 1e-3,
          "quadratic " + std::to_string(hits) + "/100 within 1e-2, sphere " + fmt(sgap) + ", " + fmt(seconds_since(t0)) + " s"};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome end_to_end(const fs::path& config_path, const fs::path& work) {
  const auto cfg = config::load_run_config(config_path);
  fs::remove_all(work);
  harness::RunOptions opts;
  opts.out_dir = work / "first";
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = harness::run_backtest(cfg, opts);
  const double minutes = seconds_since(t0) / 60.0;
  int n = 0;
  int ess_ok = 0;
  int converged = 0;
  int gain_ok = 0;
  int failed = 0;
  for (const auto& r : res.artifacts.records) {
    if (r.failed) {
      ++failed;
      continue;
    }
    ++n;
    if (r.ess >= 0.5) ++ess_ok;
    if (r.tilt_converged) {
      ++converged;
      if (r.direction_gain >= 0.0) ++gain_ok;
    }
  }
  opts.out_dir = work / "second";
  harness::run_backtest(cfg, opts);
  bool identical = true;
  for (const char* f : {"manifest.json", "decisions.csv", "weights.csv", "tilting.csv", "targets.csv", "utilities.csv", "optimizer.csv", "telemetry.csv"}) {
    identical = identical && read_file(work / "first" / f) == read_file(work / "second" / f);
  }
  fs::remove_all(work);
  const bool pass = res.artifacts.records.size() == 40 && failed == 0 && minutes < 15.0 && ess_ok >= 0.8 * n && gain_ok == converged && identical;
  return {pass, std::to_string(res.artifacts.records.size()) + " quarters (" + std::to_string(failed) + " failed) in " + fmt(minutes) +
                    " min; ESS >= 0.5 in " + std::to_string(ess_ok) + "/" + std::to_string(n) + "; direction gain >= 0 in " +
                    std::to_string(gain_ok) + "/" + std::to_string(converged) + " converged; rerun " +
                    (identical ? "byte-identical" : "DIFFERS")};
}

Outcome no_lookahead(const config::RunConfig& cfg) {
  const auto data = config::load_dataset(cfg);
  const auto full = harness::run_backtest(cfg, data);
  const Eigen::Index first = harness::start_row(cfg, data);
  const auto cut = harness::run_backtest(cfg, data.head(first + 3));
  const fs::path dir = fs::temp_directory_path() / "bpds_acceptance_lookahead";
  fs::remove_all(dir);
  io::RunArtifacts prefix = full.artifacts;
  prefix.records.resize(cut.artifacts.records.size());
  io::persist_run(prefix, dir / "full");
  io::persist_run(cut.artifacts, dir / "cut");
  bool identical = cut.artifacts.records.size() == 4;
  for (const char* f : {"decisions.csv", "weights.csv", "tilting.csv", "targets.csv", "utilities.csv", "optimizer.csv", "telemetry.csv"}) {
    identical = identical && read_file(dir / "full" / f) == read_file(dir / "cut" / f);
  }
  fs::remove_all(dir);
  return {identical, std::to_string(cut.artifacts.records.size()) + " truncated quarters " + (identical ? "match" : "differ from") + " the full run"};
}

/// Small synthetic run on the shared five-variable DGP.
config::RunConfig small_config(const fs::path& e2e_path, int quarters) {
  auto cfg = config::load_run_config(e2e_path);
  cfg.data.synthetic->length = cfg.start_index + quarters + 2;
  cfg.quarters = quarters;
  cfg.draws = 200;
  cfg.baseline_draws = 200;
  cfg.swarm.particles = 10;
  cfg.swarm.iterations = 6;
  cfg.swarm.local_budget = 50;
  cfg.swarm.extra_refinements = 1;
  cfg.swarm.extra_budget = 20;
  cfg.model_budget = 50;
  cfg.grid_overall = 3;
  cfg.grid_cross = 2;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string config_path = std::string(BPDS_SOURCE_DIR) + "/configs/e2e.json";
  bool skip_e2e = false;
  app.add_option("--config", config_path, "end-to-end run configuration");
  app.add_flag("--skip-e2e", skip_e2e, "skip the 40-quarter backtest");
  CLI11_PARSE(app, argc, argv);

  auto reduction = small_config(config_path, 12);
  reduction.gamma = 1.0;
  reduction.pi0 = 0.0;
  reduction.features = {false, false, false};

  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks{
      {"tilting constraint", tilting_constraint},
      {"KL minimality", kl_minimality},
      {"second-order tau", second_order_tau},
      {"conditional forecast oracle", conditional_forecast},
      {"soft-constraint identity", soft_identity},
      {"BMA reduction", [&] { return bma_reduction(reduction); }},
      {"bandwidth and score spot values", score_spots},
      {"optimizer recovery", optimizer_recovery},
      {"end-to-end backtest", [&] { return skip_e2e ? Outcome{false, "skipped"} : end_to_end(config_path, fs::temp_directory_path() / "bpds_acceptance_e2e"); }},
      {"no lookahead", [&] { return no_lookahead(small_config(config_path, 8)); }},
  };
  int failures = 0;
  for (const auto& [name, run] : checks) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
