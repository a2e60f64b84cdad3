#include "bpds/optimize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bpds::optimize {

namespace {

constexpr double kWorst = -std::numeric_limits<double>::infinity();

double sanitize(double v) { return std::isfinite(v) ? v : kWorst; }

/// argmin over ||s|| <= 1 of b's + s'As/2 (exact, via eigendecomposition).
Vector trust_region_step(const Matrix& a, const Vector& b) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (a + a.transpose()));
  const Vector lam = eig.eigenvalues();
  const Matrix& q = eig.eigenvectors();
  const Vector bt = q.transpose() * b;
  const auto step = [&](double shift) {
    Vector s(lam.size());
    for (Eigen::Index i = 0; i < lam.size(); ++i) s(i) = -bt(i) / (lam(i) + shift);
    return s;
  };
  const double scale = std::max({lam.cwiseAbs().maxCoeff(), bt.norm(), 1e-300});
  if (lam(0) > 1e-12 * scale) {
    const Vector s = step(0.0);
    if (s.norm() <= 1.0) return q * s;
  }
  double lo = std::max(0.0, -lam(0)) + 1e-12 * scale;
  Vector s_lo = step(lo);
  if (!s_lo.allFinite() || s_lo.norm() <= 1.0) {
    // Hard case: the gradient has (almost) no weight on the lowest eigenvector.
    Vector s = s_lo.allFinite() ? s_lo : Vector::Zero(lam.size());
    s(0) = 0.0;
    const double rest = std::max(0.0, 1.0 - s.squaredNorm());
    s(0) = std::sqrt(rest);
    return q * s;
  }
  double hi = lo + 1.0;
  while (step(hi).norm() > 1.0) hi = lo + 2.0 * (hi - lo);
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (step(mid).norm() > 1.0) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (hi - lo <= 1e-14 * std::max(1.0, hi)) break;
  }
  return q * step(hi);
}

/// Quadratic regression in scaled coordinates u = (x - c) / radius.
struct QuadModel {
  Vector g;
  Matrix h;
};

QuadModel fit_quadratic(const std::vector<Vector>& xs, const std::vector<double>& fs, const std::vector<std::size_t>& idx,
                        const Vector& c, double fc, double radius) {
  const Eigen::Index k = c.size();
  const Eigen::Index terms = k + k * (k + 1) / 2;
  Matrix design(static_cast<Eigen::Index>(idx.size()), terms);
  Vector rhs(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const Vector u = (xs[idx[r]] - c) / radius;
    const auto row = static_cast<Eigen::Index>(r);
    design.row(row).head(k) = u.transpose();
    Eigen::Index col = k;
    for (Eigen::Index i = 0; i < k; ++i) {
      for (Eigen::Index j = i; j < k; ++j) design(row, col++) = i == j ? 0.5 * u(i) * u(i) : u(i) * u(j);
    }
    rhs(row) = fs[idx[r]] - fc;
  }
  const Vector coef = design.completeOrthogonalDecomposition().solve(rhs);
  QuadModel m;
  m.g = coef.head(k);
  m.h = Matrix::Zero(k, k);
  Eigen::Index col = k;
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = i; j < k; ++j) {
      m.h(i, j) = coef(col);
      m.h(j, i) = coef(col);
      ++col;
    }
  }
  return m;
}

double max_norm_distance(const Vector& a, const Vector& b) { return (a - b).lpNorm<Eigen::Infinity>(); }

}  // namespace

Bounds Bounds::box(int k, double lo, double hi) { return {Vector::Constant(k, lo), Vector::Constant(k, hi)}; }

Vector Bounds::clamp(const Vector& x) const { return x.cwiseMax(lower).cwiseMin(upper); }

bool Bounds::contains(const Vector& x) const {
  return x.size() == lower.size() && (x.array() >= lower.array()).all() && (x.array() <= upper.array()).all();
}

void Bounds::validate() const {
  if (lower.size() == 0 || lower.size() != upper.size()) throw ConfigError("bounds must be non-empty and of equal length");
  if ((lower.array() > upper.array()).any() || !lower.allFinite() || !upper.allFinite()) {
    throw ConfigError("bounds must be finite with lower <= upper");
  }
}

bool better(double va, const Vector& xa, double vb, const Vector& xb, const std::optional<Vector>& anchor) {
  if (va != vb) return va > vb;
  if (!anchor || xb.size() == 0) return false;
  return (xa - *anchor).norm() < (xb - *anchor).norm();
}

OptimizationReport trust_region_maximize(const Objective& f, const Vector& x0, const Bounds& bounds, const TrustRegionOptions& opts,
                                         const std::optional<Vector>& anchor, const Progress& progress) {
  bounds.validate();
  if (x0.size() != bounds.dim()) throw DomainError("start point dimension mismatch");
  const Eigen::Index k = x0.size();
  OptimizationReport rep;
  rep.best_x = bounds.clamp(x0);
  if (opts.budget <= 0) {
    rep.flagged = true;
    rep.budget_exhausted = true;
    return rep;
  }
  std::vector<Vector> xs;
  std::vector<double> fs;
  const auto eval = [&](const Vector& x) {
    const Vector xc = bounds.clamp(x);
    const double v = sanitize(f(xc));
    xs.push_back(xc);
    fs.push_back(v);
    ++rep.evaluations;
    if (rep.evaluations == 1 || better(v, xc, rep.best_value, rep.best_x, anchor)) {
      rep.best_value = v;
      rep.best_x = xc;
    }
    return v;
  };
  const auto exhausted = [&] { return rep.evaluations >= opts.budget; };

  double radius = opts.initial_radius;
  const double max_radius = std::max(opts.initial_radius, (bounds.upper - bounds.lower).maxCoeff());
  eval(rep.best_x);
  Vector center = rep.best_x;
  // Initial design: center, +-radius along each axis, then pairwise diagonals.
  for (Eigen::Index i = 0; i < k && !exhausted(); ++i) {
    for (const double sign : {1.0, -1.0}) {
      if (exhausted()) break;
      Vector x = center;
      x(i) += sign * radius;
      eval(x);
    }
  }
  for (Eigen::Index i = 0; i < k && !exhausted(); ++i) {
    for (Eigen::Index j = i + 1; j < k && !exhausted(); ++j) {
      Vector x = center;
      x(i) += radius;
      x(j) += radius;
      eval(x);
    }
  }
  center = rep.best_x;
  double fc = rep.best_value;
  const auto needed = static_cast<std::size_t>((k + 1) * (k + 2) / 2);
  int geometry_axis = 0;
  int step_count = 0;

  while (!exhausted() && radius > opts.min_radius) {
    std::vector<std::size_t> near;
    std::vector<std::pair<double, std::size_t>> dist;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double d = (xs[i] - center).norm();
      if (d > 0.0 && d <= 3.0 * radius && fs[i] > kWorst) dist.emplace_back(d, i);
    }
    std::sort(dist.begin(), dist.end());
    for (std::size_t i = 0; i < dist.size() && i < 2 * needed; ++i) near.push_back(dist[i].second);
    if (near.size() < static_cast<std::size_t>(k) + 1) {
      Vector x = center;
      const Eigen::Index axis = geometry_axis % k;
      x(axis) += (geometry_axis / k) % 2 == 0 ? radius : -radius;
      ++geometry_axis;
      const double v = eval(x);
      if (better(v, bounds.clamp(x), fc, center, anchor)) {
        center = bounds.clamp(x);
        fc = v;
      }
      continue;
    }
    const QuadModel model = fit_quadratic(xs, fs, near, center, fc, radius);
    if (!model.g.allFinite() || !model.h.allFinite()) {
      radius *= 0.5;
      continue;
    }
    const Vector su = trust_region_step(-model.h, -model.g);
    const Vector trial = bounds.clamp(center + radius * su);
    const Vector u = (trial - center) / radius;
    if (u.norm() < 1e-12) {
      radius *= 0.5;
      continue;
    }
    const double predicted = model.g.dot(u) + 0.5 * u.dot(model.h * u);
    const double v = eval(trial);
    const double rho = predicted > 0.0 ? (v - fc) / predicted : (v > fc ? 1.0 : -1.0);
    if (better(v, trial, fc, center, anchor)) {
      center = trial;
      fc = v;
    }
    if (rho >= 0.75 && u.norm() >= 0.9) {
      radius = std::min(2.0 * radius, max_radius);
    } else if (rho < 0.1) {
      radius *= 0.5;
    }
    rep.trace.push_back(rep.best_value);
    if (progress) progress("local", ++step_count, rep.best_value);
  }
  rep.budget_exhausted = exhausted() && radius > opts.min_radius;
  rep.flagged = !std::isfinite(rep.best_value);
  rep.optima.push_back({rep.best_x, rep.best_value});
  return rep;
}

OptimizationReport optimize_policy(const Objective& f, const Bounds& bounds, const SwarmConfig& cfg, std::uint64_t seed,
                                   const std::vector<Vector>& warm_starts, const std::optional<Vector>& anchor,
                                   const Progress& progress) {
  bounds.validate();
  if (cfg.particles < 8) throw ConfigError("swarm size must be at least 8");
  const Eigen::Index k = bounds.dim();
  const Vector range = bounds.upper - bounds.lower;
  const Vector vmax = 0.2 * range;
  const auto np = static_cast<std::size_t>(cfg.particles);

  OptimizationReport rep;
  if (cfg.iterations <= 0 && cfg.local_budget <= 0) {
    rep.best_x = warm_starts.empty() ? Vector(bounds.clamp(0.5 * (bounds.lower + bounds.upper))) : bounds.clamp(warm_starts.front());
    rep.flagged = true;
    rep.budget_exhausted = true;
    return rep;
  }

  std::vector<Vector> pos(np), vel(np), pbest(np);
  std::vector<double> val(np), pval(np);
  for (std::size_t p = 0; p < np; ++p) {
    Rng rng(derive_seed(seed, {0, p, 1}));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Vector x(k), v(k);
    for (Eigen::Index i = 0; i < k; ++i) {
      x(i) = bounds.lower(i) + unit(rng) * range(i);
      v(i) = (2.0 * unit(rng) - 1.0) * 0.1 * range(i);
    }
    pos[p] = p < warm_starts.size() ? bounds.clamp(warm_starts[p]) : x;
    vel[p] = v;
  }
  const auto evaluate_all = [&] {
    parallel_for(np, [&](std::size_t p) { val[p] = sanitize(f(pos[p])); });
    rep.evaluations += static_cast<int>(np);
  };
  evaluate_all();
  Vector gbest;
  double gval = kWorst;
  for (std::size_t p = 0; p < np; ++p) {
    pbest[p] = pos[p];
    pval[p] = val[p];
    if (gbest.size() == 0 || better(val[p], pos[p], gval, gbest, anchor)) {
      gbest = pos[p];
      gval = val[p];
    }
  }
  rep.trace.push_back(gval);
  const int snapshot_at = std::min(10, cfg.iterations);
  std::vector<LocalOptimum> candidates;
  for (std::size_t p = 0; p < np; ++p) candidates.push_back({pbest[p], pval[p]});

  for (int it = 1; it <= cfg.iterations; ++it) {
    for (std::size_t p = 0; p < np; ++p) {
      Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(it), p, 2}));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      for (Eigen::Index i = 0; i < k; ++i) {
        double v = cfg.inertia * vel[p](i) + cfg.cognitive * unit(rng) * (pbest[p](i) - pos[p](i)) +
                   cfg.social * unit(rng) * (gbest(i) - pos[p](i));
        v = std::clamp(v, -vmax(i), vmax(i));
        double x = pos[p](i) + v;
        if (x < bounds.lower(i) || x > bounds.upper(i)) {
          x = std::clamp(x, bounds.lower(i), bounds.upper(i));
          v = 0.0;
        }
        vel[p](i) = v;
        pos[p](i) = x;
      }
    }
    evaluate_all();
    for (std::size_t p = 0; p < np; ++p) {
      if (better(val[p], pos[p], pval[p], pbest[p], anchor)) {
        pbest[p] = pos[p];
        pval[p] = val[p];
      }
      if (better(pval[p], pbest[p], gval, gbest, anchor)) {
        gbest = pbest[p];
        gval = pval[p];
      }
    }
    rep.trace.push_back(gval);
    if (it == snapshot_at && it > 0) {
      for (std::size_t p = 0; p < np; ++p) candidates.push_back({pbest[p], pval[p]});
    }
    if (progress) progress("swarm", it, gval);
  }
  for (std::size_t p = 0; p < np; ++p) candidates.push_back({pbest[p], pval[p]});
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](const LocalOptimum& a, const LocalOptimum& b) { return better(a.value, a.x, b.value, b.x, anchor); });

  // Nearest-better clustering of the swarm memory: a point seeds a restart when
  // its closest better point is much farther away than is typical.
  std::vector<LocalOptimum> finite;
  for (const auto& c : candidates) {
    if (std::isfinite(c.value)) finite.push_back(c);
  }
  std::vector<double> nb(finite.size(), std::numeric_limits<double>::infinity());
  double nb_sum = 0.0;
  int nb_count = 0;
  for (std::size_t i = 1; i < finite.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) nb[i] = std::min(nb[i], max_norm_distance(finite[i].x, finite[j].x));
    if (nb[i] > 0.0) {
      nb_sum += nb[i];
      ++nb_count;
    }
  }
  const double nb_cut = nb_count > 0 ? 2.0 * nb_sum / nb_count : 0.0;
  std::vector<LocalOptimum> reps;
  for (std::size_t i = 1; i < finite.size(); ++i) {
    if (nb[i] > std::max(nb_cut, cfg.cluster_radius)) reps.push_back(finite[i]);
  }

  rep.best_x = gbest;
  rep.best_value = gval;
  std::vector<LocalOptimum> locals;
  const auto refine = [&](const Vector& start, int budget, const char* phase) {
    TrustRegionOptions tro;
    tro.budget = budget;
    tro.initial_radius = cfg.initial_radius;
    const auto local = trust_region_maximize(f, start, bounds, tro, anchor, [&](const char*, int step, double v) {
      if (progress) progress(phase, step, v);
    });
    rep.evaluations += local.evaluations;
    if (local.evaluations > 0) {
      locals.push_back({local.best_x, local.best_value});
      if (better(local.best_value, local.best_x, rep.best_value, rep.best_x, anchor)) {
        rep.best_x = local.best_x;
        rep.best_value = local.best_value;
      }
    }
    return local;
  };
  if (cfg.local_budget > 0) {
    const auto main = refine(gbest, cfg.local_budget, "local");
    rep.budget_exhausted = main.budget_exhausted;
    rep.trace.insert(rep.trace.end(), main.trace.begin(), main.trace.end());
  } else {
    locals.push_back({gbest, gval});
  }
  int extra = 0;
  for (std::size_t r = 0; r < reps.size() && extra < cfg.extra_refinements; ++r) {
    if (max_norm_distance(reps[r].x, gbest) <= cfg.cluster_radius) continue;
    if (cfg.extra_budget > 0) {
      refine(reps[r].x, cfg.extra_budget, "restart");
    } else {
      locals.push_back(reps[r]);
    }
    ++extra;
  }
  rep.restarts = extra;

  std::stable_sort(locals.begin(), locals.end(),
                   [&](const LocalOptimum& a, const LocalOptimum& b) { return better(a.value, a.x, b.value, b.x, anchor); });
  for (const auto& l : locals) {
    const bool same = std::any_of(rep.optima.begin(), rep.optima.end(), [&](const LocalOptimum& o) {
      const double scale = 1.0 + std::max(std::abs(o.value), std::abs(l.value));
      return max_norm_distance(o.x, l.x) <= cfg.cluster_radius || std::abs(o.value - l.value) <= cfg.value_tolerance * scale;
    });
    if (!same) rep.optima.push_back(l);
  }
  rep.multimodal = rep.optima.size() >= 2;
  rep.flagged = !std::isfinite(rep.best_value);
  return rep;
}

}  // namespace bpds::optimize
