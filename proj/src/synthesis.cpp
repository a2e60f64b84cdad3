#include "bpds/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace bpds::synthesis {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Normalizes log weights, keeping structural zeros (log weight -inf coming from a
/// zero prior probability) at exactly zero and flooring everything else.
Vector normalize_keep_zeros(const Vector& log_w, const Vector& prior) {
  Vector out = Vector::Zero(log_w.size());
  std::vector<Eigen::Index> live;
  for (Eigen::Index j = 0; j < log_w.size(); ++j) {
    if (prior(j) > 0.0) live.push_back(j);
  }
  if (live.empty()) throw NumericalError("all model weights are zero");
  Vector sub(static_cast<Eigen::Index>(live.size()));
  for (std::size_t i = 0; i < live.size(); ++i) sub(static_cast<Eigen::Index>(i)) = log_w(live[i]);
  const Vector w = normalize_log_weights(sub);
  for (std::size_t i = 0; i < live.size(); ++i) out(live[i]) = w(static_cast<Eigen::Index>(i));
  return out;
}

struct TiltState {
  double dual = 0.0;  // log sum b e^{tau's} - tau' m_f
  Vector mean;        // E_tau[s]
  Vector weights;
};

TiltState evaluate_tilt(const RowMatrix& s, const Vector& log_b, const Vector& tau, const Vector& m_f, bool want_weights) {
  const Vector l = log_b + s * tau;
  const double top = l.maxCoeff();
  TiltState st;
  if (!std::isfinite(top)) {
    st.dual = top;
    st.weights = Vector::Zero(l.size());
    st.mean = Vector::Constant(s.cols(), std::numeric_limits<double>::quiet_NaN());
    return st;
  }
  st.weights = (l.array() - top).exp().matrix();
  const double total = st.weights.sum();
  st.weights /= total;
  st.dual = top + std::log(total) - tau.dot(m_f);
  st.mean = s.transpose() * st.weights;
  if (!want_weights) st.weights.resize(0);
  return st;
}

}  // namespace

bool ModelProbabilities::valid() const {
  if (weights.size() == 0 || (weights.array() < 0.0).any() || !weights.allFinite()) return false;
  return std::abs(weights.sum() - 1.0) <= 1e-12;
}

ModelProbabilities uniform_probabilities(int count) {
  if (count < 1) throw DomainError("at least one model is required");
  return {Vector::Constant(count, 1.0 / count), Stage::kPrior};
}

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kPrior: return "prior";
    case Stage::kDecisionConditioned: return "decision_conditioned";
    case Stage::kTilted: return "tilted";
  }
  return "unknown";
}

ModelProbabilities update_prior_probabilities(const ModelProbabilities& prev, double gamma, const Vector& one_step_logdens,
                                              const std::vector<Vector>& realized_scores, const Vector& prev_tau) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw DomainError("discount gamma must lie in (0, 1]");
  const Eigen::Index j_count = prev.size();
  if (one_step_logdens.size() != j_count) throw DomainError("one density per model is required");
  if (!realized_scores.empty() && static_cast<Eigen::Index>(realized_scores.size()) != j_count) {
    throw DomainError("one realized score per model is required");
  }
  Vector log_w(j_count);
  for (Eigen::Index j = 0; j < j_count; ++j) {
    double lw = prev.weights(j) > 0.0 ? gamma * std::log(prev.weights(j)) : kNegInf;
    const double ld = one_step_logdens(j);
    lw += std::isnan(ld) ? kNegInf : ld;
    if (!realized_scores.empty() && prev_tau.size() > 0) {
      const auto& s = realized_scores[static_cast<std::size_t>(j)];
      if (s.size() != prev_tau.size()) throw DomainError("realized score and tilting vector differ in length");
      lw += prev_tau.dot(s);
    }
    log_w(j) = lw;
  }
  return {normalize_log_weights(log_w), Stage::kPrior};
}

ModelProbabilities insert_baseline(const ModelProbabilities& pi, double pi0) {
  if (!(pi0 >= 0.0 && pi0 < 1.0)) throw DomainError("baseline probability must lie in [0, 1)");
  Vector w(pi.size() + 1);
  w(0) = pi0;
  w.tail(pi.size()) = (1.0 - pi0) * pi.weights;
  return {w, pi.stage};
}

ModelProbabilities decision_conditioned_probs(const ModelProbabilities& pi, const Vector& path_logdens) {
  if (path_logdens.size() != pi.size()) throw DomainError("one policy-path density per model is required");
  Vector log_w(pi.size());
  for (Eigen::Index j = 0; j < pi.size(); ++j) {
    log_w(j) = pi.weights(j) > 0.0 ? std::log(pi.weights(j)) + path_logdens(j) : kNegInf;
    if (std::isnan(log_w(j))) log_w(j) = kNegInf;
  }
  return {normalize_keep_zeros(log_w, pi.weights), Stage::kDecisionConditioned};
}

MixtureMoments mixture_moments(const std::vector<const RowMatrix*>& samples, const Vector& weights) {
  if (samples.empty()) throw DomainError("mixture needs at least one component");
  if (static_cast<Eigen::Index>(samples.size()) != weights.size()) throw DomainError("one weight per component is required");
  const double total = weights.sum();
  if (!(total > 0.0)) throw DomainError("mixture weights must have positive sum");
  const Eigen::Index dim = samples.front()->cols();
  MixtureMoments mm;
  mm.mean = Vector::Zero(dim);
  Matrix second = Matrix::Zero(dim, dim);
  for (std::size_t j = 0; j < samples.size(); ++j) {
    const double w = weights(static_cast<Eigen::Index>(j)) / total;
    if (w == 0.0) continue;
    const RowMatrix& s = *samples[j];
    if (s.cols() != dim || s.rows() == 0) throw DomainError("mixture components must share dimension");
    const Vector mu = s.colwise().mean().transpose();
    const RowMatrix centered = s.rowwise() - mu.transpose();
    Matrix within = Matrix::Zero(dim, dim);
    within.selfadjointView<Eigen::Lower>().rankUpdate(centered.transpose(), 1.0 / static_cast<double>(s.rows()));
    within = within.selfadjointView<Eigen::Lower>();
    mm.mean += w * mu;
    second += w * (within + mu * mu.transpose());
  }
  mm.cov = second - mm.mean * mm.mean.transpose();
  mm.cov = 0.5 * (mm.cov + mm.cov.transpose());
  return mm;
}

BaselineInnovations baseline_innovations(Eigen::Index count, Eigen::Index dim, double df, std::uint64_t seed) {
  if (count < 1 || dim < 1) throw DomainError("baseline sample must be non-empty");
  BaselineInnovations in;
  in.df = df;
  in.normals.resize(count, dim);
  in.radial = Vector::Ones(count);
  const bool gaussian = !(df > 0.0) || std::isinf(df);
  if (!gaussian && df <= 2.0) throw DomainError("baseline degrees of freedom must exceed 2");
  Rng rng(seed);
  std::normal_distribution<double> normal;
  std::chi_squared_distribution<double> chi2(gaussian ? 1.0 : df);
  for (Eigen::Index i = 0; i < count; ++i) {
    for (Eigen::Index c = 0; c < dim; ++c) in.normals(i, c) = normal(rng);
    if (!gaussian) in.radial(i) = std::sqrt(df / chi2(rng));
  }
  return in;
}

void baseline_draws(const MixtureMoments& moments, const BaselineInnovations& innov, double inflate, RowMatrix& out) {
  if (moments.mean.size() != innov.normals.cols()) throw DomainError("baseline dimension mismatch");
  const bool gaussian = !(innov.df > 0.0) || std::isinf(innov.df);
  // Covariance of a T with scale Psi is Psi df / (df - 2).
  const double scale = gaussian ? inflate : inflate * (innov.df - 2.0) / innov.df;
  const Matrix l = floored_factor(scale * moments.cov, 1e-12);
  out = innov.normals * l.transpose();
  out.array().colwise() *= innov.radial.array();
  out.rowwise() += moments.mean.transpose();
}

RowMatrix baseline_predictive(const std::vector<const RowMatrix*>& components, const Vector& weights, double df, double inflate,
                              Eigen::Index count, std::uint64_t seed) {
  const auto mm = mixture_moments(components, weights);
  const auto innov = baseline_innovations(count, mm.mean.size(), df, seed);
  RowMatrix out;
  baseline_draws(mm, innov, inflate, out);
  return out;
}

double multivariate_t_log_density(const Vector& z, const Vector& location, const Matrix& cov, double df) {
  const auto d = static_cast<double>(z.size());
  if (!(df > 2.0)) throw DomainError("T degrees of freedom must exceed 2");
  const Matrix scale = cov * (df - 2.0) / df;
  const Matrix l = floored_factor(scale, 1e-12);
  Eigen::LLT<Matrix> llt(l * l.transpose());
  if (llt.info() != Eigen::Success) throw NumericalError("T scale not positive definite");
  const Matrix lf = llt.matrixL();
  const double maha = lf.triangularView<Eigen::Lower>().solve(z - location).squaredNorm();
  return std::lgamma(0.5 * (df + d)) - std::lgamma(0.5 * df) - 0.5 * d * std::log(df * std::numbers::pi) -
         lf.diagonal().array().log().sum() - 0.5 * (df + d) * std::log1p(maha / df);
}

Vector ScorePool::base_weights(const Vector& pi) const {
  if (pi.size() != components()) throw DomainError("one probability per pooled component is required");
  Vector b(scores.rows());
  for (int j = 0; j < components(); ++j) {
    const Eigen::Index n = rows(j);
    if (n == 0) continue;
    b.segment(offsets[j], n).setConstant(pi(j) / static_cast<double>(n));
  }
  return b;
}

ScorePool make_pool(const std::vector<RowMatrix>& scores, const std::vector<Vector>& utilities) {
  if (scores.empty()) throw DomainError("score pool needs at least one component");
  if (!utilities.empty() && utilities.size() != scores.size()) throw DomainError("one utility vector per component");
  ScorePool pool;
  Eigen::Index total = 0;
  for (const auto& s : scores) {
    if (s.cols() != scores.front().cols()) throw DomainError("score dimension mismatch");
    total += s.rows();
    pool.offsets.push_back(total);
  }
  pool.scores.resize(total, scores.front().cols());
  pool.utilities = Vector::Zero(total);
  for (std::size_t j = 0; j < scores.size(); ++j) {
    pool.scores.middleRows(pool.offsets[j], scores[j].rows()) = scores[j];
    if (!utilities.empty()) {
      if (utilities[j].size() != scores[j].rows()) throw DomainError("utility count mismatch");
      pool.utilities.segment(pool.offsets[j], scores[j].rows()) = utilities[j];
    }
  }
  return pool;
}

TargetScore score_moments(const ScorePool& pool, const Vector& pi) {
  const Vector b = pool.base_weights(pi);
  TargetScore ts;
  ts.m_p = pool.scores.transpose() * b;
  const RowMatrix scaled = (pool.scores.rowwise() - ts.m_p.transpose()).array().colwise() * b.array().sqrt();
  const Eigen::Index dim = pool.scores.cols();
  ts.V_p = Matrix::Zero(dim, dim);
  ts.V_p.selfadjointView<Eigen::Lower>().rankUpdate(scaled.transpose());
  ts.V_p = ts.V_p.selfadjointView<Eigen::Lower>();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(ts.V_p);
  if (eig.info() != Eigen::Success) throw NumericalError("score covariance eigendecomposition failed");
  const Eigen::Index d = ts.V_p.rows();
  ts.eigenvalues.resize(d);
  ts.eigenvectors.resize(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    // Eigen returns ascending order.
    ts.eigenvalues(i) = std::max(eig.eigenvalues()(d - 1 - i), 0.0);
    Vector v = eig.eigenvectors().col(d - 1 - i);
    const double sum = v.sum();
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    const bool flip = std::abs(sum) > 1e-12 ? sum < 0.0 : v(arg) < 0.0;
    ts.eigenvectors.col(i) = flip ? Vector(-v) : v;
  }
  ts.C_p = ts.eigenvectors * ts.eigenvalues.cwiseSqrt().asDiagonal();
  ts.epsilon = Vector::Zero(d);
  ts.m_f = ts.m_p;
  return ts;
}

TargetScore target_with_epsilon(TargetScore ts, double eps) {
  if (!(eps >= 0.0)) throw DomainError("epsilon must be nonnegative");
  ts.epsilon = Vector::Zero(ts.m_p.size());
  if (ts.epsilon.size() > 0) ts.epsilon(0) = eps;
  ts.m_f = ts.m_p + ts.C_p * ts.epsilon;
  ts.clamped = false;
  constexpr double kEdge = 1e-9;
  for (Eigen::Index h = 0; h < ts.m_f.size(); ++h) {
    const double c = std::clamp(ts.m_f(h), kEdge, 2.0 - kEdge);
    if (c != ts.m_f(h)) ts.clamped = true;
    ts.m_f(h) = c;
  }
  return ts;
}

TargetScore target_score(TargetScore ts, const TargetRule& rule, const Vector* lo, const Vector* hi) {
  if (!(rule.min_ratio > 0.0 && rule.min_ratio < 1.0)) throw DomainError("min_ratio must lie in (0, 1)");
  if (!(rule.eps_cap >= 0.0)) throw DomainError("epsilon cap must be nonnegative");
  double eps = 0.0;
  if (rule.frozen_eps >= 0.0) {
    eps = rule.frozen_eps;
  } else if (ts.C_p.cols() > 0) {
    const Vector dir = ts.C_p.col(0);
    double ratio_eps = std::numeric_limits<double>::infinity();
    for (Eigen::Index h = 0; h < dir.size(); ++h) {
      if (dir(h) < 0.0) ratio_eps = std::min(ratio_eps, (1.0 - rule.min_ratio) * ts.m_p(h) / -dir(h));
    }
    eps = std::min(ratio_eps, rule.eps_cap);
  }
  ts = target_with_epsilon(std::move(ts), eps);
  if (lo && hi) {
    for (Eigen::Index h = 0; h < ts.m_f.size(); ++h) {
      const double margin = 1e-3 * ((*hi)(h) - (*lo)(h));
      const double a = (*lo)(h) + margin;
      const double b = (*hi)(h) - margin;
      const double c = a <= b ? std::clamp(ts.m_f(h), a, b) : 0.5 * ((*lo)(h) + (*hi)(h));
      if (c != ts.m_f(h)) ts.clamped = true;
      ts.m_f(h) = c;
    }
  }
  return ts;
}

TiltingVector solve_tilting(const ScorePool& pool, const Vector& pi, const Vector& m_f, const TiltOptions& opts) {
  const Eigen::Index d = pool.scores.cols();
  if (m_f.size() != d) throw DomainError("target score dimension mismatch");
  const Vector b = pool.base_weights(pi);
  Eigen::Index active = 0;
  for (Eigen::Index i = 0; i < b.size(); ++i) active += b(i) > 0.0 ? 1 : 0;
  if (active == 0) throw DomainError("no sample carries positive weight");
  RowMatrix s(active, d);
  Vector log_b(active);
  Vector lo = Vector::Constant(d, std::numeric_limits<double>::infinity());
  Vector hi = -lo;
  for (Eigen::Index i = 0, r = 0; i < b.size(); ++i) {
    if (!(b(i) > 0.0)) continue;
    s.row(r) = pool.scores.row(i);
    log_b(r) = std::log(b(i));
    lo = lo.cwiseMin(s.row(r).transpose());
    hi = hi.cwiseMax(s.row(r).transpose());
    ++r;
  }
  for (Eigen::Index h = 0; h < d; ++h) {
    const bool degenerate = hi(h) - lo(h) <= 1e-12 && std::abs(m_f(h) - lo(h)) <= 1e-12;
    if (!degenerate && !(m_f(h) > lo(h) && m_f(h) < hi(h))) {
      throw InfeasibleTarget("target score coordinate " + std::to_string(h + 1) + " = " + format_double(m_f(h)) +
                             " lies outside the sampled range [" + format_double(lo(h)) + ", " + format_double(hi(h)) + "]");
    }
  }

  TiltingVector out;
  Vector tau = Vector::Zero(d);
  TiltState st = evaluate_tilt(s, log_b, tau, m_f, true);
  Vector best_tau = tau;
  double best_res = (st.mean - m_f).lpNorm<Eigen::Infinity>();
  int it = 0;
  for (; it < opts.max_iterations; ++it) {
    const Vector grad = st.mean - m_f;
    const double res = grad.lpNorm<Eigen::Infinity>();
    if (res < best_res) {
      best_res = res;
      best_tau = tau;
    }
    if (res <= opts.tol) break;
    const RowMatrix scaled = (s.rowwise() - st.mean.transpose()).array().colwise() * st.weights.array().sqrt();
    Matrix hess = Matrix::Zero(d, d);
    hess.selfadjointView<Eigen::Lower>().rankUpdate(scaled.transpose());
    hess = hess.selfadjointView<Eigen::Lower>();
    Eigen::SelfAdjointEigenSolver<Matrix> eig(hess);
    const Vector lam = eig.eigenvalues();
    const double top = std::max(lam.maxCoeff(), 1e-300);
    const double damping = 1e-10 * top;
    const Vector proj = eig.eigenvectors().transpose() * grad;
    Vector step = Vector::Zero(d);
    for (Eigen::Index i = 0; i < d; ++i) step -= proj(i) / (std::max(lam(i), 0.0) + damping) * eig.eigenvectors().col(i);
    const double slope = grad.dot(step);

    bool accepted = false;
    if (step.allFinite() && slope < 0.0) {
      double alpha = 1.0;
      for (int ls = 0; ls < 50; ++ls, alpha *= 0.5) {
        const Vector trial = tau + alpha * step;
        TiltState ts = evaluate_tilt(s, log_b, trial, m_f, true);
        if (std::isfinite(ts.dual) && ts.dual <= st.dual + 1e-4 * alpha * slope) {
          tau = trial;
          st = std::move(ts);
          accepted = true;
          break;
        }
      }
    }
    if (!accepted) {
      // Compass search on the dual when the Newton direction makes no progress.
      out.used_fallback = true;
      double delta = std::max(1.0, tau.lpNorm<Eigen::Infinity>());
      bool improved = false;
      while (delta > 1e-12 && !improved) {
        for (Eigen::Index i = 0; i < d && !improved; ++i) {
          for (const double sign : {1.0, -1.0}) {
            Vector trial = tau;
            trial(i) += sign * delta;
            TiltState ts = evaluate_tilt(s, log_b, trial, m_f, true);
            if (std::isfinite(ts.dual) && ts.dual < st.dual) {
              tau = trial;
              st = std::move(ts);
              improved = true;
              break;
            }
          }
        }
        delta *= 0.5;
      }
      if (!improved) break;
    }
  }
  const double final_res = (st.mean - m_f).lpNorm<Eigen::Infinity>();
  if (final_res < best_res) {
    best_res = final_res;
    best_tau = tau;
  }
  out.tau = best_tau;
  out.residual = best_res;
  out.iterations = it;
  out.converged = best_res <= opts.tol;
  return out;
}

BPDSMixture tilted_mixture(const ScorePool& pool, const Vector& pi, const Vector& tau) {
  if (tau.size() != pool.scores.cols()) throw DomainError("tilting vector dimension mismatch");
  const int jn = pool.components();
  if (pi.size() != jn) throw DomainError("one probability per pooled component is required");
  const Vector t = pool.scores * tau;
  BPDSMixture mix;
  mix.log_a = Vector::Constant(jn, kNegInf);
  mix.ess_model = Vector::Ones(jn);
  Vector log_terms = Vector::Constant(jn, kNegInf);
  for (int j = 0; j < jn; ++j) {
    const Eigen::Index n = pool.rows(j);
    if (n == 0) continue;
    const Vector tj = t.segment(pool.offsets[j], n);
    const double log_n = std::log(static_cast<double>(n));
    const double lse1 = log_sum_exp(tj);
    const double lse2 = log_sum_exp(Vector(2.0 * tj));
    mix.log_a(j) = lse1 - log_n;
    mix.ess_model(j) = std::min(1.0, std::exp(2.0 * lse1 - lse2 - log_n));
    if (pi(j) > 0.0) log_terms(j) = std::log(pi(j)) + mix.log_a(j);
  }
  mix.log_k = log_sum_exp(log_terms);
  if (!std::isfinite(mix.log_k)) throw NumericalError("tilted mixture normalizer underflowed");
  mix.pi_tilde = Vector::Zero(jn);
  for (int j = 0; j < jn; ++j) {
    if (std::isfinite(log_terms(j))) mix.pi_tilde(j) = std::exp(log_terms(j) - mix.log_k);
  }
  mix.pi_tilde /= mix.pi_tilde.sum();

  mix.weights = Vector::Zero(t.size());
  Vector lb1 = Vector::Constant(t.size(), kNegInf);
  for (int j = 0; j < jn; ++j) {
    const Eigen::Index n = pool.rows(j);
    if (n == 0 || !(pi(j) > 0.0)) continue;
    const double lb = std::log(pi(j)) - std::log(static_cast<double>(n));
    lb1.segment(pool.offsets[j], n) = (t.segment(pool.offsets[j], n).array() + lb).matrix();
  }
  // ESS = (sum b e^t)^2 / sum b e^{2t}, with lb1 = log(b e^t).
  const double lse = log_sum_exp(lb1);
  const Vector lb2 = lb1 + t;
  mix.ess = std::min(1.0, std::exp(2.0 * lse - log_sum_exp(lb2)));
  for (Eigen::Index i = 0; i < t.size(); ++i) mix.weights(i) = std::isfinite(lb1(i)) ? std::exp(lb1(i) - lse) : 0.0;
  mix.expected_score = pool.scores.transpose() * mix.weights;
  mix.expected_utility = pool.utilities.size() == t.size() ? pool.utilities.dot(mix.weights) : 0.0;
  return mix;
}

}  // namespace bpds::synthesis
