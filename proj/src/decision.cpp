#include "bpds/decision.hpp"

#include <cmath>

namespace bpds::decision {

namespace {

struct Components {
  std::vector<RowMatrix> draws;  // baseline first (possibly empty), then models
};

Components sample_models(const QuarterState& state, const Vector& x) {
  Components c;
  c.draws.resize(static_cast<std::size_t>(state.models()) + 1);
  for (int j = 0; j < state.models(); ++j) state.banks[static_cast<std::size_t>(j)]->sample_into(x, c.draws[static_cast<std::size_t>(j) + 1]);
  c.draws[0].resize(0, 3 * state.k());
  return c;
}

std::vector<Vector> component_utilities(const Components& c, const Vector& x, const scoring::UtilitySpec& utility) {
  std::vector<Vector> u(c.draws.size());
  for (std::size_t j = 0; j < c.draws.size(); ++j) {
    u[j] = c.draws[j].rows() > 0 ? scoring::utilities(c.draws[j], x, utility) : Vector(0);
  }
  return u;
}

void active_range(const synthesis::ScorePool& pool, const Vector& base, Vector& lo, Vector& hi) {
  const Eigen::Index d = pool.scores.cols();
  lo = Vector::Constant(d, std::numeric_limits<double>::infinity());
  hi = -lo;
  for (Eigen::Index i = 0; i < pool.scores.rows(); ++i) {
    if (!(base(i) > 0.0)) continue;
    lo = lo.cwiseMin(pool.scores.row(i).transpose());
    hi = hi.cwiseMax(pool.scores.row(i).transpose());
  }
}

Vector normalized(const Vector& w) {
  const double total = w.sum();
  if (!(total > 0.0) || !std::isfinite(total) || (w.array() < 0.0).any()) throw DomainError("model weights must be nonnegative with positive sum");
  return w / total;
}

}  // namespace

void QuarterState::validate() const {
  if (banks.empty()) throw ConfigError("quarter state needs at least one model");
  if (prior.size() != models()) throw ConfigError("one prior probability per model is required");
  if (static_cast<int>(model_decisions.size()) != models()) throw ConfigError("one model decision per model is required");
  for (const auto& b : banks) {
    if (!b || b->horizon() != k()) throw ConfigError("path bank horizon must equal k");
  }
  if (score.k != k()) throw ConfigError("score and utility horizons differ");
}

void set_baseline_policy_density(QuarterState& state, double inflate) {
  const int k = state.k();
  Vector mean = Vector::Zero(k);
  Matrix second = Matrix::Zero(k, k);
  const double total = state.prior.sum();
  for (int j = 0; j < state.models(); ++j) {
    const auto& bank = *state.banks[static_cast<std::size_t>(j)];
    const double w = state.prior(j) / total;
    const Vector m = bank.policy_mixture_mean();
    mean += w * m;
    second += w * (bank.policy_mixture_cov() + m * m.transpose());
  }
  Matrix cov = second - mean * mean.transpose();
  state.baseline_policy_mean = mean;
  state.baseline_policy_cov = inflate * 0.5 * (cov + cov.transpose());
}

Evaluation evaluate_bpds(const QuarterState& state, const Vector& x, bool keep_draws) {
  const int k = state.k();
  if (x.size() != k) throw DomainError("policy path must have k entries");
  if (!x.allFinite()) throw DomainError("policy path must be finite");
  const int jn = state.models();
  Evaluation ev;
  ev.x = x;
  const bool use_baseline = state.features.baseline && state.pi0 > 0.0;
  ev.pi = synthesis::insert_baseline({normalized(state.prior), synthesis::Stage::kPrior}, use_baseline ? state.pi0 : 0.0);

  ev.path_logdens = Vector::Zero(jn + 1);
  if (state.features.decision_conditioning) {
    ev.path_logdens(0) = use_baseline ? synthesis::multivariate_t_log_density(x, state.baseline_policy_mean, state.baseline_policy_cov,
                                                                              state.baseline_df)
                                      : 0.0;
    for (int j = 0; j < jn; ++j) {
      bool underflow = false;
      ev.path_logdens(j + 1) = state.banks[static_cast<std::size_t>(j)]->policy_log_density(x, &underflow);
      ev.density_underflow = ev.density_underflow || underflow;
    }
    ev.pi_x = synthesis::decision_conditioned_probs(ev.pi, ev.path_logdens);
  } else {
    ev.pi_x = {ev.pi.weights, synthesis::Stage::kDecisionConditioned};
  }

  Components comp = sample_models(state, x);
  if (use_baseline) {
    std::vector<const RowMatrix*> models;
    for (int j = 0; j < jn; ++j) models.push_back(&comp.draws[static_cast<std::size_t>(j) + 1]);
    const auto mm = synthesis::mixture_moments(models, ev.pi_x.weights.tail(jn));
    synthesis::baseline_draws(mm, state.baseline_innov, state.baseline_inflate, comp.draws[0]);
  }
  const auto utilities = component_utilities(comp, x, state.utility);

  std::vector<RowMatrix> scores(comp.draws.size());
  if (state.features.tilt) {
    for (std::size_t j = 0; j < comp.draws.size(); ++j) {
      // Models are scored at their own optimal decisions, the baseline at x.
      const Vector& xs = j == 0 ? x : state.model_decisions[j - 1];
      scores[j] = comp.draws[j].rows() > 0 ? scoring::score_matrix(comp.draws[j], xs, state.score) : RowMatrix(0, 2 * k);
    }
  } else {
    for (std::size_t j = 0; j < comp.draws.size(); ++j) scores[j] = RowMatrix::Zero(comp.draws[j].rows(), 2 * k);
  }
  const synthesis::ScorePool pool = synthesis::make_pool(scores, utilities);
  const Vector base = pool.base_weights(ev.pi_x.weights);
  ev.initial_weights = base;
  ev.initial_utility = pool.utilities.dot(base);

  Vector tau = Vector::Zero(2 * k);
  if (state.features.tilt) {
    const auto moments = synthesis::score_moments(pool, ev.pi_x.weights);
    Vector lo, hi;
    active_range(pool, base, lo, hi);
    ev.target = synthesis::target_score(moments, state.target, &lo, &hi);
    ev.eps = ev.target.epsilon(0);
    for (int h = 0;; ++h) {
      bool ok = false;
      try {
        ev.tilt = synthesis::solve_tilting(pool, ev.pi_x.weights, ev.target.m_f, state.tilt);
        ok = ev.tilt.converged;
      } catch (const InfeasibleTarget&) {
        ok = false;
      }
      if (ok) {
        tau = ev.tilt.tau;
        break;
      }
      if (h >= state.max_halvings) {
        ev.tilt_fallback = true;
        ev.tilt.tau = Vector::Zero(2 * k);
        break;
      }
      ev.eps *= 0.5;
      ++ev.halvings;
      synthesis::TargetRule halved = state.target;
      halved.frozen_eps = ev.eps;
      ev.target = synthesis::target_score(moments, halved, &lo, &hi);
    }
  } else {
    ev.target.m_p = Vector::Zero(2 * k);
    ev.target.m_f = ev.target.m_p;
    ev.tilt.tau = tau;
  }
  ev.tilt.x = x;

  if (state.features.tilt && !ev.tilt_fallback) {
    ev.mixture = synthesis::tilted_mixture(pool, ev.pi_x.weights, tau);
    ev.expected_utility = ev.mixture.expected_utility;
    ev.pi_tilde = {ev.mixture.pi_tilde, synthesis::Stage::kTilted};
    if (ev.target.eigenvectors.cols() > 0) {
      ev.direction_gain = ev.target.eigenvectors.col(0).dot(ev.mixture.expected_score - ev.target.m_p);
    }
  } else {
    // Untilted: the BPDS mixture is the initial mixture under pi(x).
    ev.mixture.pi_tilde = ev.pi_x.weights;
    ev.mixture.log_a = Vector::Zero(jn + 1);
    ev.mixture.weights = base;
    ev.mixture.ess_model = Vector::Ones(jn + 1);
    ev.mixture.ess = 1.0;
    ev.mixture.expected_score = pool.scores.transpose() * base;
    ev.mixture.expected_utility = ev.initial_utility;
    ev.expected_utility = ev.initial_utility;
    ev.pi_tilde = {ev.pi_x.weights, synthesis::Stage::kTilted};
  }
  if (keep_draws) {
    ev.pooled_draws.resize(pool.scores.rows(), 3 * k);
    for (std::size_t j = 0; j < comp.draws.size(); ++j) {
      if (comp.draws[j].rows() > 0) ev.pooled_draws.middleRows(pool.offsets[j], comp.draws[j].rows()) = comp.draws[j];
    }
  }
  return ev;
}

double bpds_expected_utility(const QuarterState& state, const Vector& x) { return evaluate_bpds(state, x).expected_utility; }

double model_expected_utility(const forecast::ConditionalPathBank& bank, const Vector& x, const scoring::UtilitySpec& utility) {
  RowMatrix draws;
  bank.sample_into(x, draws);
  return scoring::utilities(draws, x, utility).mean();
}

Vector shifted_warm_start(const std::optional<Vector>& previous, double x_prev, int k) {
  if (!previous || previous->size() != k) return Vector::Constant(k, x_prev);
  Vector w(k);
  w.head(k - 1) = previous->tail(k - 1);
  w(k - 1) = (*previous)(k - 1);
  return w;
}

ModelDecision model_optimal_path(const forecast::ConditionalPathBank& bank, const scoring::UtilitySpec& utility,
                                 const optimize::Bounds& bounds, int budget, const std::optional<Vector>& warm_start) {
  if (budget < 50) throw ConfigError("model decision budget must be at least 50 evaluations");
  const int k = utility.k;
  const Vector start = warm_start ? *warm_start : Vector::Constant(k, utility.x_prev);
  optimize::TrustRegionOptions opts;
  opts.budget = budget;
  ModelDecision out;
  out.report = optimize::trust_region_maximize([&](const Vector& x) { return model_expected_utility(bank, x, utility); }, start,
                                               bounds, opts, Vector::Constant(k, utility.x_prev));
  if (!std::isfinite(out.report.best_value)) throw NumericalError("all model utility evaluations were non-finite");
  out.x = out.report.best_x;
  return out;
}

double bma_expected_utility(const QuarterState& state, const Vector& bma_weights, const Vector& x) {
  if (bma_weights.size() != state.models()) throw DomainError("one BMA weight per model is required");
  const int k = state.k();
  if (x.size() != k) throw DomainError("policy path must have k entries");
  const Components comp = sample_models(state, x);
  const auto utilities = component_utilities(comp, x, state.utility);
  std::vector<RowMatrix> scores(comp.draws.size());
  for (std::size_t j = 0; j < comp.draws.size(); ++j) scores[j] = RowMatrix::Zero(comp.draws[j].rows(), 2 * k);
  const auto pool = synthesis::make_pool(scores, utilities);
  const auto pi = synthesis::insert_baseline({normalized(bma_weights), synthesis::Stage::kPrior}, 0.0);
  return pool.utilities.dot(pool.base_weights(pi.weights));
}

ModelDecision bma_optimal_path(const QuarterState& state, const Vector& bma_weights, const optimize::Bounds& bounds,
                               const optimize::SwarmConfig& swarm, std::uint64_t seed, const std::vector<Vector>& warm_starts,
                               const optimize::Progress& progress) {
  ModelDecision out;
  out.report = optimize::optimize_policy([&](const Vector& x) { return bma_expected_utility(state, bma_weights, x); }, bounds,
                                         swarm, seed, warm_starts, Vector::Constant(state.k(), state.utility.x_prev), progress);
  out.x = out.report.best_x;
  return out;
}

ModelDecision bpds_optimal_path(const QuarterState& state, const optimize::Bounds& bounds, const optimize::SwarmConfig& swarm,
                                std::uint64_t seed, const std::vector<Vector>& warm_starts, const optimize::Progress& progress) {
  ModelDecision out;
  out.report = optimize::optimize_policy([&](const Vector& x) { return bpds_expected_utility(state, x); }, bounds, swarm, seed,
                                         warm_starts, Vector::Constant(state.k(), state.utility.x_prev), progress);
  out.x = out.report.best_x;
  return out;
}

}  // namespace bpds::decision
