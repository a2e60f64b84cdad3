#pragma once

#include "bpds/common.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace bpds::synthesis {

enum class Stage { kPrior, kDecisionConditioned, kTilted };

/// Weights over models; index 0 is the baseline once it has been inserted.
struct ModelProbabilities {
  Vector weights;
  Stage stage = Stage::kPrior;

  [[nodiscard]] Eigen::Index size() const { return weights.size(); }
  /// Nonnegative and summing to one within 1e-12.
  [[nodiscard]] bool valid() const;
};

ModelProbabilities uniform_probabilities(int count);

/// log pi_t,j = gamma log pi_{t-1,j} + one_step_logdens_j + tau' s_j, normalized in
/// log space. `realized_scores` may be empty (no realized-score term) or hold
/// one score vector per model with the same length as `prev_tau`.
ModelProbabilities update_prior_probabilities(const ModelProbabilities& prev, double gamma, const Vector& one_step_logdens,
                                              const std::vector<Vector>& realized_scores, const Vector& prev_tau);

/// Prepends the baseline with probability pi0 and rescales the rest by 1 - pi0.
ModelProbabilities insert_baseline(const ModelProbabilities& pi, double pi0);

/// pi_j(x) proportional to pi_j exp(path_logdens_j).
ModelProbabilities decision_conditioned_probs(const ModelProbabilities& pi, const Vector& path_logdens);

/// Mean and covariance of an equally-weighted-within, `weights`-across mixture of samples.
struct MixtureMoments {
  Vector mean;
  Matrix cov;
};
MixtureMoments mixture_moments(const std::vector<const RowMatrix*>& samples, const Vector& weights);

/// Fixed standardized multivariate-T innovations so the baseline keeps common
/// random numbers as its location and scale move with x.
struct BaselineInnovations {
  RowMatrix normals;  // N x dim
  Vector radial;      // sqrt(df / chi2_df) per draw; all ones in the Gaussian limit
  double df = 10.0;
};
/// df <= 0 or infinite gives the Gaussian limit.
BaselineInnovations baseline_innovations(Eigen::Index count, Eigen::Index dim, double df, std::uint64_t seed);

/// Multivariate T draws with location `mean` and covariance inflate * cov.
void baseline_draws(const MixtureMoments& moments, const BaselineInnovations& innov, double inflate, RowMatrix& out);

/// Baseline sample built from the component mixture (baseline excluded).
RowMatrix baseline_predictive(const std::vector<const RowMatrix*>& components, const Vector& weights, double df, double inflate,
                              Eigen::Index count, std::uint64_t seed);

/// Log density of a multivariate T with the given location, covariance and df.
double multivariate_t_log_density(const Vector& z, const Vector& location, const Matrix& cov, double df);

/// Score draws of every component stacked in component order, with row offsets.
/// Component j occupies rows [offsets[j], offsets[j+1]).
struct ScorePool {
  RowMatrix scores;
  Vector utilities;
  std::vector<Eigen::Index> offsets{0};

  [[nodiscard]] int components() const { return static_cast<int>(offsets.size()) - 1; }
  [[nodiscard]] Eigen::Index rows(int j) const { return offsets[j + 1] - offsets[j]; }
  /// Per-row weights pi_j / N_j.
  [[nodiscard]] Vector base_weights(const Vector& pi) const;
};

ScorePool make_pool(const std::vector<RowMatrix>& scores, const std::vector<Vector>& utilities = {});

struct TargetRule {
  double min_ratio = 0.75;
  double eps_cap = 0.3;
  /// When set, epsilon is fixed to this value instead of following the rule.
  double frozen_eps = -1.0;
};

struct TargetScore {
  Vector m_p;
  Matrix V_p;
  Matrix C_p;           // eigenvectors scaled by sqrt of eigenvalues, descending
  Vector eigenvalues;   // descending, floored at 0
  Matrix eigenvectors;  // columns sign-fixed so each sums to a positive value
  Vector epsilon;       // standardized improvement (eps, 0, ..., 0)
  Vector m_f;
  bool clamped = false;
};

/// m_p, V_p and the sign-fixed eigen factor C_p under the weights pi.
TargetScore score_moments(const ScorePool& pool, const Vector& pi);

/// Largest-eigen-direction rule. Epsilon stops where min_h m_f,h / m_p,h reaches
/// min_ratio (only possible when the direction lowers some coordinate) and never
/// exceeds eps_cap. m_f is then clamped into [lo, hi] when bounds are given and
/// always into the open box (0, 2).
TargetScore target_score(TargetScore ts, const TargetRule& rule, const Vector* lo = nullptr, const Vector* hi = nullptr);

/// Sets epsilon explicitly (no clamping beyond the (0, 2) box).
TargetScore target_with_epsilon(TargetScore ts, double eps);

struct TiltOptions {
  double tol = 1e-3;
  int max_iterations = 200;
};

struct TiltingVector {
  Vector tau;
  Vector x;
  double residual = 0.0;  // sup-norm of E_f[s] - m_f
  int iterations = 0;
  bool converged = false;
  bool used_fallback = false;
};

/// Solves E_f[s] = m_f for exponential tilting of the pooled samples weighted by
/// pi / N_j. Throws InfeasibleTarget when m_f leaves the coordinatewise range of
/// the sampled scores.
TiltingVector solve_tilting(const ScorePool& pool, const Vector& pi, const Vector& m_f, const TiltOptions& opts = {});

struct BPDSMixture {
  Vector pi_tilde;        // pi_j(x) a_j(x), normalized
  Vector log_a;           // log a_j(x)
  double log_k = 0.0;     // log sum_j pi_j(x) a_j(x)
  Vector weights;         // normalized per-row weights of f
  Vector ess_model;       // per-component ESS in (0, 1]
  double ess = 1.0;       // mixture ESS in (0, 1]
  Vector expected_score;  // E_f[s]
  double expected_utility = 0.0;
};

BPDSMixture tilted_mixture(const ScorePool& pool, const Vector& pi, const Vector& tau);

std::string stage_name(Stage s);

}  // namespace bpds::synthesis
