#pragma once

#include "bpds/common.hpp"
#include "bpds/forecast.hpp"
#include "bpds/optimize.hpp"
#include "bpds/scoring.hpp"
#include "bpds/synthesis.hpp"

#include <memory>
#include <optional>
#include <vector>

namespace bpds::decision {

struct FeatureToggles {
  bool tilt = true;
  bool decision_conditioning = true;
  bool baseline = true;
};

/// Everything a BPDS evaluation at a candidate x needs for one quarter. Immutable
/// once built; safe to share across threads.
struct QuarterState {
  std::vector<std::shared_ptr<const forecast::ConditionalPathBank>> banks;  // one per model
  Vector prior;                        // pi_t over models 1..J
  double pi0 = 0.1;
  std::vector<Vector> model_decisions; // x_j
  Vector baseline_policy_mean;         // location of the baseline policy-path density
  Matrix baseline_policy_cov;          // covariance of the baseline policy-path density
  double baseline_df = 10.0;
  double baseline_inflate = 2.0;
  synthesis::BaselineInnovations baseline_innov;
  scoring::ScoreSpec score;
  scoring::UtilitySpec utility;
  synthesis::TargetRule target;
  synthesis::TiltOptions tilt;
  int max_halvings = 6;
  FeatureToggles features;

  [[nodiscard]] int models() const { return static_cast<int>(banks.size()); }
  [[nodiscard]] int k() const { return utility.k; }
  void validate() const;
};

/// Baseline policy-path location/covariance: the prior-weighted mixture of the
/// models' unconditional policy-path mixtures, covariance inflated by `inflate`.
void set_baseline_policy_density(QuarterState& state, double inflate);

struct Evaluation {
  Vector x;
  synthesis::ModelProbabilities pi;        // with baseline at index 0
  synthesis::ModelProbabilities pi_x;      // decision-conditioned
  synthesis::ModelProbabilities pi_tilde;  // after tilting
  Vector path_logdens;                     // per component, baseline first
  synthesis::TargetScore target;
  synthesis::TiltingVector tilt;
  synthesis::BPDSMixture mixture;
  double expected_utility = 0.0;           // E_f[U]
  double initial_utility = 0.0;            // E_p[U] under pi(x), no tilt
  double eps = 0.0;                        // standardized improvement actually used
  int halvings = 0;
  bool tilt_fallback = false;              // tau forced to zero
  bool density_underflow = false;
  /// q_1'(E_f[s] - m_p), the realized gain along the dominant score direction.
  double direction_gain = 0.0;
  /// Pooled draws (rows aligned with the score pool) when requested.
  RowMatrix pooled_draws;
  Vector initial_weights;
};

Evaluation evaluate_bpds(const QuarterState& state, const Vector& x, bool keep_draws = false);
double bpds_expected_utility(const QuarterState& state, const Vector& x);

/// Monte Carlo E_{p_j}[U | x] for one model under common random numbers.
double model_expected_utility(const forecast::ConditionalPathBank& bank, const Vector& x, const scoring::UtilitySpec& utility);

struct ModelDecision {
  Vector x;
  optimize::OptimizationReport report;
};

/// Trust-region maximization of a single model's expected utility from `warm_start`
/// (flat at x_prev when empty).
ModelDecision model_optimal_path(const forecast::ConditionalPathBank& bank, const scoring::UtilitySpec& utility,
                                 const optimize::Bounds& bounds, int budget, const std::optional<Vector>& warm_start = std::nullopt);

/// Expected utility under the mixture sum_j w_j p_j(y | x): no baseline, no tilt
/// and no decision conditioning. Evaluated through the same pooled computation as
/// the untilted BPDS path, so the two agree bit for bit when BPDS features are off.
double bma_expected_utility(const QuarterState& state, const Vector& bma_weights, const Vector& x);

ModelDecision bma_optimal_path(const QuarterState& state, const Vector& bma_weights, const optimize::Bounds& bounds,
                               const optimize::SwarmConfig& swarm, std::uint64_t seed, const std::vector<Vector>& warm_starts = {},
                               const optimize::Progress& progress = {});

ModelDecision bpds_optimal_path(const QuarterState& state, const optimize::Bounds& bounds, const optimize::SwarmConfig& swarm,
                                std::uint64_t seed, const std::vector<Vector>& warm_starts = {},
                                const optimize::Progress& progress = {});

/// Previous decision shifted one period (last value repeated), or flat at x_prev.
Vector shifted_warm_start(const std::optional<Vector>& previous, double x_prev, int k);

}  // namespace bpds::decision
