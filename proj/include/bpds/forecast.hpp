#pragma once

#include "bpds/bvar.hpp"
#include "bpds/common.hpp"

#include <cstdint>
#include <vector>

namespace bpds::forecast {

/// H y_{T+1:T+h} = c + e, e ~ N(0, I_{nh}).
struct StackedSystem {
  Matrix H;
  Vector c;
  int n = 0;
  int horizon = 0;
};

/// `history` holds the last p observations, oldest first (p x n).
StackedSystem build_stacked_system(const bvar::StructuralDraw& draw, const Matrix& history, int horizon);

struct PathGaussian {
  Vector mean;
  Matrix cov;
};

/// m = H^{-1} c, M = (H'H)^{-1} = H^{-1} H^{-T}, from a factorization of H.
PathGaussian unconditional_path(const StackedSystem& sys);

/// R y ~ N(r, Omega).
struct ConstraintSet {
  Matrix R;
  Vector r;
  Matrix omega;
};

/// Conditions a Gaussian path on the linear restrictions: m* = m + A(r - Rm),
/// M* = M + A(Omega - RMR')A', A = MR'(RMR')^{-1}. Throws when RMR' is singular.
PathGaussian condition_path(const PathGaussian& path, const ConstraintSet& cons);

/// Policy-rate coordinates first (one row per element of x, Omega_0 = R_0 M R_0'
/// when soft, zero otherwise), then one row W H per non-policy shock and horizon
/// with w = W c and Psi = I.
ConstraintSet assemble_policy_constraints(const PathGaussian& path, const StackedSystem& sys, const Vector& x, bool soft,
                                          int policy_variable, int policy_shock);

/// Monte Carlo sample of the tracked outcomes for one model at one decision.
/// Columns: inflation h=1..k, growth h=1..k, policy rate h=1..k.
struct PredictiveSample {
  RowMatrix draws;
  Vector weights;
  int model = 0;
  Vector conditioned_on;

  [[nodiscard]] int horizon() const { return static_cast<int>(draws.cols() / 3); }
  [[nodiscard]] Eigen::Index size() const { return draws.rows(); }
};

struct BankOptions {
  int draws = 5000;
  int horizon = 8;
  bool soft = true;
  int max_tries = 1000;
  int max_parameter_redraws = 100;
  /// Structural draws whose decision gain ||G_d||_2 exceeds this bound are
  /// redrawn (non-positive disables the check). A policy shock with almost no
  /// contemporaneous rate response makes the conditioning map explode.
  double max_gain = 25.0;
  std::uint64_t seed = 1;
};

struct BankStats {
  long long rotations_tried = 0;
  long long parameter_redraws = 0;
  long long gain_rejections = 0;
};

/// Per-draw affine representation of the conditional predictive. For each
/// parameter/rotation draw d with fixed innovations, the tracked outcomes at a
/// decision x are base_d + G_d x, so common random numbers hold across every x.
class ConditionalPathBank {
 public:
  ConditionalPathBank() = default;
  /// `base` is N x 3k (row-major), `gains` stacks the 3k x k matrices G_d row-wise,
  /// `policy_means` is N x k, and `policy_factors` are the lower Cholesky factors of
  /// each draw's unconditional policy-path covariance.
  ConditionalPathBank(RowMatrix base, Matrix gains, RowMatrix policy_means, std::vector<Matrix> policy_factors);

  static ConditionalPathBank build(const bvar::VARPosterior& post, const bvar::VARSpec& spec, const bvar::SignMatrix& signs,
                                   const Matrix& history, const BankOptions& opts);

  [[nodiscard]] Eigen::Index size() const { return base_.rows(); }
  [[nodiscard]] int horizon() const { return horizon_; }

  /// Tracked outcomes at decision x (N x 3k).
  void sample_into(const Vector& x, RowMatrix& out) const;
  [[nodiscard]] PredictiveSample sample(const Vector& x) const;

  /// log (1/N) sum_d N(x; m_x(d), M_x(d)). `underflow` is set when every draw's
  /// density underflows; the result is then the finite log-sum-exp of log densities.
  [[nodiscard]] double policy_log_density(const Vector& x, bool* underflow = nullptr) const;

  /// Mean and covariance of the unconditional policy-path mixture.
  [[nodiscard]] Vector policy_mixture_mean() const;
  [[nodiscard]] Matrix policy_mixture_cov() const;

  [[nodiscard]] const BankStats& stats() const { return stats_; }

 private:
  RowMatrix base_;
  Matrix gains_;
  RowMatrix policy_means_;
  std::vector<Matrix> policy_factors_;
  std::vector<double> policy_log_norm_;
  int horizon_ = 0;
  BankStats stats_;
};

/// Identified structural draw, redrawing parameters when identification is rejected.
bvar::StructuralDraw draw_structural(const bvar::VARPosterior& post, const bvar::SignMatrix& signs, int max_tries,
                                     int max_parameter_redraws, Rng& rng, BankStats* stats = nullptr);

PredictiveSample sample_conditional_paths(const bvar::VARPosterior& post, const bvar::VARSpec& spec,
                                          const bvar::SignMatrix& signs, const Matrix& history, const Vector& x, int count,
                                          int horizon, std::uint64_t seed, bool soft = true);

double policy_path_log_density(const bvar::VARPosterior& post, const bvar::VARSpec& spec, const bvar::SignMatrix& signs,
                               const Matrix& history, const Vector& x, int count, int horizon, std::uint64_t seed);

/// Closed-form one-step predictive (matrix Student-t) log density of the
/// variables `common` at their observed values `z`, given the posterior and the
/// last p observations (oldest first).
double one_step_log_density(const bvar::VARPosterior& post, const Matrix& history, const std::vector<int>& common,
                            const Vector& z);

}  // namespace bpds::forecast
