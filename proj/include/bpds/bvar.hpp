#pragma once

#include "bpds/common.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bpds::bvar {

/// Variables (in model order), lag order and the roles of the three tracked series.
struct VARSpec {
  std::vector<std::string> names;
  int lags = 1;
  int policy_index = 0;
  int inflation_index = 1;
  int growth_index = 2;

  [[nodiscard]] int n() const { return static_cast<int>(names.size()); }
  /// Regressors per equation: intercept plus n*lags lagged values.
  [[nodiscard]] int regressors() const { return 1 + n() * lags; }
  [[nodiscard]] int index_of(const std::string& name) const;
  void validate() const;
};

/// Minnesota-style natural-conjugate prior (matrix-normal / inverse-Wishart).
///
/// Coefficient prior variance for lag l of variable i in equation j is
///   Sigma_jj * (overall_tightness * cross_lag_tightness^(l-1))^2 / s_i^2
/// and the intercept variance is Sigma_jj * intercept_looseness^2. The prior mean
/// puts `own_lag_mean` on each variable's own first lag. The inverse-Wishart has
/// n + 2 degrees of freedom and scale diag(s_i^2), so E[Sigma] = diag(s_i^2).
struct ConjugatePrior {
  double overall_tightness = 0.2;
  double cross_lag_tightness = 1.0;
  double intercept_looseness = 100.0;
  double own_lag_mean = 1.0;
  /// Residual scales s_i. Empty means: AR(1) residual standard deviations of the data.
  std::vector<double> residual_scales;

  void validate() const;
};

/// Log-spaced grid: overall tightness in [0.01, 1] x cross-lag tightness in [0.1, 1].
std::vector<ConjugatePrior> default_grid(const ConjugatePrior& base, int overall_points = 5, int cross_points = 5);

struct VARPosterior {
  Matrix mean;       // K x n posterior mean of B (row 0 intercept, then lag blocks)
  Matrix coef_scale; // K x K row covariance V_n
  Matrix iw_scale;   // n x n inverse-Wishart scale S_n
  double iw_dof = 0; // nu_n
  int observations = 0;
  int n = 0;
  int lags = 0;

  /// Posterior covariance of vec(B) (column-stacked): E[Sigma] (x) V_n.
  [[nodiscard]] Matrix coefficient_covariance() const;
};

/// Reduced-form parameters y_t = c + sum_l B_l y_{t-l} + u_t, u_t ~ N(0, Sigma).
struct ReducedFormDraw {
  Matrix coefficients;  // K x n, same layout as VARPosterior::mean
  Matrix covariance;    // n x n

  [[nodiscard]] Vector intercept() const { return coefficients.row(0).transpose(); }
  /// B_l as an n x n matrix acting on y_{t-l} (l is 1-based).
  [[nodiscard]] Matrix lag(int l) const;
};

/// Builds (Y, X) regression matrices from rows of `data` (T x n).
void regression_matrices(const Matrix& data, int lags, Matrix& y, Matrix& x);

/// AR(1) residual standard deviations per column.
std::vector<double> ar1_residual_scales(const Matrix& data);

VARPosterior fit(const Matrix& data, const VARSpec& spec, const ConjugatePrior& prior);
double log_marginal_likelihood(const Matrix& data, const VARSpec& spec, const ConjugatePrior& prior);

/// Argmax of the log marginal likelihood over `grid`; ties go to the tighter prior.
ConjugatePrior select_hyperparameters(const Matrix& data, const VARSpec& spec, std::span<const ConjugatePrior> grid);

ReducedFormDraw sample_parameter(const VARPosterior& post, Rng& rng);
/// Draw i uses derive_seed(seed, {i}), so any subset can be regenerated independently.
std::vector<ReducedFormDraw> sample_parameters(const VARPosterior& post, int count, std::uint64_t seed);

/// Required impact signs, variables x shocks, entries in {-1, 0, +1}.
struct SignMatrix {
  Eigen::MatrixXi signs;                 // n x (number of labelled shocks)
  std::vector<std::string> shock_labels; // column labels

  struct Restriction {
    std::string variable;
    std::string shock;
    int sign = 0;
  };

  /// Validates conflicting duplicates, unknown variables and empty shock columns.
  static SignMatrix from_restrictions(const std::vector<std::string>& variables, const std::vector<std::string>& shocks,
                                      const std::vector<Restriction>& restrictions);
  /// Monetary shock raises the rate, lowers inflation and growth; demand raises all
  /// three; supply raises growth and lowers inflation.
  static SignMatrix default_for(const VARSpec& spec);
  /// No restrictions at all (every rotation is accepted).
  static SignMatrix empty(int n);

  [[nodiscard]] bool is_empty() const { return signs.size() == 0 || (signs.array() == 0).all(); }
  [[nodiscard]] int shock_index(const std::string& label) const;
};

inline constexpr const char* kMonetaryPolicyShock = "monetary_policy";

/// Structural form A_0 y_t = a + sum_l A_l y_{t-l} + e_t, e_t ~ N(0, I).
struct StructuralDraw {
  Vector intercept;          // a
  std::vector<Matrix> lags;  // A_1..A_p
  Matrix impact;             // A_0
  Matrix impact_inverse;     // A_0^{-1}; its columns are the impact responses to each shock
  std::vector<std::string> shock_labels;
};

struct IdentifyResult {
  std::optional<StructuralDraw> draw;
  int tries = 0;
};

/// Haar-uniform orthogonal matrix via QR with sign-fixed R diagonal.
Matrix haar_orthogonal(Rng& rng, int n);

/// True when the impact matrix satisfies the signs, after flipping restricted
/// columns whose negation satisfies them. Unrestricted columns are normalized to a
/// positive diagonal entry. Modifies `impact_inverse` in place.
bool apply_sign_restrictions(Matrix& impact_inverse, const SignMatrix& signs);

IdentifyResult identify(const ReducedFormDraw& draw, const SignMatrix& signs, int max_tries, Rng& rng);
IdentifyResult identify(const ReducedFormDraw& draw, const SignMatrix& signs, int max_tries, std::uint64_t seed);

}  // namespace bpds::bvar
