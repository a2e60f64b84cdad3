#include "bpds/bvar.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace bpds::bvar {

namespace {

double log_multivariate_gamma(double a, int n) {
  double out = 0.25 * n * (n - 1) * std::log(std::numbers::pi);
  for (int i = 1; i <= n; ++i) out += std::lgamma(a + 0.5 * (1 - i));
  return out;
}

struct PriorMoments {
  Matrix mean;      // B_0
  Vector row_var;   // diag(V_0)
  Matrix iw_scale;  // S_0
  double iw_dof = 0;
};

PriorMoments prior_moments(const Matrix& data, const VARSpec& spec, const ConjugatePrior& prior) {
  const int n = spec.n();
  const int k = spec.regressors();
  std::vector<double> scales = prior.residual_scales;
  if (scales.empty()) scales = ar1_residual_scales(data);
  if (static_cast<int>(scales.size()) != n) throw ConfigError("residual_scales length must equal variable count");

  PriorMoments pm;
  pm.mean = Matrix::Zero(k, n);
  for (int i = 0; i < n; ++i) pm.mean(1 + i, i) = prior.own_lag_mean;
  pm.row_var.resize(k);
  pm.row_var(0) = prior.intercept_looseness * prior.intercept_looseness;
  for (int l = 1; l <= spec.lags; ++l) {
    const double sd = prior.overall_tightness * std::pow(prior.cross_lag_tightness, l - 1);
    for (int i = 0; i < n; ++i) pm.row_var(1 + (l - 1) * n + i) = sd * sd / (scales[i] * scales[i]);
  }
  pm.iw_dof = n + 2.0;
  pm.iw_scale = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i) pm.iw_scale(i, i) = scales[i] * scales[i] * (pm.iw_dof - n - 1.0);
  return pm;
}

struct Fitted {
  VARPosterior post;
  PriorMoments prior;
  double log_det_precision = 0;  // log |V_0^{-1} + X'X|
};

Fitted fit_impl(const Matrix& data, const VARSpec& spec, const ConjugatePrior& prior) {
  spec.validate();
  prior.validate();
  const int n = spec.n();
  if (data.cols() != n) throw ConfigError("data has " + std::to_string(data.cols()) + " columns, spec expects " + std::to_string(n));
  if (data.rows() <= spec.lags) {
    throw DataError("need more than p = " + std::to_string(spec.lags) + " rows, got " + std::to_string(data.rows()));
  }
  Matrix y;
  Matrix x;
  regression_matrices(data, spec.lags, y, x);

  Fitted f;
  f.prior = prior_moments(data, spec, prior);
  const Vector prior_prec = f.prior.row_var.cwiseInverse();
  Matrix precision = x.transpose() * x;
  precision.diagonal() += prior_prec;
  Eigen::LLT<Matrix> llt(precision);
  if (llt.info() != Eigen::Success) throw NumericalError("posterior precision not positive definite");
  const Matrix rhs = x.transpose() * y + prior_prec.asDiagonal() * f.prior.mean;

  auto& post = f.post;
  post.n = n;
  post.lags = spec.lags;
  post.observations = static_cast<int>(y.rows());
  post.mean = llt.solve(rhs);
  post.coef_scale = llt.solve(Matrix::Identity(precision.rows(), precision.cols()));
  post.coef_scale = 0.5 * (post.coef_scale + post.coef_scale.transpose());
  const Matrix resid = y - x * post.mean;
  const Matrix dev = post.mean - f.prior.mean;
  post.iw_scale = f.prior.iw_scale + resid.transpose() * resid + dev.transpose() * prior_prec.asDiagonal() * dev;
  post.iw_scale = 0.5 * (post.iw_scale + post.iw_scale.transpose());
  post.iw_dof = f.prior.iw_dof + static_cast<double>(y.rows());
  f.log_det_precision = 2.0 * Matrix(llt.matrixL()).diagonal().array().log().sum();
  return f;
}

}  // namespace

int VARSpec::index_of(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ConfigError("variable '" + name + "' not in model");
  return static_cast<int>(it - names.begin());
}

void VARSpec::validate() const {
  const int dim = n();
  if (dim < 1) throw ConfigError("VAR needs at least one variable");
  if (lags < 1) throw ConfigError("VAR lag order must be >= 1");
  for (const int idx : {policy_index, inflation_index, growth_index}) {
    if (idx < 0 || idx >= dim) throw ConfigError("role index out of range");
  }
  if (dim >= 3 && (policy_index == inflation_index || policy_index == growth_index || inflation_index == growth_index)) {
    throw ConfigError("policy, inflation and growth indices must be distinct");
  }
}

void ConjugatePrior::validate() const {
  if (!(overall_tightness > 0) || !(cross_lag_tightness > 0) || !(intercept_looseness > 0)) {
    throw ConfigError("prior hyperparameters must be positive");
  }
  for (const double s : residual_scales) {
    if (!(s > 0)) throw ConfigError("residual scales must be positive");
  }
}

std::vector<ConjugatePrior> default_grid(const ConjugatePrior& base, int overall_points, int cross_points) {
  const auto logspace = [](double lo, double hi, int count) {
    std::vector<double> v;
    for (int i = 0; i < count; ++i) {
      const double t = count == 1 ? 1.0 : static_cast<double>(i) / (count - 1);
      v.push_back(std::exp(std::log(lo) + t * (std::log(hi) - std::log(lo))));
    }
    return v;
  };
  std::vector<ConjugatePrior> grid;
  for (const double o : logspace(0.01, 1.0, overall_points)) {
    for (const double c : logspace(0.1, 1.0, cross_points)) {
      ConjugatePrior p = base;
      p.overall_tightness = o;
      p.cross_lag_tightness = c;
      grid.push_back(p);
    }
  }
  return grid;
}

Matrix VARPosterior::coefficient_covariance() const {
  const Matrix sigma = iw_scale / (iw_dof - n - 1.0);
  const Eigen::Index k = coef_scale.rows();
  Matrix out(k * n, k * n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) out.block(i * k, j * k, k, k) = sigma(i, j) * coef_scale;
  }
  return out;
}

Matrix ReducedFormDraw::lag(int l) const {
  const Eigen::Index n = covariance.rows();
  return coefficients.block(1 + (l - 1) * n, 0, n, n).transpose();
}

void regression_matrices(const Matrix& data, int lags, Matrix& y, Matrix& x) {
  const Eigen::Index n = data.cols();
  const Eigen::Index t = data.rows() - lags;
  if (t < 1) throw DataError("not enough rows for the lag order");
  y = data.bottomRows(t);
  x.resize(t, 1 + n * lags);
  x.col(0).setOnes();
  for (int l = 1; l <= lags; ++l) x.block(0, 1 + (l - 1) * n, t, n) = data.middleRows(lags - l, t);
}

std::vector<double> ar1_residual_scales(const Matrix& data) {
  std::vector<double> out;
  const Eigen::Index t = data.rows() - 1;
  if (t < 3) throw DataError("too few rows to estimate residual scales");
  for (Eigen::Index c = 0; c < data.cols(); ++c) {
    Matrix x(t, 2);
    x.col(0).setOnes();
    x.col(1) = data.col(c).head(t);
    const Vector y = data.col(c).tail(t);
    const Vector b = x.colPivHouseholderQr().solve(y);
    const double ssr = (y - x * b).squaredNorm();
    out.push_back(std::max(std::sqrt(ssr / static_cast<double>(t - 2)), 1e-8));
  }
  return out;
}

VARPosterior fit(const Matrix& data, const VARSpec& spec, const ConjugatePrior& prior) {
  return fit_impl(data, spec, prior).post;
}

double log_marginal_likelihood(const Matrix& data, const VARSpec& spec, const ConjugatePrior& prior) {
  const Fitted f = fit_impl(data, spec, prior);
  const int n = spec.n();
  const double t = f.post.observations;
  Eigen::LLT<Matrix> s0(f.prior.iw_scale);
  Eigen::LLT<Matrix> sn(f.post.iw_scale);
  if (sn.info() != Eigen::Success) throw NumericalError("posterior scale not positive definite");
  const double logdet_s0 = 2.0 * Matrix(s0.matrixL()).diagonal().array().log().sum();
  const double logdet_sn = 2.0 * Matrix(sn.matrixL()).diagonal().array().log().sum();
  const double logdet_v0 = f.prior.row_var.array().log().sum();
  const double logdet_vn = -f.log_det_precision;
  return -0.5 * n * t * std::log(std::numbers::pi) + log_multivariate_gamma(0.5 * f.post.iw_dof, n) -
         log_multivariate_gamma(0.5 * f.prior.iw_dof, n) + 0.5 * f.prior.iw_dof * logdet_s0 -
         0.5 * f.post.iw_dof * logdet_sn + 0.5 * n * (logdet_vn - logdet_v0);
}

ConjugatePrior select_hyperparameters(const Matrix& data, const VARSpec& spec, std::span<const ConjugatePrior> grid) {
  if (grid.empty()) throw ConfigError("hyperparameter grid is empty");
  const auto tighter = [](const ConjugatePrior& a, const ConjugatePrior& b) {
    if (a.overall_tightness != b.overall_tightness) return a.overall_tightness < b.overall_tightness;
    return a.cross_lag_tightness < b.cross_lag_tightness;
  };
  std::size_t best = 0;
  double best_ml = log_marginal_likelihood(data, spec, grid[0]);
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double ml = log_marginal_likelihood(data, spec, grid[i]);
    if (ml > best_ml || (ml == best_ml && tighter(grid[i], grid[best]))) {
      best = i;
      best_ml = ml;
    }
  }
  return grid[best];
}

ReducedFormDraw sample_parameter(const VARPosterior& post, Rng& rng) {
  const int n = post.n;
  Eigen::LLT<Matrix> s_llt(post.iw_scale);
  if (s_llt.info() != Eigen::Success) throw NumericalError("inverse-Wishart scale not positive definite");
  const Matrix s_inv = s_llt.solve(Matrix::Identity(n, n));
  Eigen::LLT<Matrix> prec_llt(0.5 * (s_inv + s_inv.transpose()));
  if (prec_llt.info() != Eigen::Success) throw NumericalError("inverse-Wishart scale not positive definite");
  const Matrix u = prec_llt.matrixL();

  // Bartlett decomposition of W ~ Wishart(S_n^{-1}, nu_n); Sigma = W^{-1}.
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix a = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    std::chi_squared_distribution<double> chi(post.iw_dof - i);
    a(i, i) = std::sqrt(chi(rng));
    for (int j = 0; j < i; ++j) a(i, j) = nd(rng);
  }
  const Matrix c = u * a;  // lower triangular, W = C C'
  const Matrix c_inv = c.triangularView<Eigen::Lower>().solve(Matrix::Identity(n, n));
  ReducedFormDraw draw;
  draw.covariance = c_inv.transpose() * c_inv;
  draw.covariance = 0.5 * (draw.covariance + draw.covariance.transpose());

  Eigen::LLT<Matrix> v_llt(post.coef_scale);
  Eigen::LLT<Matrix> sig_llt(draw.covariance);
  if (v_llt.info() != Eigen::Success || sig_llt.info() != Eigen::Success) throw NumericalError("non-PD scale matrix");
  Matrix z(post.mean.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = nd(rng);
  }
  draw.coefficients = post.mean + Matrix(v_llt.matrixL()) * z * Matrix(sig_llt.matrixL()).transpose();
  return draw;
}

std::vector<ReducedFormDraw> sample_parameters(const VARPosterior& post, int count, std::uint64_t seed) {
  if (count < 1) throw DomainError("sample count must be >= 1");
  std::vector<ReducedFormDraw> out(count);
  parallel_for(static_cast<std::size_t>(count), [&](std::size_t i) {
    Rng rng(derive_seed(seed, {i}));
    out[i] = sample_parameter(post, rng);
  });
  return out;
}

SignMatrix SignMatrix::from_restrictions(const std::vector<std::string>& variables, const std::vector<std::string>& shocks,
                                         const std::vector<Restriction>& restrictions) {
  SignMatrix sm;
  sm.shock_labels = shocks;
  sm.signs = Eigen::MatrixXi::Zero(static_cast<Eigen::Index>(variables.size()), static_cast<Eigen::Index>(shocks.size()));
  if (shocks.size() > variables.size()) throw ConfigError("more labelled shocks than variables");
  for (const auto& r : restrictions) {
    const auto vi = std::find(variables.begin(), variables.end(), r.variable);
    const auto si = std::find(shocks.begin(), shocks.end(), r.shock);
    if (vi == variables.end()) throw ConfigError("sign restriction on unknown variable '" + r.variable + "'");
    if (si == shocks.end()) throw ConfigError("sign restriction on unknown shock '" + r.shock + "'");
    if (r.sign != 1 && r.sign != -1) throw ConfigError("sign restriction entries must be +1 or -1");
    int& cell = sm.signs(vi - variables.begin(), si - shocks.begin());
    if (cell != 0 && cell != r.sign) {
      throw ConfigError("conflicting signs demanded for (" + r.variable + ", " + r.shock + ")");
    }
    cell = r.sign;
  }
  for (std::size_t j = 0; j < shocks.size(); ++j) {
    if ((sm.signs.col(static_cast<Eigen::Index>(j)).array() == 0).all()) {
      throw ConfigError("shock '" + shocks[j] + "' has no sign restriction");
    }
  }
  if (!shocks.empty() && std::find(shocks.begin(), shocks.end(), kMonetaryPolicyShock) == shocks.end()) {
    throw ConfigError("sign table must label a monetary_policy shock");
  }
  return sm;
}

SignMatrix SignMatrix::default_for(const VARSpec& spec) {
  if (spec.n() < 3) throw ConfigError("default sign table needs at least 3 variables");
  const auto& g = spec.names[spec.growth_index];
  const auto& p = spec.names[spec.inflation_index];
  const auto& r = spec.names[spec.policy_index];
  return from_restrictions(spec.names, {"supply", "demand", kMonetaryPolicyShock},
                           {{g, "supply", 1},
                            {p, "supply", -1},
                            {g, "demand", 1},
                            {p, "demand", 1},
                            {r, "demand", 1},
                            {r, kMonetaryPolicyShock, 1},
                            {p, kMonetaryPolicyShock, -1},
                            {g, kMonetaryPolicyShock, -1}});
}

SignMatrix SignMatrix::empty(int n) {
  SignMatrix sm;
  sm.signs = Eigen::MatrixXi::Zero(n, 0);
  return sm;
}

int SignMatrix::shock_index(const std::string& label) const {
  const auto it = std::find(shock_labels.begin(), shock_labels.end(), label);
  return it == shock_labels.end() ? -1 : static_cast<int>(it - shock_labels.begin());
}

Matrix haar_orthogonal(Rng& rng, int n) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix g(n, n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) g(i, j) = nd(rng);
  }
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < n; ++j) {
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  }
  return q;
}

bool apply_sign_restrictions(Matrix& impact_inverse, const SignMatrix& signs) {
  const Eigen::Index n = impact_inverse.cols();
  const Eigen::Index labelled = signs.signs.cols();
  const auto satisfies = [&](const Vector& col, Eigen::Index j) {
    for (Eigen::Index i = 0; i < signs.signs.rows(); ++i) {
      const int s = signs.signs(i, j);
      if (s != 0 && !(s * col(i) > 0.0)) return false;
    }
    return true;
  };
  for (Eigen::Index j = 0; j < n; ++j) {
    const bool restricted = j < labelled && (signs.signs.col(j).array() != 0).any();
    if (restricted) {
      const Vector col = impact_inverse.col(j);
      if (satisfies(col, j)) continue;
      if (satisfies(-col, j)) {
        impact_inverse.col(j) = -col;
        continue;
      }
      return false;
    }
    if (j < impact_inverse.rows() && impact_inverse(j, j) < 0) impact_inverse.col(j) = -impact_inverse.col(j);
  }
  return true;
}

IdentifyResult identify(const ReducedFormDraw& draw, const SignMatrix& signs, int max_tries, Rng& rng) {
  const int n = static_cast<int>(draw.covariance.rows());
  if (signs.signs.rows() != 0 && signs.signs.rows() != n) throw ConfigError("sign table has wrong variable count");
  Eigen::LLT<Matrix> llt(draw.covariance);
  if (llt.info() != Eigen::Success) throw NumericalError("draw covariance not positive definite");
  const Matrix chol = llt.matrixL();
  IdentifyResult res;
  for (int t = 0; t < std::max(1, max_tries); ++t) {
    res.tries = t + 1;
    Matrix impact_inverse = chol * haar_orthogonal(rng, n);
    if (!apply_sign_restrictions(impact_inverse, signs)) continue;
    StructuralDraw s;
    s.impact_inverse = impact_inverse;
    s.impact = impact_inverse.partialPivLu().inverse();
    s.intercept = s.impact * draw.intercept();
    const int p = static_cast<int>((draw.coefficients.rows() - 1) / n);
    for (int l = 1; l <= p; ++l) s.lags.push_back(s.impact * draw.lag(l));
    s.shock_labels = signs.shock_labels;
    res.draw = std::move(s);
    return res;
  }
  return res;
}

IdentifyResult identify(const ReducedFormDraw& draw, const SignMatrix& signs, int max_tries, std::uint64_t seed) {
  Rng rng(seed);
  return identify(draw, signs, max_tries, rng);
}

}  // namespace bpds::bvar
