#include "bpds/forecast.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace bpds::forecast {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

int resolve_policy_shock(const bvar::SignMatrix& signs, const bvar::VARSpec& spec) {
  const int idx = signs.shock_index(bvar::kMonetaryPolicyShock);
  return idx >= 0 ? idx : spec.policy_index;
}

Matrix tracked_selection(const bvar::VARSpec& spec, int horizon) {
  const int n = spec.n();
  Matrix s = Matrix::Zero(3 * horizon, static_cast<Eigen::Index>(n) * horizon);
  for (int h = 0; h < horizon; ++h) {
    s(h, h * n + spec.inflation_index) = 1.0;
    s(horizon + h, h * n + spec.growth_index) = 1.0;
    s(2 * horizon + h, h * n + spec.policy_index) = 1.0;
  }
  return s;
}

}  // namespace

StackedSystem build_stacked_system(const bvar::StructuralDraw& draw, const Matrix& history, int horizon) {
  if (horizon < 1) throw DomainError("forecast horizon must be >= 1");
  const int n = static_cast<int>(draw.impact.rows());
  const int p = static_cast<int>(draw.lags.size());
  if (history.rows() != p || history.cols() != n) {
    throw DomainError("history must hold exactly p = " + std::to_string(p) + " rows of " + std::to_string(n) + " variables");
  }
  StackedSystem sys;
  sys.n = n;
  sys.horizon = horizon;
  sys.H = Matrix::Zero(static_cast<Eigen::Index>(n) * horizon, static_cast<Eigen::Index>(n) * horizon);
  sys.c.resize(static_cast<Eigen::Index>(n) * horizon);
  for (int i = 0; i < horizon; ++i) {
    sys.H.block(i * n, i * n, n, n) = draw.impact;
    for (int j = 1; j <= p && i - j >= 0; ++j) sys.H.block(i * n, (i - j) * n, n, n) = -draw.lags[j - 1];
    Vector ci = draw.intercept;
    // Lags that reach back into the observed history: y_{T+1+i-j} with j > i.
    for (int j = i + 1; j <= p; ++j) ci += draw.lags[j - 1] * history.row(p - (j - i)).transpose();
    sys.c.segment(i * n, n) = ci;
  }
  return sys;
}

PathGaussian unconditional_path(const StackedSystem& sys) {
  Eigen::PartialPivLU<Matrix> lu(sys.H);
  const double det = lu.determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-300) throw NumericalError("singular stacked system H");
  PathGaussian out;
  out.mean = lu.solve(sys.c);
  const Matrix h_inv = lu.solve(Matrix::Identity(sys.H.rows(), sys.H.cols()));
  out.cov = h_inv * h_inv.transpose();
  return out;
}

PathGaussian condition_path(const PathGaussian& path, const ConstraintSet& cons) {
  const Matrix rm = cons.R * path.cov;
  const Matrix rmr = rm * cons.R.transpose();
  Eigen::LDLT<Matrix> ldlt(0.5 * (rmr + rmr.transpose()));
  const Vector d = ldlt.vectorD().cwiseAbs();
  if (ldlt.info() != Eigen::Success || d.size() == 0 || d.minCoeff() <= 1e-14 * std::max(d.maxCoeff(), 1e-300)) {
    throw NumericalError("singular RMR' in conditioning");
  }
  const Matrix gain = ldlt.solve(rm).transpose();  // A = M R' (R M R')^{-1}
  PathGaussian out;
  out.mean = path.mean + gain * (cons.r - cons.R * path.mean);
  out.cov = path.cov + gain * (cons.omega - rmr) * gain.transpose();
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  return out;
}

ConstraintSet assemble_policy_constraints(const PathGaussian& path, const StackedSystem& sys, const Vector& x, bool soft,
                                          int policy_variable, int policy_shock) {
  const int n = sys.n;
  const int h = sys.horizon;
  const auto k = static_cast<int>(x.size());
  if (k < 1 || k > h) throw DomainError("policy path length must be in [1, horizon]");
  if (policy_variable < 0 || policy_variable >= n || policy_shock < 0 || policy_shock >= n) {
    throw DomainError("policy variable or shock index out of range");
  }
  if (path.mean.size() != static_cast<Eigen::Index>(n) * h) throw DomainError("path dimension mismatch");
  const int w = (n - 1) * h;
  ConstraintSet cons;
  cons.R = Matrix::Zero(k + w, static_cast<Eigen::Index>(n) * h);
  cons.r.resize(k + w);
  cons.omega = Matrix::Zero(k + w, k + w);
  for (int i = 0; i < k; ++i) cons.R(i, i * n + policy_variable) = 1.0;
  cons.r.head(k) = x;
  if (soft) {
    const Matrix r0 = cons.R.topRows(k);
    cons.omega.topLeftCorner(k, k) = r0 * path.cov * r0.transpose();
  }
  int row = k;
  for (int t = 0; t < h; ++t) {
    for (int s = 0; s < n; ++s) {
      if (s == policy_shock) continue;
      cons.R.row(row) = sys.H.row(t * n + s);
      cons.r(row) = sys.c(t * n + s);
      cons.omega(row, row) = 1.0;
      ++row;
    }
  }
  return cons;
}

ConditionalPathBank::ConditionalPathBank(RowMatrix base, Matrix gains, RowMatrix policy_means, std::vector<Matrix> policy_factors)
    : base_(std::move(base)),
      gains_(std::move(gains)),
      policy_means_(std::move(policy_means)),
      policy_factors_(std::move(policy_factors)),
      horizon_(static_cast<int>(policy_means_.cols())) {
  if (base_.cols() != 3 * horizon_ || gains_.rows() != base_.rows() * base_.cols() || gains_.cols() != horizon_ ||
      policy_means_.rows() != base_.rows() || static_cast<Eigen::Index>(policy_factors_.size()) != base_.rows()) {
    throw DomainError("inconsistent path bank dimensions");
  }
  policy_log_norm_.resize(policy_factors_.size());
  for (std::size_t d = 0; d < policy_factors_.size(); ++d) {
    policy_log_norm_[d] =
        -policy_factors_[d].diagonal().array().log().sum() - 0.5 * horizon_ * kLogTwoPi;
  }
}

bvar::StructuralDraw draw_structural(const bvar::VARPosterior& post, const bvar::SignMatrix& signs, int max_tries,
                                     int max_parameter_redraws, Rng& rng, BankStats* stats) {
  for (int attempt = 0; attempt <= max_parameter_redraws; ++attempt) {
    const auto params = bvar::sample_parameter(post, rng);
    auto res = bvar::identify(params, signs, max_tries, rng);
    if (stats) {
      stats->rotations_tried += res.tries;
      if (attempt > 0) ++stats->parameter_redraws;
    }
    if (res.draw) return std::move(*res.draw);
  }
  throw IdentificationError("sign restrictions rejected " + std::to_string(max_parameter_redraws + 1) +
                            " parameter draws");
}

ConditionalPathBank ConditionalPathBank::build(const bvar::VARPosterior& post, const bvar::VARSpec& spec,
                                               const bvar::SignMatrix& signs, const Matrix& history, const BankOptions& opts) {
  if (opts.draws < 1) throw DomainError("draw count must be >= 1");
  spec.validate();
  const int k = opts.horizon;
  const int policy_shock = resolve_policy_shock(signs, spec);
  const Matrix select = tracked_selection(spec, k);
  const auto count = static_cast<std::size_t>(opts.draws);

  RowMatrix base(opts.draws, 3 * k);
  Matrix gains(static_cast<Eigen::Index>(opts.draws) * 3 * k, k);
  RowMatrix means(opts.draws, k);
  std::vector<Matrix> factors(count);
  std::vector<BankStats> per_draw(count);

  parallel_for(count, [&](std::size_t d) {
    Rng rng(derive_seed(opts.seed, {d}));
    for (int attempt = 0;; ++attempt) {
      const auto sdraw = draw_structural(post, signs, opts.max_tries, opts.max_parameter_redraws, rng, &per_draw[d]);
      const auto sys = build_stacked_system(sdraw, history, k);
      const auto path = unconditional_path(sys);
      const auto cons = assemble_policy_constraints(path, sys, Vector::Zero(k), opts.soft, spec.policy_index, policy_shock);

      const Matrix rm = cons.R * path.cov;
      const Matrix rmr = rm * cons.R.transpose();
      Eigen::LDLT<Matrix> ldlt(0.5 * (rmr + rmr.transpose()));
      const Vector dd = ldlt.vectorD().cwiseAbs();
      const bool singular = ldlt.info() != Eigen::Success || dd.minCoeff() <= 1e-14 * dd.maxCoeff();
      Matrix sa;
      if (!singular) sa = ldlt.solve(rm * select.transpose()).transpose();  // S A, 3k x r
      const bool admissible =
          !singular && (opts.max_gain <= 0.0 || Eigen::JacobiSVD<Matrix>(sa.leftCols(k)).singularValues()(0) <= opts.max_gain);
      if (!admissible) {
        ++per_draw[d].gain_rejections;
        if (attempt >= opts.max_tries) {
          throw IdentificationError("no structural draw with a bounded policy-path gain in " + std::to_string(opts.max_tries + 1) +
                                    " attempts");
        }
        continue;
      }
      Matrix tracked_cov = select * path.cov * select.transpose() + sa * (cons.omega - rmr) * sa.transpose();
      const Matrix factor = floored_factor(tracked_cov, 1e-12);

      const Vector policy_mean = cons.R.topRows(k) * path.mean;
      const Matrix sa_x = sa.leftCols(k);
      const Vector innov = standard_normal(rng, 3 * k);
      base.row(static_cast<Eigen::Index>(d)) = (select * path.mean - sa_x * policy_mean + factor * innov).transpose();
      gains.middleRows(static_cast<Eigen::Index>(d) * 3 * k, 3 * k) = sa_x;
      means.row(static_cast<Eigen::Index>(d)) = policy_mean.transpose();
      const Matrix r0 = cons.R.topRows(k);
      Eigen::LLT<Matrix> pl(r0 * path.cov * r0.transpose());
      factors[d] = pl.info() == Eigen::Success ? Matrix(pl.matrixL()) : floored_factor(r0 * path.cov * r0.transpose(), 1e-12);
      break;
    }
  });

  ConditionalPathBank bank(std::move(base), std::move(gains), std::move(means), std::move(factors));
  for (const auto& s : per_draw) {
    bank.stats_.rotations_tried += s.rotations_tried;
    bank.stats_.parameter_redraws += s.parameter_redraws;
    bank.stats_.gain_rejections += s.gain_rejections;
  }
  return bank;
}

void ConditionalPathBank::sample_into(const Vector& x, RowMatrix& out) const {
  if (x.size() != horizon_) throw DomainError("decision length does not match bank horizon");
  const Vector shift = gains_ * x;
  out = base_ + Eigen::Map<const RowMatrix>(shift.data(), base_.rows(), base_.cols());
}

PredictiveSample ConditionalPathBank::sample(const Vector& x) const {
  PredictiveSample s;
  sample_into(x, s.draws);
  s.weights = Vector::Constant(size(), 1.0 / static_cast<double>(size()));
  s.conditioned_on = x;
  return s;
}

double ConditionalPathBank::policy_log_density(const Vector& x, bool* underflow) const {
  if (x.size() != horizon_) throw DomainError("decision length does not match bank horizon");
  Vector logs(size());
  for (Eigen::Index d = 0; d < size(); ++d) {
    const Vector diff = x - policy_means_.row(d).transpose();
    const Vector u = policy_factors_[d].triangularView<Eigen::Lower>().solve(diff);
    logs(d) = policy_log_norm_[d] - 0.5 * u.squaredNorm();
  }
  if (underflow) *underflow = logs.maxCoeff() < std::log(std::numeric_limits<double>::min());
  return log_sum_exp(logs) - std::log(static_cast<double>(size()));
}

Vector ConditionalPathBank::policy_mixture_mean() const { return policy_means_.colwise().mean().transpose(); }

Matrix ConditionalPathBank::policy_mixture_cov() const {
  const Vector mu = policy_mixture_mean();
  Matrix acc = Matrix::Zero(horizon_, horizon_);
  for (Eigen::Index d = 0; d < size(); ++d) {
    const Vector dev = policy_means_.row(d).transpose() - mu;
    acc += policy_factors_[d] * policy_factors_[d].transpose() + dev * dev.transpose();
  }
  return acc / static_cast<double>(size());
}

PredictiveSample sample_conditional_paths(const bvar::VARPosterior& post, const bvar::VARSpec& spec,
                                          const bvar::SignMatrix& signs, const Matrix& history, const Vector& x, int count,
                                          int horizon, std::uint64_t seed, bool soft) {
  BankOptions opts;
  opts.draws = count;
  opts.horizon = horizon;
  opts.soft = soft;
  opts.seed = seed;
  return ConditionalPathBank::build(post, spec, signs, history, opts).sample(x);
}

double policy_path_log_density(const bvar::VARPosterior& post, const bvar::VARSpec& spec, const bvar::SignMatrix& signs,
                               const Matrix& history, const Vector& x, int count, int horizon, std::uint64_t seed) {
  BankOptions opts;
  opts.draws = count;
  opts.horizon = horizon;
  opts.seed = seed;
  return ConditionalPathBank::build(post, spec, signs, history, opts).policy_log_density(x);
}

double one_step_log_density(const bvar::VARPosterior& post, const Matrix& history, const std::vector<int>& common,
                            const Vector& z) {
  const int n = post.n;
  const int p = post.lags;
  if (history.rows() != p || history.cols() != n) throw DomainError("history must hold exactly p rows");
  if (static_cast<Eigen::Index>(common.size()) != z.size() || common.empty()) throw DomainError("observation size mismatch");
  Vector xr(1 + n * p);
  xr(0) = 1.0;
  for (int l = 1; l <= p; ++l) xr.segment(1 + (l - 1) * n, n) = history.row(p - l).transpose();
  const double dof = post.iw_dof - n + 1.0;
  const Vector loc = post.mean.transpose() * xr;
  const double inflate = 1.0 + xr.dot(post.coef_scale * xr);
  const auto d = static_cast<Eigen::Index>(common.size());
  Vector dev(d);
  Matrix scale(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    dev(i) = z(i) - loc(common[i]);
    for (Eigen::Index j = 0; j < d; ++j) scale(i, j) = post.iw_scale(common[i], common[j]) * inflate / dof;
  }
  Eigen::LLT<Matrix> llt(scale);
  if (llt.info() != Eigen::Success) throw NumericalError("predictive scale not positive definite");
  const Matrix l = llt.matrixL();
  const double maha = l.triangularView<Eigen::Lower>().solve(dev).squaredNorm();
  const double logdet = 2.0 * l.diagonal().array().log().sum();
  return std::lgamma(0.5 * (dof + d)) - std::lgamma(0.5 * dof) - 0.5 * d * std::log(dof * std::numbers::pi) -
         0.5 * logdet - 0.5 * (dof + d) * std::log1p(maha / dof);
}

}  // namespace bpds::forecast
