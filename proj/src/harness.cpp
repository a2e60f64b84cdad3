#include "bpds/harness.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace bpds::harness {

using nlohmann::json;

namespace {

json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector vector_from(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void say(const RunOptions& opts, const std::string& msg) {
  if (opts.log) opts.log(msg);
}

io::OptimizerRow optimizer_row(const std::string& target, const optimize::OptimizationReport& r) {
  return {target, r.evaluations, r.restarts, r.multimodal, r.budget_exhausted, r.best_value};
}

}  // namespace

json Carry::to_json() const {
  json j;
  j["prior"] = vector_json(prior);
  j["bma_weights"] = vector_json(bma_weights);
  j["tau"] = vector_json(tau);
  j["x_models"] = json::array();
  for (const auto& x : x_models) j["x_models"].push_back(vector_json(x));
  j["x_bpds"] = vector_json(x_bpds);
  j["x_bma"] = vector_json(x_bma);
  j["processed"] = processed;
  return j;
}

Carry Carry::from_json(const json& j) {
  Carry c;
  c.prior = vector_from(j.at("prior"));
  c.bma_weights = vector_from(j.at("bma_weights"));
  c.tau = vector_from(j.at("tau"));
  for (const auto& x : j.at("x_models")) c.x_models.push_back(vector_from(x));
  c.x_bpds = vector_from(j.at("x_bpds"));
  c.x_bma = vector_from(j.at("x_bma"));
  c.processed = j.at("processed").get<int>();
  return c;
}

std::vector<ModelContext> resolve_models(const config::RunConfig& cfg) {
  std::vector<ModelContext> out;
  for (const auto& m : cfg.models) {
    ModelContext ctx;
    ctx.name = m.name;
    ctx.spec.names = m.variables;
    ctx.spec.lags = m.lags;
    ctx.spec.policy_index = ctx.spec.index_of(cfg.policy);
    ctx.spec.inflation_index = ctx.spec.index_of(cfg.inflation);
    ctx.spec.growth_index = ctx.spec.index_of(cfg.growth);
    ctx.spec.validate();
    ctx.signs = m.sign_matrix(ctx.spec);
    ctx.common = {ctx.spec.policy_index, ctx.spec.inflation_index, ctx.spec.growth_index};
    out.push_back(std::move(ctx));
  }
  return out;
}

PosteriorCache::PosteriorCache(const config::RunConfig& cfg, const io::ModelDataset& data, const std::vector<ModelContext>& models)
    : cfg_(cfg), data_(data), models_(models) {}

const bvar::VARPosterior& PosteriorCache::get(int model, Eigen::Index rows) {
  const auto key = std::make_pair(model, rows);
  const auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  const auto& ctx = models_.at(static_cast<std::size_t>(model));
  const Matrix y = data_.select(ctx.spec.names, rows);
  const auto grid = bvar::default_grid(cfg_.prior_base, cfg_.grid_overall, cfg_.grid_cross);
  const auto prior = bvar::select_hyperparameters(y, ctx.spec, grid);
  return cache_.emplace(key, bvar::fit(y, ctx.spec, prior)).first->second;
}

void PosteriorCache::prune_below(Eigen::Index rows) {
  for (auto it = cache_.begin(); it != cache_.end();) {
    it = it->first.second < rows ? cache_.erase(it) : std::next(it);
  }
}

Eigen::Index start_row(const config::RunConfig& cfg, const io::ModelDataset& data) {
  if (cfg.start_date.empty()) return cfg.start_index;
  const auto q = io::Quarter::parse(cfg.start_date);
  const auto it = std::find(data.dates.begin(), data.dates.end(), q);
  if (it == data.dates.end()) throw ConfigError("start quarter " + cfg.start_date + " is not in the dataset");
  return it - data.dates.begin();
}

io::Quarter quarter_at(const io::ModelDataset& data, Eigen::Index row) {
  if (row < static_cast<Eigen::Index>(data.dates.size())) return data.dates[static_cast<std::size_t>(row)];
  return io::Quarter::from_ordinal(data.dates.back().ordinal() + static_cast<int>(row - static_cast<Eigen::Index>(data.dates.size()) + 1));
}

std::uint64_t optimizer_seed(const config::RunConfig& cfg, const io::Quarter& date) {
  return derive_seed(cfg.seed, {static_cast<std::uint64_t>(date.ordinal()), 0, 3});
}

QuarterSetup prepare_quarter(const config::RunConfig& cfg, const io::ModelDataset& data, const std::vector<ModelContext>& models,
                             PosteriorCache& cache, Eigen::Index row, const Vector& prior) {
  if (row < 1 || row > data.values.rows()) throw ConfigError("decision quarter outside the dataset");
  QuarterSetup s;
  s.row = row;
  s.date = quarter_at(data, row);
  const auto ord = static_cast<std::uint64_t>(s.date.ordinal());
  s.x_prev = data.values(row - 1, data.column(cfg.policy));
  const int jn = static_cast<int>(models.size());
  const int k = cfg.k;

  s.one_step_logdens = Vector::Zero(jn);
  auto& st = s.state;
  st.prior = prior;
  st.pi0 = cfg.pi0;
  st.features = cfg.features;
  st.score = cfg.score;
  st.score.x_prev = s.x_prev;
  st.utility = cfg.utility;
  st.utility.x_prev = s.x_prev;
  st.target = cfg.target;
  st.tilt = cfg.tilt;
  st.max_halvings = cfg.max_halvings;
  st.baseline_df = cfg.baseline_df;
  st.baseline_inflate = cfg.baseline_inflate;
  for (int j = 0; j < jn; ++j) {
    const auto& ctx = models[static_cast<std::size_t>(j)];
    const int p = ctx.spec.lags;
    if (row < p) throw DataError("not enough history for model '" + ctx.name + "'");
    const auto& post = cache.get(j, row);
    const Matrix history = data.select(ctx.spec.names, row).bottomRows(p);
    forecast::BankOptions bo;
    bo.draws = cfg.draws;
    bo.horizon = k;
    bo.soft = cfg.soft;
    bo.max_tries = cfg.max_tries;
    bo.max_parameter_redraws = cfg.max_parameter_redraws;
    bo.max_gain = cfg.max_gain;
    bo.seed = derive_seed(cfg.seed, {ord, static_cast<std::uint64_t>(j) + 1, 1});
    st.banks.push_back(std::make_shared<const forecast::ConditionalPathBank>(
        forecast::ConditionalPathBank::build(post, ctx.spec, ctx.signs, history, bo)));
  }
  st.model_decisions.assign(static_cast<std::size_t>(jn), Vector::Constant(k, s.x_prev));
  st.baseline_innov = synthesis::baseline_innovations(cfg.baseline_draws, 3 * k, cfg.baseline_df, derive_seed(cfg.seed, {ord, 0, 2}));
  decision::set_baseline_policy_density(st, cfg.baseline_inflate);
  return s;
}

std::vector<optimize::OptimizationReport> compute_model_decisions(const config::RunConfig& cfg, QuarterSetup& setup,
                                                                  const std::vector<Vector>& previous) {
  std::vector<optimize::OptimizationReport> reports;
  const int jn = setup.state.models();
  for (int j = 0; j < jn; ++j) {
    std::optional<Vector> prev;
    if (static_cast<int>(previous.size()) == jn) prev = previous[static_cast<std::size_t>(j)];
    const Vector warm = decision::shifted_warm_start(prev, setup.x_prev, cfg.k);
    auto md = decision::model_optimal_path(*setup.state.banks[static_cast<std::size_t>(j)], setup.state.utility, cfg.bounds(),
                                           cfg.model_budget, warm);
    setup.state.model_decisions[static_cast<std::size_t>(j)] = md.x;
    reports.push_back(std::move(md.report));
  }
  return reports;
}

void apply_frozen_epsilon(const config::RunConfig& cfg, QuarterSetup& setup) {
  if (!cfg.freeze_eps || !cfg.features.tilt) return;
  const auto ev = decision::evaluate_bpds(setup.state, Vector::Constant(cfg.k, setup.x_prev));
  setup.state.target.frozen_eps = ev.eps;
}

std::string config_hash(const config::RunConfig& cfg) {
  const std::string text = config::to_json(cfg).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (const unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return hex64(h);
}

json build_manifest(const config::RunConfig& cfg) {
  json m;
  m["config"] = config::to_json(cfg);
  m["config_hash"] = config_hash(cfg);
  m["master_seed"] = cfg.seed;
  m["version"] = kVersion;
  m["eigen_version"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                       std::to_string(EIGEN_MINOR_VERSION);
  m["seed_scheme"] = "splitmix64 counter mode: banks (quarter, model, 1), baseline (quarter, 0, 2), optimizer (quarter, 0, 3)";
  m["units"] = "percent, annualized";
  return m;
}

RunResult run_backtest(const config::RunConfig& cfg, const RunOptions& opts) {
  const auto data = config::load_dataset(cfg);
  return run_backtest(cfg, data, opts);
}

RunResult run_backtest(const config::RunConfig& cfg, const io::ModelDataset& data, const RunOptions& opts) {
  cfg.validate();
  const auto models = resolve_models(cfg);
  for (const auto& m : models) {
    for (const auto& v : m.spec.names) {
      if (data.column(v) < 0) throw ConfigError("dataset has no column '" + v + "'");
    }
  }
  const int jn = static_cast<int>(models.size());
  const int k = cfg.k;
  const Eigen::Index first = start_row(cfg, data);
  if (first < 2 || first > data.values.rows()) throw ConfigError("start quarter leaves no estimation sample");
  const int policy_col = data.column(cfg.policy);
  const int infl_col = data.column(cfg.inflation);
  const int growth_col = data.column(cfg.growth);

  RunResult result;
  result.artifacts.manifest = build_manifest(cfg);
  for (const auto& m : models) result.artifacts.models.push_back(m.name);
  result.artifacts.k = k;

  Carry carry;
  carry.prior = Vector::Constant(jn, 1.0 / jn);
  carry.bma_weights = carry.prior;
  const std::filesystem::path state_path = opts.out_dir.empty() ? std::filesystem::path{} : opts.out_dir / "state.json";
  if (!opts.out_dir.empty() && opts.resume && std::filesystem::exists(state_path)) {
    const json st = json::parse(io::read_text(state_path));
    if (st.at("config_hash").get<std::string>() != config_hash(cfg)) {
      throw ConfigError("output directory holds a run with a different configuration");
    }
    carry = Carry::from_json(st.at("carry"));
    result.artifacts = io::load_run(opts.out_dir);
    result.artifacts.manifest = build_manifest(cfg);
    say(opts, "resuming after " + std::to_string(carry.processed) + " quarters");
  }

  PosteriorCache cache(cfg, data, models);
  const auto checkpoint = [&] {
    if (opts.out_dir.empty()) return;
    io::persist_run(result.artifacts, opts.out_dir);
    json st;
    st["config_hash"] = config_hash(cfg);
    st["carry"] = carry.to_json();
    io::write_text_atomic(state_path, st.dump(2) + "\n");
  };

  int newly = 0;
  const int total = std::min<int>(cfg.quarters, static_cast<int>(data.values.rows() - first + 1));
  while (carry.processed < total) {
    if (opts.stop_after >= 0 && newly >= opts.stop_after) {
      result.completed = false;
      checkpoint();
      return result;
    }
    const Eigen::Index row = first + carry.processed;
    const bool first_quarter = carry.processed == 0;
    const auto clock = std::chrono::steady_clock::now();
    io::QuarterRecord rec;
    rec.quarter = quarter_at(data, row).to_string();
    try {
      // Prior update from the quarter just observed (row - 1).
      Vector prior = carry.prior;
      Vector bma = carry.bma_weights;
      Vector logdens = Vector::Zero(jn);
      if (!first_quarter) {
        std::vector<Vector> realized;
        for (int j = 0; j < jn; ++j) {
          const auto& ctx = models[static_cast<std::size_t>(j)];
          const auto& post = cache.get(j, row - 1);
          const Matrix hist = data.select(ctx.spec.names, row - 1).bottomRows(ctx.spec.lags);
          const Vector z = data.select(ctx.spec.names, row).row(row - 1).transpose();
          Vector zc(static_cast<Eigen::Index>(ctx.common.size()));
          for (std::size_t i = 0; i < ctx.common.size(); ++i) zc(static_cast<Eigen::Index>(i)) = z(ctx.common[i]);
          logdens(j) = forecast::one_step_log_density(post, hist, ctx.common, zc);
        }
        const bool avs = cfg.features.tilt && carry.tau.size() >= 2 && static_cast<int>(carry.x_models.size()) == jn;
        if (avs) {
          scoring::ScoreSpec one = cfg.score;
          one.k = 1;
          one.x_prev = data.values(row - 2, policy_col);
          for (int j = 0; j < jn; ++j) {
            realized.push_back(scoring::score_vector(Vector::Constant(1, data.values(row - 1, infl_col)),
                                                     Vector::Constant(1, data.values(row - 1, growth_col)),
                                                     Vector::Constant(1, carry.x_models[static_cast<std::size_t>(j)](0)), one));
          }
        }
        prior = synthesis::update_prior_probabilities({prior, synthesis::Stage::kPrior}, cfg.gamma, logdens, realized,
                                                      avs ? Vector(carry.tau.head(2)) : Vector())
                    .weights;
        bma = synthesis::update_prior_probabilities({bma, synthesis::Stage::kPrior}, 1.0, logdens, {}, Vector()).weights;
      }
      cache.prune_below(row - 1);

      QuarterSetup setup = prepare_quarter(cfg, data, models, cache, row, prior);
      setup.one_step_logdens = logdens;
      const auto model_reports = compute_model_decisions(cfg, setup, carry.x_models);
      apply_frozen_epsilon(cfg, setup);
      const auto& state = setup.state;
      const auto bounds = cfg.bounds();
      const Vector flat = Vector::Constant(k, setup.x_prev);
      const std::optional<Vector> prev_bpds = carry.x_bpds.size() == k ? std::optional<Vector>(carry.x_bpds) : std::nullopt;
      const std::optional<Vector> prev_bma = carry.x_bma.size() == k ? std::optional<Vector>(carry.x_bma) : std::nullopt;
      std::vector<Vector> warm_bpds{decision::shifted_warm_start(prev_bpds, setup.x_prev, k), flat};
      std::vector<Vector> warm_bma{decision::shifted_warm_start(prev_bma, setup.x_prev, k), flat};
      for (const auto& x : state.model_decisions) {
        warm_bpds.push_back(x);
        warm_bma.push_back(x);
      }
      const auto seed = optimizer_seed(cfg, setup.date);
      const auto bpds_opt = decision::bpds_optimal_path(state, bounds, cfg.swarm, seed, warm_bpds);
      const auto bma_opt = decision::bma_optimal_path(state, bma, bounds, cfg.swarm, seed, warm_bma);
      const auto ev = decision::evaluate_bpds(state, bpds_opt.x);

      rec.x_prev = setup.x_prev;
      rec.x_bpds = bpds_opt.x;
      rec.x_bma = bma_opt.x;
      rec.x_models = state.model_decisions;
      rec.prior_models = prior;
      rec.pi_prior = ev.pi.weights;
      rec.pi_x = ev.pi_x.weights;
      rec.pi_tilde = ev.pi_tilde.weights;
      rec.bma_weights = bma;
      rec.tau = ev.tilt.tau;
      rec.residual = ev.tilt.residual;
      rec.tilt_converged = cfg.features.tilt && !ev.tilt_fallback && ev.tilt.converged;
      rec.eps = ev.eps;
      rec.halvings = ev.halvings;
      rec.clamped = ev.target.clamped;
      rec.direction_gain = ev.direction_gain;
      rec.ess_model = ev.mixture.ess_model;
      rec.ess = ev.mixture.ess;
      rec.m_p = ev.target.m_p;
      rec.m_f = ev.target.m_f;
      rec.expected_score = ev.mixture.expected_score;
      rec.eu_bpds = ev.expected_utility;
      rec.eu_initial = ev.initial_utility;
      rec.eu_bma = decision::bma_expected_utility(state, bma, bma_opt.x);
      rec.eu_bpds_at_bma = decision::bpds_expected_utility(state, bma_opt.x);
      rec.eu_models = Vector(jn);
      for (int j = 0; j < jn; ++j) rec.eu_models(j) = model_reports[static_cast<std::size_t>(j)].best_value;
      rec.one_step_logdens = logdens;
      rec.optimizers.push_back(optimizer_row("bpds", bpds_opt.report));
      rec.optimizers.push_back(optimizer_row("bma", bma_opt.report));
      for (int j = 0; j < jn; ++j) rec.optimizers.push_back(optimizer_row(models[static_cast<std::size_t>(j)].name, model_reports[static_cast<std::size_t>(j)]));
      for (std::size_t i = 0; i < bpds_opt.report.trace.size(); ++i) rec.telemetry.push_back({"bpds", static_cast<int>(i), bpds_opt.report.trace[i]});
      for (std::size_t i = 0; i < bma_opt.report.trace.size(); ++i) rec.telemetry.push_back({"bma", static_cast<int>(i), bma_opt.report.trace[i]});
      if (ev.tilt_fallback) rec.flags.emplace_back("tilt_fallback");
      if (ev.halvings > 0) rec.flags.emplace_back("eps_halved");
      if (ev.target.clamped) rec.flags.emplace_back("target_clamped");
      if (ev.density_underflow) rec.flags.emplace_back("policy_density_underflow");
      if (bpds_opt.report.multimodal) rec.flags.emplace_back("multimodal");
      if (bpds_opt.report.budget_exhausted) rec.flags.emplace_back("budget_exhausted");
      if (ev.tilt_fallback) ++result.flagged_quarters;

      carry.prior = prior;
      carry.bma_weights = bma;
      carry.tau = ev.tilt_fallback ? Vector::Zero(2 * k) : ev.tilt.tau;
      carry.x_models = state.model_decisions;
      carry.x_bpds = bpds_opt.x;
      carry.x_bma = bma_opt.x;
    } catch (const Error& e) {
      rec = io::QuarterRecord{};
      rec.quarter = quarter_at(data, row).to_string();
      rec.failed = true;
      rec.error = e.what();
      rec.flags.emplace_back("failed");
      carry.tau = Vector();
      ++result.flagged_quarters;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock).count();
    say(opts, rec.quarter + (rec.failed ? " failed: " + rec.error : " done") + " in " + std::to_string(secs) + " s");
    result.artifacts.records.push_back(std::move(rec));
    ++carry.processed;
    ++newly;
    checkpoint();
  }
  result.flagged_quarters = static_cast<int>(std::count_if(result.artifacts.records.begin(), result.artifacts.records.end(), [](const io::QuarterRecord& r) {
    return r.failed || std::find(r.flags.begin(), r.flags.end(), "tilt_fallback") != r.flags.end();
  }));
  result.completed = true;
  return result;
}

Summary summarize(const io::RunArtifacts& a) {
  Summary s;
  s.components.emplace_back("baseline");
  s.components.insert(s.components.end(), a.models.begin(), a.models.end());
  const auto jn = static_cast<Eigen::Index>(a.models.size());
  s.mean_pi_tilde = Vector::Zero(jn + 1);
  s.min_pi_tilde = Vector::Constant(jn + 1, 1.0);
  s.max_pi_tilde = Vector::Zero(jn + 1);
  double ess_sum = 0.0;
  s.min_ess = 1.0;
  for (const auto& r : a.records) {
    if (r.failed) {
      ++s.failed;
      continue;
    }
    if (std::find(r.flags.begin(), r.flags.end(), "tilt_fallback") != r.flags.end()) ++s.flagged;
    s.quarters.push_back(r.quarter);
    const double d = r.eu_bpds - r.eu_bma;
    s.delta_eu.push_back(d);
    ++s.compared;
    if (d >= 0.0) ++s.bpds_at_least_bma;
    ess_sum += r.ess;
    s.min_ess = std::min(s.min_ess, r.ess);
    s.mean_pi_tilde += r.pi_tilde;
    s.min_pi_tilde = s.min_pi_tilde.cwiseMin(r.pi_tilde);
    s.max_pi_tilde = s.max_pi_tilde.cwiseMax(r.pi_tilde);
  }
  if (s.compared == 0) {
    s.warnings.emplace_back("no successfully processed quarters");
    s.min_ess = 0.0;
    s.min_pi_tilde.setZero();
    return s;
  }
  s.fraction_bpds_ge_bma = static_cast<double>(s.bpds_at_least_bma) / s.compared;
  s.mean_ess = ess_sum / s.compared;
  s.mean_pi_tilde /= static_cast<double>(s.compared);
  if (s.failed > 0) s.warnings.push_back(std::to_string(s.failed) + " quarter(s) failed");
  return s;
}

json to_json(const Summary& s) {
  json j;
  j["quarters"] = s.quarters;
  j["delta_eu"] = s.delta_eu;
  j["compared"] = s.compared;
  j["bpds_at_least_bma"] = s.bpds_at_least_bma;
  j["fraction_bpds_ge_bma"] = s.fraction_bpds_ge_bma;
  j["mean_ess"] = s.mean_ess;
  j["min_ess"] = s.min_ess;
  j["components"] = s.components;
  j["mean_pi_tilde"] = vector_json(s.mean_pi_tilde);
  j["min_pi_tilde"] = vector_json(s.min_pi_tilde);
  j["max_pi_tilde"] = vector_json(s.max_pi_tilde);
  j["failed"] = s.failed;
  j["flagged"] = s.flagged;
  j["warnings"] = s.warnings;
  return j;
}

std::string format_summary(const Summary& s) {
  std::ostringstream out;
  for (const auto& w : s.warnings) out << "warning: " << w << "\n";
  if (s.compared == 0) return out.str();
  out << "quarter  dEU(BPDS-BMA)\n";
  for (std::size_t i = 0; i < s.quarters.size(); ++i) out << s.quarters[i] << "  " << format_double(s.delta_eu[i]) << "\n";
  out << "quarters compared: " << s.compared << "\n";
  out << "BPDS >= BMA in " << s.bpds_at_least_bma << " of " << s.compared << " quarters (fraction "
      << format_double(s.fraction_bpds_ge_bma) << ")\n";
  out << "mixture ESS mean " << format_double(s.mean_ess) << ", min " << format_double(s.min_ess) << "\n";
  out << "tilted weights (mean / min / max):\n";
  for (std::size_t j = 0; j < s.components.size(); ++j) {
    const auto i = static_cast<Eigen::Index>(j);
    out << "  " << s.components[j] << ": " << format_double(s.mean_pi_tilde(i)) << " / " << format_double(s.min_pi_tilde(i)) << " / "
        << format_double(s.max_pi_tilde(i)) << "\n";
  }
  out << "failed quarters: " << s.failed << ", flagged: " << s.flagged << "\n";
  return out.str();
}

}  // namespace bpds::harness
