#pragma once

#include "bpds/config.hpp"
#include "bpds/decision.hpp"
#include "bpds/run_store.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace bpds::harness {

inline constexpr const char* kVersion = "0.1.0";

/// Per-model setup resolved against the dataset.
struct ModelContext {
  std::string name;
  bvar::VARSpec spec;
  bvar::SignMatrix signs;
  std::vector<int> common;  // policy, inflation, growth positions within the model
};

std::vector<ModelContext> resolve_models(const config::RunConfig& cfg);

/// State carried from one quarter to the next.
struct Carry {
  Vector prior;        // pi over models, before the baseline is inserted
  Vector bma_weights;  // cumulative one-step-density weights
  Vector tau;          // last solved tilting vector (empty: none)
  std::vector<Vector> x_models;
  Vector x_bpds;
  Vector x_bma;
  int processed = 0;

  [[nodiscard]] nlohmann::json to_json() const;
  static Carry from_json(const nlohmann::json& j);
};

/// Fits every model on the first `rows` observations with marginal-likelihood
/// selected hyperparameters. Results are cached by (model, rows).
class PosteriorCache {
 public:
  PosteriorCache(const config::RunConfig& cfg, const io::ModelDataset& data, const std::vector<ModelContext>& models);
  const bvar::VARPosterior& get(int model, Eigen::Index rows);
  void prune_below(Eigen::Index rows);

 private:
  const config::RunConfig& cfg_;
  const io::ModelDataset& data_;
  const std::vector<ModelContext>& models_;
  std::map<std::pair<int, Eigen::Index>, bvar::VARPosterior> cache_;
};

/// Inputs shared by the backtest and the scenario service for one decision quarter.
struct QuarterSetup {
  Eigen::Index row = 0;  // decision quarter: data through row - 1 is known
  io::Quarter date;
  double x_prev = 0.0;
  decision::QuarterState state;
  Vector one_step_logdens;
};

/// Row index of the first decision quarter.
Eigen::Index start_row(const config::RunConfig& cfg, const io::ModelDataset& data);
io::Quarter quarter_at(const io::ModelDataset& data, Eigen::Index row);

/// Builds banks, baseline inputs and specs for the decision quarter at `row`. The
/// prior and model decisions are filled in by the caller (`model_decisions` may be
/// computed afterwards with compute_model_decisions).
QuarterSetup prepare_quarter(const config::RunConfig& cfg, const io::ModelDataset& data, const std::vector<ModelContext>& models,
                             PosteriorCache& cache, Eigen::Index row, const Vector& prior);

/// Trust-region model decisions from shifted warm starts; fills state.model_decisions.
std::vector<optimize::OptimizationReport> compute_model_decisions(const config::RunConfig& cfg, QuarterSetup& setup,
                                                                  const std::vector<Vector>& previous);

/// Fixes epsilon for the quarter at its value at the flat path when requested.
void apply_frozen_epsilon(const config::RunConfig& cfg, QuarterSetup& setup);

std::uint64_t optimizer_seed(const config::RunConfig& cfg, const io::Quarter& date);

struct RunOptions {
  std::filesystem::path out_dir;  // empty: nothing is persisted
  bool resume = true;
  /// Stop after this many newly processed quarters (negative: no limit).
  int stop_after = -1;
  std::function<void(const std::string&)> log;
};

struct RunResult {
  io::RunArtifacts artifacts;
  int flagged_quarters = 0;
  bool completed = false;
};

RunResult run_backtest(const config::RunConfig& cfg, const RunOptions& opts = {});
/// Same, on an explicitly supplied dataset (used for truncation checks).
RunResult run_backtest(const config::RunConfig& cfg, const io::ModelDataset& data, const RunOptions& opts = {});

std::string config_hash(const config::RunConfig& cfg);
nlohmann::json build_manifest(const config::RunConfig& cfg);

struct Summary {
  std::vector<std::string> quarters;
  std::vector<double> delta_eu;  // BPDS - BMA
  int compared = 0;
  int bpds_at_least_bma = 0;
  double fraction_bpds_ge_bma = 0.0;
  double mean_ess = 0.0;
  double min_ess = 0.0;
  std::vector<std::string> components;  // baseline, models
  Vector mean_pi_tilde;
  Vector min_pi_tilde;
  Vector max_pi_tilde;
  int failed = 0;
  int flagged = 0;
  std::vector<std::string> warnings;
};

Summary summarize(const io::RunArtifacts& artifacts);
nlohmann::json to_json(const Summary& s);
std::string format_summary(const Summary& s);

}  // namespace bpds::harness
