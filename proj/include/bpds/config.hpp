#pragma once

#include "bpds/bvar.hpp"
#include "bpds/data_io.hpp"
#include "bpds/decision.hpp"
#include "bpds/optimize.hpp"
#include "bpds/scoring.hpp"
#include "bpds/synthesis.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace bpds::config {

/// Named sign table entry: required impact signs of one shock.
struct ShockSigns {
  std::string shock;
  std::vector<std::pair<std::string, int>> signs;  // (variable, +1/-1)
};

struct ModelConfig {
  std::string name;
  std::vector<std::string> variables;
  int lags = 5;
  /// "default" (built-in table), "none", or "table" with `table` entries.
  std::string sign_mode = "default";
  std::vector<ShockSigns> table;

  [[nodiscard]] bvar::SignMatrix sign_matrix(const bvar::VARSpec& spec) const;
};

struct DataConfig {
  std::optional<io::SynthConfig> synthetic;
  std::filesystem::path csv;
  io::ColumnMap columns;
  std::vector<io::Transform> transforms;  // empty: identity
};

struct RunConfig {
  DataConfig data;
  std::vector<ModelConfig> models;
  std::string policy = "rate";
  std::string inflation = "inflation";
  std::string growth = "growth";

  int k = 8;
  double gamma = 0.95;
  double pi0 = 0.1;
  scoring::ScoreSpec score;
  scoring::UtilitySpec utility;
  synthesis::TargetRule target;
  bool freeze_eps = false;
  synthesis::TiltOptions tilt;
  int max_halvings = 6;
  double baseline_df = 10.0;
  double baseline_inflate = 2.0;

  int draws = 5000;
  int baseline_draws = 5000;
  int max_tries = 1000;
  int max_parameter_redraws = 100;
  double max_gain = 25.0;
  bool soft = true;

  bvar::ConjugatePrior prior_base;
  int grid_overall = 5;
  int grid_cross = 5;

  optimize::SwarmConfig swarm;
  int model_budget = 200;
  double lower = -10.0;
  double upper = 15.0;

  decision::FeatureToggles features;
  std::uint64_t seed = 20240501;

  /// First decision quarter, as a row index into the transformed dataset or a date.
  int start_index = 60;
  std::string start_date;
  int quarters = 40;

  void validate() const;
  [[nodiscard]] optimize::Bounds bounds() const { return optimize::Bounds::box(k, lower, upper); }
};

RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);

io::SynthConfig parse_synth_config(const nlohmann::json& j);
io::SynthConfig load_synth_config(const std::filesystem::path& path);
nlohmann::json to_json(const io::SynthConfig& cfg);

/// Loads or simulates the panel and applies the transforms.
io::ModelDataset load_dataset(const RunConfig& cfg);

}  // namespace bpds::config
