#pragma once

#include "bpds/common.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace bpds::io {

struct OptimizerRow {
  std::string target;  // "bpds", "bma" or a model name
  int evaluations = 0;
  int restarts = 0;
  bool multimodal = false;
  bool budget_exhausted = false;
  double best_value = 0.0;
};

struct TelemetryRow {
  std::string target;
  int iteration = 0;
  double best_value = 0.0;
};

/// One processed quarter. Probability vectors over components put the baseline
/// first, then the models in roster order.
struct QuarterRecord {
  std::string quarter;
  bool failed = false;
  std::vector<std::string> flags;
  std::string error;
  double x_prev = 0.0;

  Vector x_bpds;
  Vector x_bma;
  std::vector<Vector> x_models;

  Vector prior_models;  // prior over models before the baseline is inserted
  Vector pi_prior;
  Vector pi_x;
  Vector pi_tilde;
  Vector bma_weights;  // models only

  Vector tau;
  double residual = 0.0;
  bool tilt_converged = false;
  double eps = 0.0;
  int halvings = 0;
  bool clamped = false;
  double direction_gain = 0.0;

  Vector ess_model;
  double ess = 1.0;

  Vector m_p;
  Vector m_f;
  Vector expected_score;

  double eu_bpds = 0.0;
  double eu_bma = 0.0;
  double eu_initial = 0.0;
  double eu_bpds_at_bma = 0.0;
  Vector eu_models;
  Vector one_step_logdens;

  std::vector<OptimizerRow> optimizers;
  std::vector<TelemetryRow> telemetry;
};

struct RunArtifacts {
  nlohmann::json manifest = nlohmann::json::object();
  std::vector<std::string> models;
  int k = 0;
  std::vector<QuarterRecord> records;
};

/// Writes manifest.json plus decisions, weights, tilting, targets, utilities,
/// optimizer and telemetry CSVs. Each file is replaced atomically.
void persist_run(const RunArtifacts& artifacts, const std::filesystem::path& dir);
RunArtifacts load_run(const std::filesystem::path& dir);

/// Writes to a temporary sibling and renames it over `path`.
void write_text_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_text(const std::filesystem::path& path);

/// Minimal RFC 4180 helpers.
std::vector<std::string> split_csv_line(const std::string& line);
std::string csv_field(const std::string& value);
double parse_double(const std::string& text);

}  // namespace bpds::io
