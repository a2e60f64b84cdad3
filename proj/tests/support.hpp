#pragma once

#include "bpds/config.hpp"

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("bpds_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Stable 5-variable VAR(1): a 3-variable core (rate, inflation, growth) that
/// drives two auxiliary series.
inline bpds::io::SynthConfig five_variable_dgp(int length, std::uint64_t seed = 7) {
  bpds::io::SynthConfig c;
  c.names = {"rate", "inflation", "growth", "credit", "spread"};
  c.lags = 1;
  c.intercept.resize(5);
  c.intercept << 0.3, 0.45, 1.2, 0.4, 0.1;
  bpds::Matrix a(5, 5);
  a << 0.80, 0.15, 0.10, 0, 0,
      -0.05, 0.75, 0.10, 0, 0,
      -0.10, 0.00, 0.50, 0, 0,
       0.00, 0.00, 0.20, 0.60, 0,
       0.10, 0.00, 0.00, 0, 0.50;
  c.coefficients = {a};
  c.shock_cov = bpds::Matrix::Zero(5, 5);
  c.shock_cov.diagonal() << 0.25, 0.16, 0.5, 0.3, 0.1;
  c.shock_cov(0, 1) = c.shock_cov(1, 0) = 0.03;
  c.shock_cov(0, 2) = c.shock_cov(2, 0) = 0.05;
  c.length = length;
  c.burn_in = 500;
  c.seed = seed;
  c.start = bpds::io::Quarter{1996, 1};
  return c;
}

/// Small, fast backtest configuration on the synthetic panel.
inline bpds::config::RunConfig small_run_config(int quarters, int draws = 200) {
  bpds::config::RunConfig cfg;
  cfg.data.synthetic = five_variable_dgp(60 + quarters + 2);
  bpds::config::ModelConfig core;
  core.name = "core3";
  core.variables = {"rate", "inflation", "growth"};
  core.lags = 2;
  bpds::config::ModelConfig wide;
  wide.name = "wide5";
  wide.variables = {"rate", "inflation", "growth", "credit", "spread"};
  wide.lags = 2;
  cfg.models = {core, wide};
  cfg.draws = draws;
  cfg.baseline_draws = draws;
  cfg.start_index = 60;
  cfg.quarters = quarters;
  cfg.swarm.particles = 10;
  cfg.swarm.iterations = 6;
  cfg.swarm.local_budget = 50;
  cfg.swarm.extra_refinements = 1;
  cfg.swarm.extra_budget = 20;
  cfg.model_budget = 50;
  cfg.grid_overall = 3;
  cfg.grid_cross = 2;
  cfg.validate();
  return cfg;
}

}  // namespace testing
