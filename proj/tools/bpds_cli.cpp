#include "bpds/config.hpp"
#include "bpds/harness.hpp"
#include "bpds/run_store.hpp"
#include "bpds/service.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kPartial = 3;

int cmd_run(const std::string& config_path, const std::string& out, bool quiet) {
  const auto cfg = bpds::config::load_run_config(config_path);
  bpds::harness::RunOptions opts;
  opts.out_dir = out;
  if (!quiet) opts.log = [](const std::string& line) { std::cerr << line << '\n'; };
  const auto result = bpds::harness::run_backtest(cfg, opts);
  std::cout << bpds::harness::format_summary(bpds::harness::summarize(result.artifacts));
  return result.flagged_quarters > 0 ? kPartial : kOk;
}

int cmd_summarize(const std::string& in, bool as_json) {
  const auto artifacts = bpds::io::load_run(in);
  const auto summary = bpds::harness::summarize(artifacts);
  if (as_json) {
    std::cout << bpds::harness::to_json(summary).dump(2) << '\n';
  } else {
    std::cout << bpds::harness::format_summary(summary);
  }
  return summary.failed + summary.flagged > 0 ? kPartial : kOk;
}

int cmd_simulate(const std::string& config_path, const std::string& out) {
  const auto cfg = bpds::config::load_synth_config(config_path);
  const auto panel = bpds::io::simulate_dgp(cfg);
  bpds::io::write_quarterly_csv(panel, out);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian predictive decision synthesis for policy-rate paths"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out;
  std::string in;
  bool quiet = false;
  bool as_json = false;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t cache = 8;

  auto* run = app.add_subcommand("run", "Run the recursive backtest and persist artifacts");
  run->add_option("--config", config_path, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "Artifact directory")->required();
  run->add_flag("--quiet", quiet, "Suppress per-quarter progress on stderr");

  auto* summarize = app.add_subcommand("summarize", "Summarize a persisted run");
  summarize->add_option("--in", in, "Artifact directory")->required()->check(CLI::ExistingDirectory);
  summarize->add_flag("--json", as_json, "Print the summary as JSON");

  auto* simulate = app.add_subcommand("simulate", "Simulate a synthetic quarterly panel to CSV");
  simulate->add_option("--config", config_path, "Synthetic DGP configuration (JSON)")->required()->check(CLI::ExistingFile);
  simulate->add_option("--out", out, "Output CSV")->required();

  auto* serve = app.add_subcommand("serve", "Serve the scenario API over persisted runs");
  serve->add_option("--artifacts", in, "Run directory or directory of runs")->required()->check(CLI::ExistingDirectory);
  serve->add_option("--port", port, "Port")->check(CLI::Range(1, 65535));
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--cache", cache, "Quarter states kept in memory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(config_path, out, quiet);
    if (*summarize) return cmd_summarize(in, as_json);
    if (*simulate) return cmd_simulate(config_path, out);
    if (*serve) {
      bpds::service::ServiceOptions opts;
      opts.artifacts = in;
      opts.cache_capacity = cache;
      std::cerr << "listening on http://" << host << ':' << port << '\n';
      if (!bpds::service::serve(opts, host, port)) {
        std::cerr << "error: cannot listen on " << host << ':' << port << '\n';
        return 1;
      }
      return kOk;
    }
  } catch (const bpds::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const bpds::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kOk;
}
