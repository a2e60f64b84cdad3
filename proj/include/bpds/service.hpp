#pragma once

#include "bpds/harness.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>

namespace httplib {
class Server;
}

namespace bpds::service {

struct ServiceOptions {
  /// Either a run directory (holding manifest.json) or a directory of run directories.
  std::filesystem::path artifacts;
  std::size_t cache_capacity = 8;
  std::string cors_origin = "*";
  /// Upper bound on optimizer evaluations a single request may ask for.
  int max_budget = 20000;
};

/// JSON reply with an HTTP status.
struct Reply {
  int status = 200;
  nlohmann::json body;
};

class ScenarioService {
 public:
  explicit ScenarioService(ServiceOptions opts);
  ~ScenarioService();
  ScenarioService(const ScenarioService&) = delete;
  ScenarioService& operator=(const ScenarioService&) = delete;

  /// Registers every route on `server`.
  void mount(httplib::Server& server);

  Reply list_runs();
  Reply trajectories(const std::string& run, const std::string& from, const std::string& to, int page, int page_size);
  Reply scenario(const nlohmann::json& request);

  /// Optimization for one recorded quarter. Progress lines are passed to `emit`
  /// as they are produced; the final reply carries x* and the report. Without a
  /// pinned seed, the seed is derived from the run seed and a per-request nonce.
  /// A negative budget means the run's configured optimizer budget.
  Reply optimize(const std::string& run, const std::string& quarter, int budget, std::uint64_t seed, bool seed_given,
                 const std::function<void(const nlohmann::json&)>& emit);
  /// Claims (run, quarter) for an optimization; false when one is already in flight.
  bool claim(const std::string& run, const std::string& quarter);
  void release(const std::string& run, const std::string& quarter);

 private:
  struct RunHandle;
  struct LoadedQuarter;

  std::shared_ptr<RunHandle> run_handle(const std::string& id, Reply& err);
  std::shared_ptr<const LoadedQuarter> quarter_state(const std::shared_ptr<RunHandle>& run, const std::string& quarter, bool soft,
                                                     Reply& err, bool& cold);

  ServiceOptions opts_;
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<RunHandle>> runs_;
  std::list<std::pair<std::string, std::shared_ptr<const LoadedQuarter>>> lru_;
  std::set<std::string> loading_;
  std::set<std::string> in_flight_;
  std::uint64_t nonce_ = 0;
};

/// Serves until the process is stopped. Returns false when the port cannot be bound.
bool serve(const ServiceOptions& opts, const std::string& host, int port);

}  // namespace bpds::service
