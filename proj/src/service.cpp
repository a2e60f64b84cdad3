#include "bpds/service.hpp"

#include "httplib.h"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <map>

namespace bpds::service {

using nlohmann::json;
namespace fs = std::filesystem;

struct ScenarioService::RunHandle {
  std::string id;
  fs::path dir;
  io::RunArtifacts artifacts;
  config::RunConfig cfg;
  io::ModelDataset data;
  std::vector<harness::ModelContext> models;
  std::unique_ptr<harness::PosteriorCache> cache;
  std::mutex mu;
};

struct ScenarioService::LoadedQuarter {
  harness::QuarterSetup setup;
  Vector bma;
  io::QuarterRecord record;
  std::size_t record_index = 0;
};

namespace {

constexpr const char* kUnits = "percent, annualized";

json vec(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Reply error_reply(int status, const std::string& message, json extra = json::object()) {
  extra["error"] = message;
  return {status, extra};
}

/// Weighted quantiles of one column; monotone in q by construction.
std::vector<double> weighted_quantiles(const RowMatrix& draws, Eigen::Index col, const Vector& w, const std::vector<double>& qs) {
  std::vector<std::pair<double, double>> pts;
  pts.reserve(static_cast<std::size_t>(draws.rows()));
  for (Eigen::Index i = 0; i < draws.rows(); ++i) {
    if (w(i) > 0.0) pts.emplace_back(draws(i, col), w(i));
  }
  std::sort(pts.begin(), pts.end());
  double total = 0.0;
  for (const auto& p : pts) total += p.second;
  std::vector<double> out;
  double cum = 0.0;
  std::size_t idx = 0;
  for (const double q : qs) {
    while (idx + 1 < pts.size() && cum + pts[idx].second < q * total) {
      cum += pts[idx].second;
      ++idx;
    }
    out.push_back(pts.empty() ? std::nan("") : pts[idx].first);
  }
  return out;
}

json fans(const RowMatrix& draws, const Vector& w, int k, const std::vector<double>& qs) {
  json out;
  const char* names[] = {"inflation", "growth", "rate"};
  for (int v = 0; v < 3; ++v) {
    json per = json::array();
    for (int h = 0; h < k; ++h) per.push_back(weighted_quantiles(draws, v * k + h, w, qs));
    out[names[v]] = per;
  }
  return out;
}

json record_json(const io::QuarterRecord& r, const std::vector<std::string>& models) {
  json j;
  j["quarter"] = r.quarter;
  j["status"] = r.failed ? "failed" : "ok";
  j["flags"] = r.flags;
  if (r.failed) {
    j["error"] = r.error;
    return j;
  }
  j["x_prev"] = r.x_prev;
  j["x_bpds"] = vec(r.x_bpds);
  j["x_bma"] = vec(r.x_bma);
  json xm = json::object();
  for (std::size_t i = 0; i < models.size() && i < r.x_models.size(); ++i) xm[models[i]] = vec(r.x_models[i]);
  j["x_models"] = xm;
  j["weights"] = {{"model_prior", vec(r.prior_models)}, {"prior", vec(r.pi_prior)},     {"decision_conditioned", vec(r.pi_x)},
                  {"tilted", vec(r.pi_tilde)},          {"bma", vec(r.bma_weights)}};
  j["tau"] = vec(r.tau);
  j["residual"] = r.residual;
  j["tilt_converged"] = r.tilt_converged;
  j["eps"] = r.eps;
  j["halvings"] = r.halvings;
  j["clamped"] = r.clamped;
  j["direction_gain"] = r.direction_gain;
  j["ess"] = r.ess;
  j["ess_model"] = vec(r.ess_model);
  j["m_p"] = vec(r.m_p);
  j["m_f"] = vec(r.m_f);
  j["expected_score"] = vec(r.expected_score);
  j["utilities"] = {{"bpds", r.eu_bpds},
                    {"bma", r.eu_bma},
                    {"initial", r.eu_initial},
                    {"bpds_at_bma", r.eu_bpds_at_bma},
                    {"models", vec(r.eu_models)}};
  j["one_step_logdens"] = vec(r.one_step_logdens);
  return j;
}

std::string key_of(const std::string& run, const std::string& quarter) { return run + "|" + quarter; }

}  // namespace

ScenarioService::ScenarioService(ServiceOptions opts) : opts_(std::move(opts)) {}
ScenarioService::~ScenarioService() = default;

std::shared_ptr<ScenarioService::RunHandle> ScenarioService::run_handle(const std::string& id, Reply& err) {
  {
    std::lock_guard lock(mu_);
    const auto it = runs_.find(id);
    if (it != runs_.end()) return it->second;
  }
  fs::path dir;
  if (id.empty() || id.find("..") != std::string::npos || id.find('/') != std::string::npos) {
    err = error_reply(404, "unknown run '" + id + "'");
    return nullptr;
  }
  if (fs::exists(opts_.artifacts / "manifest.json") && opts_.artifacts.filename() == id) {
    dir = opts_.artifacts;
  } else if (fs::exists(opts_.artifacts / id / "manifest.json")) {
    dir = opts_.artifacts / id;
  } else {
    err = error_reply(404, "unknown run '" + id + "'");
    return nullptr;
  }
  auto h = std::make_shared<RunHandle>();
  h->id = id;
  h->dir = dir;
  try {
    h->artifacts = io::load_run(dir);
    h->cfg = config::parse_run_config(h->artifacts.manifest.at("config"));
    h->data = config::load_dataset(h->cfg);
    h->models = harness::resolve_models(h->cfg);
    h->cache = std::make_unique<harness::PosteriorCache>(h->cfg, h->data, h->models);
  } catch (const std::exception& e) {
    err = error_reply(503, std::string("run could not be loaded: ") + e.what());
    return nullptr;
  }
  std::lock_guard lock(mu_);
  return runs_.emplace(id, std::move(h)).first->second;
}

std::shared_ptr<const ScenarioService::LoadedQuarter> ScenarioService::quarter_state(const std::shared_ptr<RunHandle>& run,
                                                                                    const std::string& quarter, bool soft, Reply& err,
                                                                                    bool& cold) {
  const std::string key = key_of(run->id, quarter) + (soft ? "|soft" : "|hard");
  cold = false;
  {
    std::lock_guard lock(mu_);
    for (auto it = lru_.begin(); it != lru_.end(); ++it) {
      if (it->first == key) {
        lru_.splice(lru_.begin(), lru_, it);
        return lru_.front().second;
      }
    }
    if (loading_.count(key)) {
      err = error_reply(503, "quarter state is loading; retry shortly");
      return nullptr;
    }
    loading_.insert(key);
  }
  cold = true;
  std::shared_ptr<LoadedQuarter> loaded;
  try {
    const auto& recs = run->artifacts.records;
    const auto it = std::find_if(recs.begin(), recs.end(), [&](const io::QuarterRecord& r) { return r.quarter == quarter; });
    if (it == recs.end() || it->failed) {
      std::lock_guard lock(mu_);
      loading_.erase(key);
      err = error_reply(404, "unknown quarter '" + quarter + "' for run '" + run->id + "'");
      return nullptr;
    }
    loaded = std::make_shared<LoadedQuarter>();
    loaded->record = *it;
    loaded->record_index = static_cast<std::size_t>(it - recs.begin());
    loaded->bma = it->bma_weights;
    std::lock_guard run_lock(run->mu);
    config::RunConfig cfg = run->cfg;
    cfg.soft = soft;
    const Eigen::Index row = harness::start_row(run->cfg, run->data) + static_cast<Eigen::Index>(loaded->record_index);
    loaded->setup = harness::prepare_quarter(cfg, run->data, run->models, *run->cache, row, it->prior_models);
    loaded->setup.state.model_decisions = it->x_models;
    harness::apply_frozen_epsilon(cfg, loaded->setup);
  } catch (const std::exception& e) {
    std::lock_guard lock(mu_);
    loading_.erase(key);
    err = error_reply(503, std::string("quarter state could not be built: ") + e.what());
    return nullptr;
  }
  std::lock_guard lock(mu_);
  loading_.erase(key);
  lru_.emplace_front(key, loaded);
  while (lru_.size() > std::max<std::size_t>(1, opts_.cache_capacity)) lru_.pop_back();
  return loaded;
}

Reply ScenarioService::list_runs() {
  json ids = json::array();
  if (fs::exists(opts_.artifacts / "manifest.json")) {
    ids.push_back(opts_.artifacts.filename().string());
  } else if (fs::is_directory(opts_.artifacts)) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(opts_.artifacts)) {
      if (e.is_directory() && fs::exists(e.path() / "manifest.json")) names.push_back(e.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    for (const auto& n : names) ids.push_back(n);
  }
  return {200, {{"runs", ids}}};
}

Reply ScenarioService::trajectories(const std::string& run, const std::string& from, const std::string& to, int page, int page_size) {
  Reply err;
  const auto h = run_handle(run, err);
  if (!h) return err;
  if (page < 0 || page_size < 1 || page_size > 500) return error_reply(422, "page must be >= 0 and page_size in [1, 500]");
  std::vector<const io::QuarterRecord*> sel;
  for (const auto& r : h->artifacts.records) {
    if (!from.empty() && r.quarter < from) continue;
    if (!to.empty() && r.quarter > to) continue;
    sel.push_back(&r);
  }
  const int total = static_cast<int>(sel.size());
  const int pages = (total + page_size - 1) / page_size;
  json records = json::array();
  for (int i = page * page_size; i < std::min(total, (page + 1) * page_size); ++i) {
    records.push_back(record_json(*sel[static_cast<std::size_t>(i)], h->artifacts.models));
  }
  json body{{"run", run},          {"models", h->artifacts.models}, {"k", h->artifacts.k},   {"units", kUnits},
            {"total", total},      {"page", page},                  {"page_size", page_size}, {"pages", pages},
            {"records", records}};
  return {200, body};
}

Reply ScenarioService::scenario(const json& req) {
  const auto clock = std::chrono::steady_clock::now();
  if (!req.is_object()) return error_reply(422, "request body must be a JSON object");
  if (!req.contains("run") || !req["run"].is_string()) return error_reply(422, "field 'run' is required");
  if (!req.contains("quarter") || !req["quarter"].is_string()) return error_reply(422, "field 'quarter' is required");
  Reply err;
  const auto h = run_handle(req["run"].get<std::string>(), err);
  if (!h) return err;
  const int k = h->cfg.k;
  if (!req.contains("x") || !req["x"].is_array()) return error_reply(422, "field 'x' must be an array of " + std::to_string(k) + " rates");
  if (static_cast<int>(req["x"].size()) != k) {
    return error_reply(422, "x must have " + std::to_string(k) + " entries", {{"expected_length", k}});
  }
  Vector x(k);
  json violations = json::array();
  for (int i = 0; i < k; ++i) {
    const auto& v = req["x"][static_cast<std::size_t>(i)];
    if (!v.is_number()) return error_reply(422, "x entries must be numbers");
    x(i) = v.get<double>();
    if (!std::isfinite(x(i)) || x(i) < h->cfg.lower || x(i) > h->cfg.upper) violations.push_back({{"index", i}, {"value", x(i)}});
  }
  if (!violations.empty()) {
    return error_reply(422, "x outside bounds", {{"bounds", {{"lower", h->cfg.lower}, {"upper", h->cfg.upper}}}, {"violations", violations}});
  }
  std::vector<double> qs{0.05, 0.2, 0.5, 0.8, 0.95};
  if (req.contains("quantiles")) {
    try {
      qs = req["quantiles"].get<std::vector<double>>();
    } catch (const json::exception&) {
      return error_reply(422, "quantiles must be an array of numbers");
    }
    if (qs.empty() || !std::is_sorted(qs.begin(), qs.end()) ||
        std::any_of(qs.begin(), qs.end(), [](double q) { return !(q > 0.0 && q < 1.0); })) {
      return error_reply(422, "quantiles must be increasing values in (0, 1)");
    }
  }
  decision::FeatureToggles features = h->cfg.features;
  bool soft = h->cfg.soft;
  if (req.contains("features")) {
    const auto& f = req["features"];
    try {
      features.tilt = f.value("tilt", features.tilt);
      features.decision_conditioning = f.value("decision_conditioning", features.decision_conditioning);
      features.baseline = f.value("baseline", features.baseline);
      soft = f.value("soft", soft);
    } catch (const json::exception&) {
      return error_reply(422, "features must hold booleans");
    }
  }
  bool cold = false;
  const auto loaded = quarter_state(h, req["quarter"].get<std::string>(), soft, err, cold);
  if (!loaded) return err;
  decision::QuarterState state = loaded->setup.state;
  state.features = features;
  decision::Evaluation ev;
  double eu_bma = 0.0;
  try {
    ev = decision::evaluate_bpds(state, x, true);
    eu_bma = decision::bma_expected_utility(state, loaded->bma, x);
  } catch (const Error& e) {
    return error_reply(422, std::string("evaluation failed: ") + e.what());
  }
  // BMA fan: model rows weighted by the BMA weights, baseline rows excluded.
  Vector bma_w = Vector::Zero(ev.pooled_draws.rows());
  {
    const Eigen::Index base_rows = ev.pooled_draws.rows() - [&] {
      Eigen::Index n = 0;
      for (const auto& b : state.banks) n += b->size();
      return n;
    }();
    Eigen::Index off = base_rows;
    for (int j = 0; j < state.models(); ++j) {
      const Eigen::Index n = state.banks[static_cast<std::size_t>(j)]->size();
      bma_w.segment(off, n).setConstant(loaded->bma(j) / static_cast<double>(n));
      off += n;
    }
  }
  std::vector<std::string> components{"baseline"};
  components.insert(components.end(), h->artifacts.models.begin(), h->artifacts.models.end());
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - clock).count();
  json body;
  body["run"] = h->id;
  body["quarter"] = req["quarter"];
  body["x"] = vec(x);
  body["units"] = kUnits;
  body["quantiles"] = qs;
  body["fans"] = {{"bpds", fans(ev.pooled_draws, ev.mixture.weights, k, qs)},
                  {"initial", fans(ev.pooled_draws, ev.initial_weights, k, qs)},
                  {"bma", fans(ev.pooled_draws, bma_w, k, qs)}};
  body["weights"] = {{"components", components},
                     {"prior", vec(ev.pi.weights)},
                     {"decision_conditioned", vec(ev.pi_x.weights)},
                     {"tilted", vec(ev.pi_tilde.weights)},
                     {"bma", vec(loaded->bma)}};
  body["ess"] = {{"mixture", ev.mixture.ess}, {"per_component", vec(ev.mixture.ess_model)}};
  body["expected_utility"] = {{"bpds", ev.expected_utility}, {"initial", ev.initial_utility}, {"bma", eu_bma}};
  body["tau"] = vec(ev.tilt.tau);
  body["tilt"] = {{"converged", ev.tilt.converged},
                  {"residual", ev.tilt.residual},
                  {"eps", ev.eps},
                  {"halvings", ev.halvings},
                  {"fallback", ev.tilt_fallback}};
  body["timing"] = {{"ms", ms}, {"cold", cold}};
  return {200, body};
}

bool ScenarioService::claim(const std::string& run, const std::string& quarter) {
  std::lock_guard lock(mu_);
  return in_flight_.insert(key_of(run, quarter)).second;
}

void ScenarioService::release(const std::string& run, const std::string& quarter) {
  std::lock_guard lock(mu_);
  in_flight_.erase(key_of(run, quarter));
}

Reply ScenarioService::optimize(const std::string& run, const std::string& quarter, int budget, std::uint64_t seed, bool seed_given,
                                const std::function<void(const json&)>& emit) {
  Reply err;
  const auto h = run_handle(run, err);
  if (!h) return err;
  bool cold = false;
  const auto loaded = quarter_state(h, quarter, h->cfg.soft, err, cold);
  if (!loaded) return err;
  const auto& cfg = h->cfg;
  const auto& setup = loaded->setup;
  const int k = cfg.k;
  if (!seed_given) {
    std::lock_guard lock(mu_);
    seed = derive_seed(harness::optimizer_seed(cfg, setup.date), {++nonce_});
  }
  std::optional<Vector> prev;
  if (loaded->record_index > 0) {
    const auto& p = h->artifacts.records[loaded->record_index - 1];
    if (!p.failed) prev = p.x_bpds;
  }
  std::vector<Vector> warm{decision::shifted_warm_start(prev, setup.x_prev, k), Vector::Constant(k, setup.x_prev)};
  for (const auto& x : setup.state.model_decisions) warm.push_back(x);
  const auto objective = [&](const Vector& x) { return decision::bpds_expected_utility(setup.state, x); };
  const auto progress = [&](const char* phase, int it, double best) {
    if (emit) emit({{"event", "progress"}, {"phase", phase}, {"iteration", it}, {"best_value", best}});
  };
  optimize::OptimizationReport rep;
  const int full = cfg.swarm.particles * (cfg.swarm.iterations + 1) + cfg.swarm.local_budget + cfg.swarm.extra_refinements * cfg.swarm.extra_budget;
  if (budget < 0) budget = full;
  budget = std::min(budget, opts_.max_budget);
  if (budget == 0) {
    rep.best_x = warm.front();
    rep.best_value = objective(rep.best_x);
    rep.flagged = true;
    rep.budget_exhausted = true;
  } else if (budget >= full) {
    rep = optimize::optimize_policy(objective, cfg.bounds(), cfg.swarm, seed, warm, Vector::Constant(k, setup.x_prev), progress);
  } else if (budget < 2 * cfg.swarm.particles + 10) {
    optimize::TrustRegionOptions tro;
    tro.budget = budget;
    rep = optimize::trust_region_maximize(objective, warm.front(), cfg.bounds(), tro, Vector::Constant(k, setup.x_prev), progress);
  } else {
    optimize::SwarmConfig sw = cfg.swarm;
    sw.extra_refinements = 0;
    sw.local_budget = std::min(cfg.swarm.local_budget, budget / 4);
    sw.iterations = std::max(1, std::min(cfg.swarm.iterations, (budget - sw.local_budget) / sw.particles - 1));
    rep = optimize::optimize_policy(objective, cfg.bounds(), sw, seed, warm, Vector::Constant(k, setup.x_prev), progress);
  }
  json body{{"event", "result"},
            {"run", run},
            {"quarter", quarter},
            {"x", vec(rep.best_x)},
            {"best_value", rep.best_value},
            {"evaluations", rep.evaluations},
            {"restarts", rep.restarts},
            {"multimodal", rep.multimodal},
            {"budget_exhausted", rep.budget_exhausted},
            {"flagged", rep.flagged},
            {"budget", budget},
            {"seed", seed},
            {"units", kUnits}};
  return {200, body};
}

void ScenarioService::mount(httplib::Server& server) {
  const std::string origin = opts_.cors_origin;
  server.set_default_headers({{"Access-Control-Allow-Origin", origin},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) res.set_content(json{{"error", httplib::status_message(res.status)}}.dump(), "application/json");
  });
  const auto send = [](httplib::Response& res, const Reply& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server.Get("/api/health", [send](const httplib::Request&, httplib::Response& res) { send(res, {200, {{"status", "ok"}}}); });
  server.Get("/api/runs", [this, send](const httplib::Request&, httplib::Response& res) { send(res, list_runs()); });
  server.Get(R"(/api/run/([^/]*)/trajectories)", [this, send](const httplib::Request& req, httplib::Response& res) {
    int page = 0;
    int size = 50;
    try {
      if (req.has_param("page")) page = std::stoi(req.get_param_value("page"));
      if (req.has_param("page_size")) size = std::stoi(req.get_param_value("page_size"));
    } catch (const std::exception&) {
      send(res, error_reply(422, "page and page_size must be integers"));
      return;
    }
    send(res, trajectories(req.matches[1], req.get_param_value("from"), req.get_param_value("to"), page, size));
  });
  server.Post("/api/scenario", [this, send](const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      send(res, error_reply(400, "request body is not valid JSON"));
      return;
    }
    send(res, scenario(body));
  });
  server.Get(R"(/api/run/([^/]*)/optimize)", [this, send](const httplib::Request& req, httplib::Response& res) {
    const std::string run = req.matches[1];
    if (!req.has_param("quarter")) {
      send(res, error_reply(422, "query parameter 'quarter' is required"));
      return;
    }
    const std::string quarter = req.get_param_value("quarter");
    int budget = -1;
    std::uint64_t seed = 0;
    const bool seed_given = req.has_param("seed");
    try {
      if (req.has_param("budget")) budget = std::stoi(req.get_param_value("budget"));
      if (seed_given) seed = std::stoull(req.get_param_value("seed"));
    } catch (const std::exception&) {
      send(res, error_reply(422, "budget and seed must be integers"));
      return;
    }
    if (req.has_param("budget") && budget < 0) {
      send(res, error_reply(422, "budget must be >= 0"));
      return;
    }
    Reply err;
    const auto h = run_handle(run, err);
    if (!h) {
      send(res, err);
      return;
    }
    bool cold = false;
    if (!quarter_state(h, quarter, h->cfg.soft, err, cold)) {
      send(res, err);
      return;
    }
    if (!claim(run, quarter)) {
      send(res, error_reply(409, "an optimization for this run and quarter is already in flight"));
      return;
    }
    // Released once: after the result line, or when the client goes away first.
    auto released = std::make_shared<std::atomic<bool>>(false);
    const auto release_once = [this, run, quarter, released] {
      if (!released->exchange(true)) release(run, quarter);
    };
    res.set_chunked_content_provider(
        "application/x-ndjson",
        [this, run, quarter, budget, seed, seed_given, release_once](std::size_t, httplib::DataSink& sink) {
          const auto emit = [&](const json& line) {
            const std::string s = line.dump() + "\n";
            sink.write(s.data(), s.size());
          };
          json final;
          try {
            const Reply r = optimize(run, quarter, budget, seed, seed_given, emit);
            final = r.body;
            if (r.status != 200) final["event"] = "error";
          } catch (const std::exception& e) {
            final = {{"event", "error"}, {"error", e.what()}};
          }
          release_once();
          emit(final);
          sink.done();
          return true;
        },
        [release_once](bool) { release_once(); });
  });
}

bool serve(const ServiceOptions& opts, const std::string& host, int port) {
  httplib::Server server;
  ScenarioService svc(opts);
  svc.mount(server);
  return server.listen(host, port);
}

}  // namespace bpds::service
