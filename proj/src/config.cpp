#include "bpds/config.hpp"

#include <fstream>

namespace bpds::config {

using nlohmann::json;

namespace {

Matrix matrix_from(const json& j, const char* what) {
  if (!j.is_array() || j.empty()) throw ConfigError(std::string(what) + " must be a non-empty array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j.at(0).size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j.at(static_cast<std::size_t>(r));
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) throw ConfigError(std::string(what) + " rows differ in length");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

json matrix_to(const Matrix& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(row);
  }
  return out;
}

template <typename F>
auto wrap(F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

}  // namespace

bvar::SignMatrix ModelConfig::sign_matrix(const bvar::VARSpec& spec) const {
  if (sign_mode == "default") return bvar::SignMatrix::default_for(spec);
  if (sign_mode == "none") return bvar::SignMatrix::empty(spec.n());
  if (sign_mode != "table") throw ConfigError("unknown sign mode '" + sign_mode + "'");
  std::vector<std::string> shocks;
  std::vector<bvar::SignMatrix::Restriction> restrictions;
  for (const auto& s : table) {
    if (std::find(shocks.begin(), shocks.end(), s.shock) == shocks.end()) shocks.push_back(s.shock);
    for (const auto& [var, sign] : s.signs) restrictions.push_back({var, s.shock, sign});
  }
  return bvar::SignMatrix::from_restrictions(spec.names, shocks, restrictions);
}

io::SynthConfig parse_synth_config(const json& j) {
  return wrap([&] {
    io::SynthConfig c;
    c.names = j.at("names").get<std::vector<std::string>>();
    c.lags = j.value("lags", 1);
    c.intercept = Eigen::Map<const Vector>(j.at("intercept").get<std::vector<double>>().data(),
                                           static_cast<Eigen::Index>(j.at("intercept").size()));
    for (const auto& m : j.at("coefficients")) c.coefficients.push_back(matrix_from(m, "coefficients"));
    c.shock_cov = matrix_from(j.at("shock_cov"), "shock_cov");
    c.length = j.value("length", 200);
    c.burn_in = j.value("burn_in", 500);
    c.seed = j.value("seed", std::uint64_t{1});
    if (j.contains("start")) c.start = io::Quarter::parse(j.at("start").get<std::string>());
    try {
      c.validate();
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    } catch (const DomainError& e) {
      throw ConfigError(e.what());
    }
    return c;
  });
}

io::SynthConfig load_synth_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return wrap([&] { return parse_synth_config(json::parse(in)); });
}

json to_json(const io::SynthConfig& c) {
  json j;
  j["names"] = c.names;
  j["lags"] = c.lags;
  j["intercept"] = std::vector<double>(c.intercept.data(), c.intercept.data() + c.intercept.size());
  j["coefficients"] = json::array();
  for (const auto& m : c.coefficients) j["coefficients"].push_back(matrix_to(m));
  j["shock_cov"] = matrix_to(c.shock_cov);
  j["length"] = c.length;
  j["burn_in"] = c.burn_in;
  j["seed"] = c.seed;
  j["start"] = c.start.to_string();
  return j;
}

void RunConfig::validate() const {
  if (models.empty()) throw ConfigError("model roster must not be empty");
  if (k < 1) throw ConfigError("k must be >= 1");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
  if (!(pi0 >= 0.0 && pi0 < 1.0)) throw ConfigError("pi0 must lie in [0, 1)");
  if (draws < 1 || baseline_draws < 1) throw ConfigError("Monte Carlo sizes must be >= 1");
  if (quarters < 1) throw ConfigError("quarters must be >= 1");
  if (model_budget < 50) throw ConfigError("model_budget must be >= 50");
  if (!(baseline_df > 2.0)) throw ConfigError("baseline df must exceed 2");
  if (!(target.min_ratio > 0.0 && target.min_ratio < 1.0)) throw ConfigError("min_ratio must lie in (0, 1)");
  if (swarm.particles < 8) throw ConfigError("swarm size must be >= 8");
  if (!data.synthetic && data.csv.empty()) throw ConfigError("data needs either a synthetic block or a csv path");
  score.validate();
  utility.validate();
  prior_base.validate();
  bounds().validate();
  std::vector<std::string> seen;
  for (const auto& m : models) {
    if (m.name.empty()) throw ConfigError("every model needs a name");
    if (std::find(seen.begin(), seen.end(), m.name) != seen.end()) throw ConfigError("duplicate model name '" + m.name + "'");
    seen.push_back(m.name);
    for (const auto* role : {&policy, &inflation, &growth}) {
      if (std::find(m.variables.begin(), m.variables.end(), *role) == m.variables.end()) {
        throw ConfigError("model '" + m.name + "' lacks variable '" + *role + "'");
      }
    }
    if (m.lags < 1) throw ConfigError("model '" + m.name + "' needs lags >= 1");
  }
}

RunConfig parse_run_config(const json& j, const std::filesystem::path& base_dir) {
  return wrap([&] {
    RunConfig c;
    const json& data = j.at("data");
    if (data.contains("synthetic")) {
      c.data.synthetic = parse_synth_config(data.at("synthetic"));
    } else {
      std::filesystem::path p = data.at("csv").get<std::string>();
      c.data.csv = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
      if (data.contains("columns")) {
        for (const auto& [hdr, name] : data.at("columns").items()) c.data.columns.emplace_back(hdr, name.get<std::string>());
      }
    }
    if (data.contains("transforms")) {
      for (const auto& t : data.at("transforms")) {
        io::Transform tr;
        tr.output = t.at("output").get<std::string>();
        tr.kind = io::parse_transform_kind(t.at("kind").get<std::string>());
        tr.source = t.value("source", tr.output);
        tr.denominator = t.value("denominator", std::string{});
        c.data.transforms.push_back(tr);
      }
    }
    for (const auto& m : j.at("models")) {
      ModelConfig mc;
      mc.name = m.at("name").get<std::string>();
      mc.variables = m.at("variables").get<std::vector<std::string>>();
      mc.lags = m.value("lags", 5);
      if (m.contains("signs")) {
        const auto& s = m.at("signs");
        if (s.is_string()) {
          mc.sign_mode = s.get<std::string>();
        } else {
          mc.sign_mode = "table";
          for (const auto& entry : s) {
            ShockSigns ss;
            ss.shock = entry.at("shock").get<std::string>();
            for (const auto& [var, sign] : entry.at("signs").items()) ss.signs.emplace_back(var, sign.get<int>());
            mc.table.push_back(ss);
          }
        }
      }
      c.models.push_back(mc);
    }
    if (j.contains("roles")) {
      const auto& r = j.at("roles");
      c.policy = r.value("policy", c.policy);
      c.inflation = r.value("inflation", c.inflation);
      c.growth = r.value("growth", c.growth);
    }
    c.k = j.value("k", c.k);
    c.gamma = j.value("gamma", c.gamma);
    c.pi0 = j.value("pi0", c.pi0);
    if (j.contains("score")) {
      const auto& s = j.at("score");
      c.score.eps = s.value("eps", c.score.eps);
      c.score.d_y = s.value("d_y", c.score.d_y);
      c.score.d_g = s.value("d_g", c.score.d_g);
      c.score.d_x = s.value("d_x", c.score.d_x);
    }
    if (j.contains("utility")) {
      const auto& u = j.at("utility");
      c.utility.theta = u.value("theta", c.utility.theta);
      c.utility.y_star = u.value("y_star", c.utility.y_star);
      c.utility.g_star = u.value("g_star", c.utility.g_star);
    }
    c.score.y_star = c.utility.y_star;
    c.score.g_star = c.utility.g_star;
    c.score.k = c.k;
    c.utility.k = c.k;
    if (j.contains("target")) {
      const auto& t = j.at("target");
      c.target.min_ratio = t.value("min_ratio", c.target.min_ratio);
      c.target.eps_cap = t.value("eps_cap", c.target.eps_cap);
      c.freeze_eps = t.value("freeze_eps", c.freeze_eps);
    }
    if (j.contains("tilt")) {
      const auto& t = j.at("tilt");
      c.tilt.tol = t.value("tol", c.tilt.tol);
      c.tilt.max_iterations = t.value("max_iterations", c.tilt.max_iterations);
      c.max_halvings = t.value("max_halvings", c.max_halvings);
    }
    if (j.contains("baseline")) {
      c.baseline_df = j.at("baseline").value("df", c.baseline_df);
      c.baseline_inflate = j.at("baseline").value("inflate", c.baseline_inflate);
    }
    if (j.contains("monte_carlo")) {
      const auto& m = j.at("monte_carlo");
      c.draws = m.value("draws", c.draws);
      c.baseline_draws = m.value("baseline_draws", c.draws);
      c.max_tries = m.value("max_tries", c.max_tries);
      c.max_parameter_redraws = m.value("max_parameter_redraws", c.max_parameter_redraws);
      c.max_gain = m.value("max_gain", c.max_gain);
      c.soft = m.value("soft", c.soft);
    } else {
      c.baseline_draws = c.draws;
    }
    if (j.contains("prior")) {
      const auto& p = j.at("prior");
      c.prior_base.intercept_looseness = p.value("intercept_looseness", c.prior_base.intercept_looseness);
      c.prior_base.own_lag_mean = p.value("own_lag_mean", c.prior_base.own_lag_mean);
      c.grid_overall = p.value("grid_overall", c.grid_overall);
      c.grid_cross = p.value("grid_cross", c.grid_cross);
    }
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      c.swarm.particles = o.value("particles", c.swarm.particles);
      c.swarm.iterations = o.value("iterations", c.swarm.iterations);
      c.swarm.inertia = o.value("inertia", c.swarm.inertia);
      c.swarm.cognitive = o.value("cognitive", c.swarm.cognitive);
      c.swarm.social = o.value("social", c.swarm.social);
      c.swarm.local_budget = o.value("local_budget", c.swarm.local_budget);
      c.swarm.extra_refinements = o.value("extra_refinements", c.swarm.extra_refinements);
      c.swarm.extra_budget = o.value("extra_budget", c.swarm.extra_budget);
      c.model_budget = o.value("model_budget", c.model_budget);
      c.lower = o.value("lower", c.lower);
      c.upper = o.value("upper", c.upper);
    }
    if (j.contains("features")) {
      const auto& f = j.at("features");
      c.features.tilt = f.value("tilt", c.features.tilt);
      c.features.decision_conditioning = f.value("decision_conditioning", c.features.decision_conditioning);
      c.features.baseline = f.value("baseline", c.features.baseline);
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("start")) {
      const auto& s = j.at("start");
      if (s.is_string()) c.start_date = s.get<std::string>();
      else c.start_index = s.get<int>();
    }
    c.quarters = j.value("quarters", c.quarters);
    c.validate();
    return c;
  });
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  const json j = wrap([&] { return json::parse(in); });
  return parse_run_config(j, path.parent_path());
}

json to_json(const RunConfig& c) {
  json j;
  json data;
  if (c.data.synthetic) {
    data["synthetic"] = to_json(*c.data.synthetic);
  } else {
    data["csv"] = c.data.csv.string();
    json cols = json::object();
    for (const auto& [hdr, name] : c.data.columns) cols[hdr] = name;
    data["columns"] = cols;
  }
  json transforms = json::array();
  for (const auto& t : c.data.transforms) {
    transforms.push_back({{"output", t.output},
                          {"kind", std::string(io::transform_kind_name(t.kind))},
                          {"source", t.source},
                          {"denominator", t.denominator}});
  }
  data["transforms"] = transforms;
  j["data"] = data;
  json models = json::array();
  for (const auto& m : c.models) {
    json jm{{"name", m.name}, {"variables", m.variables}, {"lags", m.lags}};
    if (m.sign_mode == "table") {
      json table = json::array();
      for (const auto& s : m.table) {
        json signs = json::object();
        for (const auto& [var, sign] : s.signs) signs[var] = sign;
        table.push_back({{"shock", s.shock}, {"signs", signs}});
      }
      jm["signs"] = table;
    } else {
      jm["signs"] = m.sign_mode;
    }
    models.push_back(jm);
  }
  j["models"] = models;
  j["roles"] = {{"policy", c.policy}, {"inflation", c.inflation}, {"growth", c.growth}};
  j["k"] = c.k;
  j["gamma"] = c.gamma;
  j["pi0"] = c.pi0;
  j["score"] = {{"eps", c.score.eps}, {"d_y", c.score.d_y}, {"d_g", c.score.d_g}, {"d_x", c.score.d_x}};
  j["utility"] = {{"theta", c.utility.theta}, {"y_star", c.utility.y_star}, {"g_star", c.utility.g_star}};
  j["target"] = {{"min_ratio", c.target.min_ratio}, {"eps_cap", c.target.eps_cap}, {"freeze_eps", c.freeze_eps}};
  j["tilt"] = {{"tol", c.tilt.tol}, {"max_iterations", c.tilt.max_iterations}, {"max_halvings", c.max_halvings}};
  j["baseline"] = {{"df", c.baseline_df}, {"inflate", c.baseline_inflate}};
  j["monte_carlo"] = {{"draws", c.draws},
                      {"baseline_draws", c.baseline_draws},
                      {"max_tries", c.max_tries},
                      {"max_parameter_redraws", c.max_parameter_redraws},
                      {"max_gain", c.max_gain},
                      {"soft", c.soft}};
  j["prior"] = {{"intercept_looseness", c.prior_base.intercept_looseness},
                {"own_lag_mean", c.prior_base.own_lag_mean},
                {"grid_overall", c.grid_overall},
                {"grid_cross", c.grid_cross}};
  j["optimizer"] = {{"particles", c.swarm.particles},       {"iterations", c.swarm.iterations},
                    {"inertia", c.swarm.inertia},           {"cognitive", c.swarm.cognitive},
                    {"social", c.swarm.social},             {"local_budget", c.swarm.local_budget},
                    {"extra_refinements", c.swarm.extra_refinements}, {"extra_budget", c.swarm.extra_budget},
                    {"model_budget", c.model_budget},       {"lower", c.lower},
                    {"upper", c.upper}};
  j["features"] = {{"tilt", c.features.tilt},
                   {"decision_conditioning", c.features.decision_conditioning},
                   {"baseline", c.features.baseline}};
  j["seed"] = c.seed;
  if (c.start_date.empty()) j["start"] = c.start_index;
  else j["start"] = c.start_date;
  j["quarters"] = c.quarters;
  return j;
}

io::ModelDataset load_dataset(const RunConfig& cfg) {
  const io::MacroPanel panel =
      cfg.data.synthetic ? io::simulate_dgp(*cfg.data.synthetic) : io::load_quarterly_csv(cfg.data.csv, cfg.data.columns);
  return cfg.data.transforms.empty() ? io::as_dataset(panel) : io::transform_panel(panel, cfg.data.transforms);
}

}  // namespace bpds::config
