#include "bpds/run_store.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace bpds::io {

namespace fs = std::filesystem;

namespace {

std::string bool_cell(bool b) { return b ? "1" : "0"; }

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::string cur;
  for (const char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

class CsvWriter {
 public:
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) buf_ << ',';
      buf_ << csv_field(cells[i]);
    }
    buf_ << '\n';
  }
  [[nodiscard]] std::string str() const { return buf_.str(); }

 private:
  std::ostringstream buf_;
};

void append(std::vector<std::string>& cells, const Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) cells.push_back(format_double(v(i)));
}

void append_blank(std::vector<std::string>& cells, int count) {
  for (int i = 0; i < count; ++i) cells.emplace_back();
}

std::vector<std::string> numbered(const std::string& prefix, int count) {
  std::vector<std::string> out;
  for (int i = 1; i <= count; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty artifact file " + path.string());
  t.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != t.header.size()) throw DataError("malformed row in " + path.string());
    t.rows.push_back(std::move(cells));
  }
  return t;
}

Vector read_vector(const std::vector<std::string>& row, std::size_t start, int count) {
  Vector v(count);
  for (int i = 0; i < count; ++i) v(i) = parse_double(row[start + static_cast<std::size_t>(i)]);
  return v;
}

int parse_int(const std::string& s) {
  int v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw DataError("invalid integer '" + s + "'");
  return v;
}

}  // namespace

std::string csv_field(const std::string& value) {
  const bool quote = value.find_first_of(",\"\n\r") != std::string::npos;
  if (!quote) return value;
  std::string out = "\"";
  for (const char c : value) {
    if (c == '"') out += "\"\"";
    else if (c == '\n' || c == '\r') out += ' ';
    else out += c;
  }
  out += '"';
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool in_quotes = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& text) {
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) throw DataError("invalid number '" + text + "'");
  return v;
}

void write_text_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error("cannot replace " + path.string() + ": " + ec.message());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void persist_run(const RunArtifacts& a, const fs::path& dir) {
  const int k = a.k;
  const int jn = static_cast<int>(a.models.size());
  fs::create_directories(dir);

  nlohmann::json manifest = a.manifest;
  manifest["models"] = a.models;
  manifest["k"] = k;
  write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");

  CsvWriter dec, wts, tilt, tgt, utl, opt, tel;
  {
    std::vector<std::string> h{"quarter", "status", "flags", "error", "x_prev"};
    for (const auto& p : numbered("bpds_h", k)) h.push_back(p);
    for (const auto& p : numbered("bma_h", k)) h.push_back(p);
    for (const auto& m : a.models) {
      for (const auto& p : numbered(m + "_h", k)) h.push_back(p);
    }
    dec.row(h);
    std::vector<std::string> hw{"quarter", "stage", "baseline"};
    hw.insert(hw.end(), a.models.begin(), a.models.end());
    wts.row(hw);
    std::vector<std::string> ht{"quarter", "model", "ess"};
    for (const auto& p : numbered("tau_", 2 * k)) ht.push_back(p);
    ht.emplace_back("residual");
    tilt.row(ht);
    std::vector<std::string> hg{"quarter", "eps", "halvings", "converged", "clamped", "direction_gain"};
    for (const auto& p : numbered("m_p_", 2 * k)) hg.push_back(p);
    for (const auto& p : numbered("m_f_", 2 * k)) hg.push_back(p);
    for (const auto& p : numbered("e_f_", 2 * k)) hg.push_back(p);
    tgt.row(hg);
    std::vector<std::string> hu{"quarter", "eu_bpds", "eu_bma", "eu_initial", "eu_bpds_at_bma"};
    for (const auto& m : a.models) hu.push_back("eu_" + m);
    for (const auto& m : a.models) hu.push_back("logdens_" + m);
    utl.row(hu);
    opt.row({"quarter", "target", "evaluations", "restarts", "multimodal", "budget_exhausted", "best_value"});
    tel.row({"quarter", "target", "iteration", "best_value"});
  }

  for (const auto& r : a.records) {
    std::vector<std::string> d{r.quarter, r.failed ? "failed" : "ok", join(r.flags, ';'), r.error};
    if (r.failed) {
      append_blank(d, 1 + k * (2 + jn));
      dec.row(d);
      continue;
    }
    d.push_back(format_double(r.x_prev));
    append(d, r.x_bpds);
    append(d, r.x_bma);
    for (const auto& x : r.x_models) append(d, x);
    dec.row(d);

    const std::pair<const char*, const Vector*> stages[] = {
        {"prior", &r.pi_prior}, {"decision_conditioned", &r.pi_x}, {"tilted", &r.pi_tilde}};
    for (const auto& [name, v] : stages) {
      std::vector<std::string> w{r.quarter, name};
      append(w, *v);
      wts.row(w);
    }
    std::vector<std::string> wm{r.quarter, "model_prior", format_double(0.0)};
    append(wm, r.prior_models);
    wts.row(wm);
    std::vector<std::string> wb{r.quarter, "bma", format_double(0.0)};
    append(wb, r.bma_weights);
    wts.row(wb);

    const auto tilt_row = [&](const std::string& model, double ess) {
      std::vector<std::string> t{r.quarter, model, format_double(ess)};
      append(t, r.tau);
      t.push_back(format_double(r.residual));
      tilt.row(t);
    };
    tilt_row("mixture", r.ess);
    tilt_row("baseline", r.ess_model(0));
    for (int j = 0; j < jn; ++j) tilt_row(a.models[static_cast<std::size_t>(j)], r.ess_model(j + 1));

    std::vector<std::string> g{r.quarter, format_double(r.eps), std::to_string(r.halvings), bool_cell(r.tilt_converged),
                               bool_cell(r.clamped), format_double(r.direction_gain)};
    append(g, r.m_p);
    append(g, r.m_f);
    append(g, r.expected_score);
    tgt.row(g);

    std::vector<std::string> u{r.quarter, format_double(r.eu_bpds), format_double(r.eu_bma), format_double(r.eu_initial),
                               format_double(r.eu_bpds_at_bma)};
    append(u, r.eu_models);
    append(u, r.one_step_logdens);
    utl.row(u);

    for (const auto& o : r.optimizers) {
      opt.row({r.quarter, o.target, std::to_string(o.evaluations), std::to_string(o.restarts), bool_cell(o.multimodal),
               bool_cell(o.budget_exhausted), format_double(o.best_value)});
    }
    for (const auto& t : r.telemetry) tel.row({r.quarter, t.target, std::to_string(t.iteration), format_double(t.best_value)});
  }
  write_text_atomic(dir / "decisions.csv", dec.str());
  write_text_atomic(dir / "weights.csv", wts.str());
  write_text_atomic(dir / "tilting.csv", tilt.str());
  write_text_atomic(dir / "targets.csv", tgt.str());
  write_text_atomic(dir / "utilities.csv", utl.str());
  write_text_atomic(dir / "optimizer.csv", opt.str());
  write_text_atomic(dir / "telemetry.csv", tel.str());
}

RunArtifacts load_run(const fs::path& dir) {
  RunArtifacts a;
  try {
    a.manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
    a.models = a.manifest.at("models").get<std::vector<std::string>>();
    a.k = a.manifest.at("k").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid manifest: ") + e.what());
  }
  a.manifest.erase("models");
  a.manifest.erase("k");
  const int k = a.k;
  const int jn = static_cast<int>(a.models.size());
  std::map<std::string, std::size_t> index;

  const auto dec = read_csv(dir / "decisions.csv");
  if (dec.header.size() != static_cast<std::size_t>(5 + k * (2 + jn))) throw DataError("decisions.csv header does not match manifest");
  for (const auto& row : dec.rows) {
    QuarterRecord r;
    r.quarter = row[0];
    r.failed = row[1] == "failed";
    r.flags = split(row[2], ';');
    r.error = row[3];
    if (!r.failed) {
      r.x_prev = parse_double(row[4]);
      r.x_bpds = read_vector(row, 5, k);
      r.x_bma = read_vector(row, 5 + static_cast<std::size_t>(k), k);
      for (int j = 0; j < jn; ++j) r.x_models.push_back(read_vector(row, 5 + static_cast<std::size_t>(k) * (2 + j), k));
    }
    index[r.quarter] = a.records.size();
    a.records.push_back(std::move(r));
  }
  const auto rec = [&](const std::string& q) -> QuarterRecord& {
    const auto it = index.find(q);
    if (it == index.end()) throw DataError("artifact row for unknown quarter " + q);
    return a.records[it->second];
  };

  for (const auto& row : read_csv(dir / "weights.csv").rows) {
    auto& r = rec(row[0]);
    const Vector v = read_vector(row, 2, jn + 1);
    if (row[1] == "prior") r.pi_prior = v;
    else if (row[1] == "decision_conditioned") r.pi_x = v;
    else if (row[1] == "tilted") r.pi_tilde = v;
    else if (row[1] == "model_prior") r.prior_models = v.tail(jn);
    else if (row[1] == "bma") r.bma_weights = v.tail(jn);
    else throw DataError("unknown weight stage " + row[1]);
  }
  for (const auto& row : read_csv(dir / "tilting.csv").rows) {
    auto& r = rec(row[0]);
    const double ess = parse_double(row[2]);
    if (row[1] == "mixture") {
      r.ess = ess;
      r.tau = read_vector(row, 3, 2 * k);
      r.residual = parse_double(row[3 + 2 * static_cast<std::size_t>(k)]);
      r.ess_model = Vector::Zero(jn + 1);
    } else if (row[1] == "baseline") {
      r.ess_model(0) = ess;
    } else {
      const auto it = std::find(a.models.begin(), a.models.end(), row[1]);
      if (it == a.models.end()) throw DataError("unknown model " + row[1]);
      r.ess_model(1 + (it - a.models.begin())) = ess;
    }
  }
  for (const auto& row : read_csv(dir / "targets.csv").rows) {
    auto& r = rec(row[0]);
    r.eps = parse_double(row[1]);
    r.halvings = parse_int(row[2]);
    r.tilt_converged = row[3] == "1";
    r.clamped = row[4] == "1";
    r.direction_gain = parse_double(row[5]);
    r.m_p = read_vector(row, 6, 2 * k);
    r.m_f = read_vector(row, 6 + 2 * static_cast<std::size_t>(k), 2 * k);
    r.expected_score = read_vector(row, 6 + 4 * static_cast<std::size_t>(k), 2 * k);
  }
  for (const auto& row : read_csv(dir / "utilities.csv").rows) {
    auto& r = rec(row[0]);
    r.eu_bpds = parse_double(row[1]);
    r.eu_bma = parse_double(row[2]);
    r.eu_initial = parse_double(row[3]);
    r.eu_bpds_at_bma = parse_double(row[4]);
    r.eu_models = read_vector(row, 5, jn);
    r.one_step_logdens = read_vector(row, 5 + static_cast<std::size_t>(jn), jn);
  }
  for (const auto& row : read_csv(dir / "optimizer.csv").rows) {
    rec(row[0]).optimizers.push_back({row[1], parse_int(row[2]), parse_int(row[3]), row[4] == "1", row[5] == "1", parse_double(row[6])});
  }
  for (const auto& row : read_csv(dir / "telemetry.csv").rows) {
    rec(row[0]).telemetry.push_back({row[1], parse_int(row[2]), parse_double(row[3])});
  }
  return a;
}

}  // namespace bpds::io
