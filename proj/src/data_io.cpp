#include "bpds/data_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace bpds::io {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '"')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '"')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

bool parse_double(std::string_view s, double& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

int find_name(const std::vector<std::string>& names, std::string_view name) {
  const auto it = std::find(names.begin(), names.end(), name);
  return it == names.end() ? -1 : static_cast<int>(it - names.begin());
}

}  // namespace

Quarter Quarter::parse(std::string_view text) {
  text = trim(text);
  const auto qpos = text.find_first_of("Qq");
  int year = 0;
  int q = 0;
  if (qpos == std::string_view::npos || qpos == 0 || qpos + 2 != text.size()) {
    throw DataError("invalid quarter '" + std::string(text) + "'");
  }
  auto [p1, e1] = std::from_chars(text.data(), text.data() + qpos, year);
  auto [p2, e2] = std::from_chars(text.data() + qpos + 1, text.data() + text.size(), q);
  if (e1 != std::errc() || e2 != std::errc() || p1 != text.data() + qpos || q < 1 || q > 4) {
    throw DataError("invalid quarter '" + std::string(text) + "'");
  }
  return Quarter{year, q};
}

std::string Quarter::to_string() const { return std::to_string(year) + "Q" + std::to_string(quarter); }

int MacroPanel::column(std::string_view name) const {
  const int idx = find_name(names, name);
  if (idx < 0) throw DataError("missing column '" + std::string(name) + "'");
  return idx;
}

void MacroPanel::validate() const {
  if (values.rows() != static_cast<Eigen::Index>(dates.size()) || values.cols() != static_cast<Eigen::Index>(names.size())) {
    throw DataError("panel shape does not match dates/names");
  }
  for (std::size_t i = 1; i < dates.size(); ++i) {
    const int gap = dates[i].ordinal() - dates[i - 1].ordinal();
    if (gap <= 0) throw DataError("dates not increasing at " + dates[i].to_string());
    if (gap > 1) throw DataError("date gap at " + dates[i - 1].next().to_string());
  }
  if (!values.allFinite()) throw DataError("panel contains missing or non-finite values");
}

MacroPanel load_quarterly_csv(const std::filesystem::path& path, const ColumnMap& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty csv " + path.string());
  const auto header = split_commas(line);
  if (header.size() < 2) throw DataError("csv needs a date column and at least one series");

  std::vector<int> source_cols;
  MacroPanel panel;
  if (schema.empty()) {
    for (std::size_t c = 1; c < header.size(); ++c) {
      source_cols.push_back(static_cast<int>(c));
      panel.names.emplace_back(header[c]);
    }
  } else {
    for (const auto& [csv_name, series] : schema) {
      const auto it = std::find(header.begin() + 1, header.end(), csv_name);
      if (it == header.end()) throw DataError("missing column '" + csv_name + "'");
      source_cols.push_back(static_cast<int>(it - header.begin()));
      panel.names.push_back(series);
    }
  }

  std::vector<std::vector<double>> rows;
  int row_no = 1;
  while (std::getline(in, line)) {
    ++row_no;
    if (trim(line).empty()) continue;
    const auto cells = split_commas(line);
    if (cells.size() != header.size()) {
      throw DataError("row " + std::to_string(row_no) + " has " + std::to_string(cells.size()) + " cells, expected " +
                      std::to_string(header.size()));
    }
    panel.dates.push_back(Quarter::parse(cells[0]));
    std::vector<double> vals;
    for (const int c : source_cols) {
      double v = 0.0;
      if (!parse_double(cells[c], v)) {
        throw DataError("parse error at row " + std::to_string(row_no) + ", column " + std::to_string(c + 1) + " ('" +
                        std::string(header[c]) + "'): '" + std::string(cells[c]) + "'");
      }
      vals.push_back(v);
    }
    rows.push_back(std::move(vals));
  }
  panel.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(source_cols.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < source_cols.size(); ++c) panel.values(r, c) = rows[r][c];
  }
  panel.validate();
  return panel;
}

void write_quarterly_csv(const MacroPanel& panel, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "date";
  for (const auto& n : panel.names) out << ',' << n;
  out << '\n';
  for (Eigen::Index r = 0; r < panel.rows(); ++r) {
    out << panel.dates[r].to_string();
    for (Eigen::Index c = 0; c < panel.values.cols(); ++c) out << ',' << format_double(panel.values(r, c));
    out << '\n';
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << out.str();
}

TransformKind parse_transform_kind(std::string_view name) {
  if (name == "level") return TransformKind::kLevel;
  if (name == "log") return TransformKind::kLog;
  if (name == "log_diff_annualized") return TransformKind::kLogDiffAnnualized;
  if (name == "diff") return TransformKind::kDiff;
  if (name == "ratio") return TransformKind::kRatio;
  throw ConfigError("unknown transform '" + std::string(name) + "'");
}

std::string_view transform_kind_name(TransformKind kind) {
  switch (kind) {
    case TransformKind::kLevel: return "level";
    case TransformKind::kLog: return "log";
    case TransformKind::kLogDiffAnnualized: return "log_diff_annualized";
    case TransformKind::kDiff: return "diff";
    case TransformKind::kRatio: return "ratio";
  }
  return "level";
}

int ModelDataset::column(std::string_view name) const {
  const int idx = find_name(names, name);
  if (idx < 0) throw DataError("missing column '" + std::string(name) + "'");
  return idx;
}

Matrix ModelDataset::select(const std::vector<std::string>& columns, Eigen::Index rows) const {
  const Eigen::Index r = rows < 0 ? values.rows() : std::min(rows, values.rows());
  Matrix out(r, static_cast<Eigen::Index>(columns.size()));
  for (std::size_t c = 0; c < columns.size(); ++c) out.col(c) = values.col(column(columns[c])).head(r);
  return out;
}

ModelDataset ModelDataset::head(Eigen::Index rows) const {
  ModelDataset out = *this;
  rows = std::min(rows, values.rows());
  out.dates.resize(rows);
  out.values = values.topRows(rows);
  return out;
}

ModelDataset transform_panel(const MacroPanel& panel, const std::vector<Transform>& transforms) {
  panel.validate();
  const bool differenced = std::any_of(transforms.begin(), transforms.end(), [](const Transform& t) {
    return t.kind == TransformKind::kLogDiffAnnualized || t.kind == TransformKind::kDiff;
  });
  const Eigen::Index offset = differenced ? 1 : 0;
  if (panel.rows() <= offset) throw DataError("panel too short for differencing");
  const Eigen::Index rows = panel.rows() - offset;

  ModelDataset out;
  out.dates.assign(panel.dates.begin() + offset, panel.dates.end());
  out.values.resize(rows, static_cast<Eigen::Index>(transforms.size()));
  out.transforms = transforms;
  out.anchors.assign(transforms.size(), 0.0);

  for (std::size_t c = 0; c < transforms.size(); ++c) {
    const auto& t = transforms[c];
    const Vector src = panel.values.col(panel.column(t.source));
    const auto require_positive = [&](const Vector& v) {
      for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (!(v(i) > 0.0)) {
          throw DomainError("non-positive value " + format_double(v(i)) + " in '" + t.source + "' at " +
                            panel.dates[i].to_string() + " under log transform");
        }
      }
    };
    switch (t.kind) {
      case TransformKind::kLevel:
        out.values.col(c) = src.tail(rows);
        break;
      case TransformKind::kLog:
        require_positive(src);
        out.values.col(c) = src.tail(rows).array().log();
        break;
      case TransformKind::kLogDiffAnnualized:
        require_positive(src);
        for (Eigen::Index i = 0; i < rows; ++i) out.values(i, c) = 400.0 * std::log(src(i + 1) / src(i));
        break;
      case TransformKind::kDiff:
        for (Eigen::Index i = 0; i < rows; ++i) out.values(i, c) = src(i + 1) - src(i);
        break;
      case TransformKind::kRatio: {
        const Vector den = panel.values.col(panel.column(t.denominator));
        for (Eigen::Index i = 0; i < den.size(); ++i) {
          if (den(i) == 0.0) throw DomainError("zero denominator in ratio '" + t.output + "'");
        }
        out.values.col(c) = (src.array() / den.array()).tail(rows);
        break;
      }
    }
    out.anchors[c] = src(0);
    out.names.push_back(t.output);
  }
  return out;
}

Vector invert_transform(const ModelDataset& data, std::string_view column) {
  const int c = data.column(column);
  const auto& t = data.transforms.at(c);
  const Vector v = data.values.col(c);
  Vector out(v.size());
  switch (t.kind) {
    case TransformKind::kLevel:
      return v;
    case TransformKind::kLog:
      return v.array().exp();
    case TransformKind::kLogDiffAnnualized: {
      double log_level = std::log(data.anchors[c]);
      for (Eigen::Index i = 0; i < v.size(); ++i) {
        log_level += v(i) / 400.0;
        out(i) = std::exp(log_level);
      }
      return out;
    }
    case TransformKind::kDiff: {
      double level = data.anchors[c];
      for (Eigen::Index i = 0; i < v.size(); ++i) {
        level += v(i);
        out(i) = level;
      }
      return out;
    }
    case TransformKind::kRatio:
      break;
  }
  throw DomainError("ratio transform of '" + std::string(column) + "' has no standalone inverse");
}

ModelDataset as_dataset(const MacroPanel& panel) {
  std::vector<Transform> ts;
  for (const auto& n : panel.names) ts.push_back(Transform{n, TransformKind::kLevel, n, {}});
  return transform_panel(panel, ts);
}

void SynthConfig::validate() const {
  const int dim = n();
  if (dim < 1) throw ConfigError("synthetic config needs at least one variable");
  if (lags < 1 || static_cast<int>(coefficients.size()) != lags) throw ConfigError("synthetic config lag count mismatch");
  for (const auto& a : coefficients) {
    if (a.rows() != dim || a.cols() != dim) throw ConfigError("coefficient matrix has wrong shape");
  }
  if (intercept.size() != dim) throw ConfigError("intercept has wrong length");
  if (shock_cov.rows() != dim || shock_cov.cols() != dim) throw ConfigError("shock covariance has wrong shape");
  if (length < 1) throw ConfigError("sample length must be positive");
  if (spectral_radius(coefficients) >= 1.0) throw ConfigError("unstable coefficient matrix: spectral radius >= 1");
}

double spectral_radius(const std::vector<Matrix>& coefficients) {
  if (coefficients.empty()) return 0.0;
  const Eigen::Index n = coefficients.front().rows();
  const Eigen::Index p = static_cast<Eigen::Index>(coefficients.size());
  Matrix companion = Matrix::Zero(n * p, n * p);
  for (Eigen::Index l = 0; l < p; ++l) companion.block(0, l * n, n, n) = coefficients[l];
  if (p > 1) companion.block(n, 0, n * (p - 1), n * (p - 1)).setIdentity();
  Eigen::EigenSolver<Matrix> es(companion, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

MacroPanel simulate_dgp(const SynthConfig& cfg) {
  cfg.validate();
  const int n = cfg.n();
  Rng rng(cfg.seed);
  Eigen::LLT<Matrix> llt(cfg.shock_cov);
  if (llt.info() != Eigen::Success) throw ConfigError("shock covariance is not positive definite");
  const Matrix chol = llt.matrixL();

  // Start at the unconditional mean.
  Matrix sum_a = Matrix::Identity(n, n);
  for (const auto& a : cfg.coefficients) sum_a -= a;
  const Vector mean = sum_a.partialPivLu().solve(cfg.intercept);

  const int total = cfg.length + cfg.burn_in;
  std::vector<Vector> hist(cfg.lags, mean);
  MacroPanel panel;
  panel.names = cfg.names;
  panel.values.resize(cfg.length, n);
  Quarter q = cfg.start;
  for (int t = 0; t < total; ++t) {
    Vector y = cfg.intercept + chol * standard_normal(rng, n);
    for (int l = 0; l < cfg.lags; ++l) y += cfg.coefficients[l] * hist[l];
    for (int l = cfg.lags - 1; l > 0; --l) hist[l] = hist[l - 1];
    hist[0] = y;
    if (t >= cfg.burn_in) {
      panel.values.row(t - cfg.burn_in) = y.transpose();
      panel.dates.push_back(q);
      q = q.next();
    }
  }
  return panel;
}

}  // namespace bpds::io
