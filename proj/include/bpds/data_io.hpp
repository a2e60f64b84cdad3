#pragma once

#include "bpds/common.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace bpds::io {

/// Calendar quarter, e.g. 1973Q1.
struct Quarter {
  int year = 1970;
  int quarter = 1;  // 1..4

  static Quarter parse(std::string_view text);
  [[nodiscard]] std::string to_string() const;
  [[nodiscard]] int ordinal() const { return year * 4 + (quarter - 1); }
  [[nodiscard]] Quarter next() const { return from_ordinal(ordinal() + 1); }
  static Quarter from_ordinal(int ord) { return Quarter{ord / 4, ord % 4 + 1}; }

  friend bool operator==(const Quarter&, const Quarter&) = default;
};

/// Named level series on a gap-free quarterly index. Rows are quarters.
struct MacroPanel {
  std::vector<Quarter> dates;
  std::vector<std::string> names;
  Matrix values;

  [[nodiscard]] Eigen::Index rows() const { return values.rows(); }
  [[nodiscard]] int column(std::string_view name) const;
  /// Throws DataError if lengths disagree, dates are not consecutive quarters,
  /// or any value is non-finite.
  void validate() const;
};

/// Pairs of (csv header, series name). Empty means "take every column as is".
using ColumnMap = std::vector<std::pair<std::string, std::string>>;

MacroPanel load_quarterly_csv(const std::filesystem::path& path, const ColumnMap& schema = {});
void write_quarterly_csv(const MacroPanel& panel, const std::filesystem::path& path);

enum class TransformKind {
  kLevel,              // y
  kLog,                // ln y
  kLogDiffAnnualized,  // 400 * (ln y_t - ln y_{t-1})
  kDiff,               // y_t - y_{t-1}
  kRatio,              // y / denominator
};

struct Transform {
  std::string output;
  TransformKind kind = TransformKind::kLevel;
  std::string source;
  std::string denominator;  // kRatio only
};

TransformKind parse_transform_kind(std::string_view name);
std::string_view transform_kind_name(TransformKind kind);

/// Model-ready observations. When any differencing transform is present the
/// first panel row is consumed and stored as the inversion anchor.
struct ModelDataset {
  std::vector<Quarter> dates;
  std::vector<std::string> names;
  Matrix values;
  std::vector<Transform> transforms;
  std::vector<double> anchors;  // source level on the row preceding dates[0]

  [[nodiscard]] int column(std::string_view name) const;
  /// Columns in the given order, as a rows x names.size() matrix.
  [[nodiscard]] Matrix select(const std::vector<std::string>& columns, Eigen::Index rows = -1) const;
  /// First `rows` observations.
  [[nodiscard]] ModelDataset head(Eigen::Index rows) const;
};

ModelDataset transform_panel(const MacroPanel& panel, const std::vector<Transform>& transforms);

/// Recovers source levels for `column` (log, log-difference, difference and level
/// transforms). Ratios are not invertible on their own.
Vector invert_transform(const ModelDataset& data, std::string_view column);

/// Identity transform for every panel column.
ModelDataset as_dataset(const MacroPanel& panel);

struct SynthConfig {
  std::vector<std::string> names;
  int lags = 1;
  Vector intercept;
  std::vector<Matrix> coefficients;  // one n x n matrix per lag
  Matrix shock_cov;
  int length = 200;
  int burn_in = 500;
  std::uint64_t seed = 1;
  Quarter start{1973, 1};

  [[nodiscard]] int n() const { return static_cast<int>(names.size()); }
  void validate() const;
};

/// Largest modulus of the companion-matrix eigenvalues.
double spectral_radius(const std::vector<Matrix>& coefficients);

/// Simulates the VAR with Gaussian shocks. Reproducible given cfg.seed.
MacroPanel simulate_dgp(const SynthConfig& cfg);

}  // namespace bpds::io
