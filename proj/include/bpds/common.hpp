#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>

namespace bpds {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Rng = std::mt19937_64;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (CSV, panels, transforms).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid run or model configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Linear-algebra failure: singular or non positive-definite matrices.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Sign-restricted identification failed for every parameter redraw.
class IdentificationError : public Error {
 public:
  using Error::Error;
};

/// Target expected score lies outside the sampled score support.
class InfeasibleTarget : public Error {
 public:
  using Error::Error;
};

/// Counter-mode seed derivation. The result depends only on the base seed and
/// the key sequence, never on the order in which derived streams are consumed.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys);

/// Neumaier-compensated accumulator.
class CompensatedSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v)) {
      comp_ += (sum_ - t) + v;
    } else {
      comp_ += (v - t) + sum_;
    }
    sum_ = t;
  }
  [[nodiscard]] double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

/// log(sum(exp(v))) with max-shift; returns -inf for an empty or all -inf input.
double log_sum_exp(std::span<const double> v);
double log_sum_exp(const Vector& v);

/// Normalizes log-weights into probabilities. Entries are floored at `floor`
/// before renormalization so no weight is an exact zero.
Vector normalize_log_weights(const Vector& log_w, double floor = 1e-300);

/// Symmetric square root factor L with L L' = (S + S')/2, eigenvalues floored
/// at `floor` (relative to the largest eigenvalue when `relative` is set).
Matrix floored_factor(const Matrix& s, double floor = 1e-12, bool relative = false);

/// Draws a vector of independent standard normals.
Vector standard_normal(Rng& rng, Eigen::Index n);

/// Runs `body(i)` for i in [0, count) on up to hardware_concurrency threads.
/// Each index is processed exactly once; callers must write to disjoint slots.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

/// Formats a double with enough digits to round-trip exactly.
std::string format_double(double v);

}  // namespace bpds
