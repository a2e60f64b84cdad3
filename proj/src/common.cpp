#include "bpds/common.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <limits>
#include <thread>
#include <vector>

namespace bpds {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = splitmix64(base);
  for (const auto k : keys) {
    h = splitmix64(h ^ splitmix64(k + 0x632BE59BD9B4E019ULL));
  }
  return h;
}

double log_sum_exp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (const double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  CompensatedSum s;
  for (const double x : v) s.add(std::exp(x - mx));
  return mx + std::log(s.value());
}

double log_sum_exp(const Vector& v) { return log_sum_exp(std::span<const double>(v.data(), v.size())); }

Vector normalize_log_weights(const Vector& log_w, double floor) {
  const double lse = log_sum_exp(log_w);
  if (!std::isfinite(lse)) {
    throw NumericalError("all model weights underflowed");
  }
  Vector w(log_w.size());
  for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = std::max(std::exp(log_w(i) - lse), floor);
  CompensatedSum s;
  for (Eigen::Index i = 0; i < w.size(); ++i) s.add(w(i));
  return w / s.value();
}

Matrix floored_factor(const Matrix& s, double floor, bool relative) {
  const Matrix sym = 0.5 * (s + s.transpose());
  Eigen::LLT<Matrix> llt(sym);
  if (llt.info() == Eigen::Success && !relative) {
    const Matrix l = llt.matrixL();
    if (l.diagonal().minCoeff() > std::sqrt(floor)) return l;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  if (eig.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  Vector vals = eig.eigenvalues();
  const double cut = relative ? floor * std::max(vals.maxCoeff(), 0.0) : floor;
  for (Eigen::Index i = 0; i < vals.size(); ++i) vals(i) = std::sqrt(std::max(vals(i), cut));
  return eig.eigenvectors() * vals.asDiagonal();
}

Vector standard_normal(Rng& rng, Eigen::Index n) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Vector z(n);
  for (Eigen::Index i = 0; i < n; ++i) z(i) = nd(rng);
  return z;
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body) {
  const std::size_t workers = std::min<std::size_t>(count, std::max(1u, std::thread::hardware_concurrency()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        if (failed) return;
        try {
          body(i);
        } catch (...) {
          if (!failed.exchange(true)) failure = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) return "nan";
  return std::string(buf, ptr);
}

}  // namespace bpds
