#pragma once

#include "bpds/common.hpp"

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

namespace bpds::optimize {

using Objective = std::function<double(const Vector&)>;

struct Bounds {
  Vector lower;
  Vector upper;

  static Bounds box(int k, double lo, double hi);
  [[nodiscard]] Eigen::Index dim() const { return lower.size(); }
  [[nodiscard]] Vector clamp(const Vector& x) const;
  [[nodiscard]] bool contains(const Vector& x) const;
  void validate() const;
};

struct LocalOptimum {
  Vector x;
  double value = 0.0;
};

struct OptimizationReport {
  Vector best_x;
  double best_value = -std::numeric_limits<double>::infinity();
  int evaluations = 0;
  int restarts = 0;
  bool multimodal = false;
  bool budget_exhausted = false;
  /// Warm start returned without search (zero budget) or no finite evaluation.
  bool flagged = false;
  std::vector<LocalOptimum> optima;
  std::vector<double> trace;  // best value after each swarm iteration or local step
};

/// Progress hook: (phase, iteration, best value so far).
using Progress = std::function<void(const char*, int, double)>;

struct TrustRegionOptions {
  double initial_radius = 0.5;
  double min_radius = 1e-6;
  int budget = 200;
};

/// Derivative-free trust-region maximization with regression quadratic models.
/// Points outside the box are projected onto it. Ties on value prefer the point
/// closer to `anchor` (when given).
OptimizationReport trust_region_maximize(const Objective& f, const Vector& x0, const Bounds& bounds, const TrustRegionOptions& opts,
                                         const std::optional<Vector>& anchor = std::nullopt, const Progress& progress = {});

struct SwarmConfig {
  int particles = 24;
  int iterations = 60;
  double inertia = 0.72;
  double cognitive = 1.49;
  double social = 1.49;
  int local_budget = 200;
  double cluster_radius = 0.25;
  /// Additional local refinements started from distinct swarm clusters.
  int extra_refinements = 2;
  int extra_budget = 60;
  /// Relative value gap for two local optima to count as distinct.
  double value_tolerance = 1e-6;
  double initial_radius = 0.5;
};

/// Particle swarm over the box followed by trust-region refinement of the best
/// particle. Particle draws use derive_seed(seed, {iteration, particle}).
OptimizationReport optimize_policy(const Objective& f, const Bounds& bounds, const SwarmConfig& cfg, std::uint64_t seed,
                                   const std::vector<Vector>& warm_starts = {}, const std::optional<Vector>& anchor = std::nullopt,
                                   const Progress& progress = {});

/// Strict preference used for best-so-far tracking: higher value, then closer to anchor.
bool better(double va, const Vector& xa, double vb, const Vector& xb, const std::optional<Vector>& anchor);

}  // namespace bpds::optimize
