#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "prism/profiler.hpp"

namespace prism {

enum class Objective { MinPerSampleLatency, MinPerSampleEnergy };

Objective objective_from_string(std::string_view name);
std::string_view to_string(Objective objective);

/// A plan as the performance map names it.
struct PlanChoice {
  CostMode mode = CostMode::Local;
  std::optional<double> cr;

  [[nodiscard]] std::string describe() const;
  [[nodiscard]] ExecutionPlan to_plan(const PerformanceMap& map) const;

  friend bool operator==(const PlanChoice&, const PlanChoice&) = default;
};

struct PlanEstimate {
  PlanChoice plan;
  double per_sample_ms = 0.0;
  double per_sample_j = 0.0;
};

struct Decision {
  PlanEstimate chosen;
  std::optional<PlanEstimate> runner_up;
  /// Runner-up objective value minus the chosen one (0 without a runner-up).
  double margin = 0.0;
  Objective objective = Objective::MinPerSampleLatency;
  std::size_t requested_batch = 0;
  std::size_t batch = 0;
  double bandwidth_mbps = 0.0;
  /// Set when the batch or bandwidth had to be snapped to the grid.
  std::optional<std::string> warning;
};

struct PolicyOptions {
  /// Resolve a batch missing from the map to the nearest profiled one.
  bool nearest_batch = false;
  /// Let full-tensor records compete; by default they only serve as baseline.
  bool include_voltage = false;
};

/// Argmin over Local and every profiled Segment Means rate at `batch`, with
/// per-plan values linearly interpolated in bandwidth (clamped at the grid
/// edges). Ties go to Local, then to the lower compression rate. Failed
/// records never win.
Decision select_plan(const PerformanceMap& map, std::size_t batch, double observed_bw_mbps, Objective objective,
                     const PolicyOptions& options = {});

/// Estimate of one plan at (batch, bandwidth), interpolated like select_plan.
std::optional<PlanEstimate> estimate(const PerformanceMap& map, const PlanChoice& plan, std::size_t batch,
                                     double bandwidth_mbps);

/// Smallest profiled batch whose decision is a distributed plan.
std::optional<std::size_t> crossover_batch(const PerformanceMap& map, double bandwidth_mbps, Objective objective);

std::string decision_to_json(const Decision& d);

}  // namespace prism
