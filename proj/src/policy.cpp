#include "prism/policy.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "json_util.hpp"
#include "prism/errors.hpp"

namespace prism {

using detail::json;

Objective objective_from_string(std::string_view name) {
  if (name == "latency") return Objective::MinPerSampleLatency;
  if (name == "energy") return Objective::MinPerSampleEnergy;
  throw ConfigError("unknown objective '" + std::string(name) + "' (expected latency or energy)");
}

std::string_view to_string(Objective objective) {
  return objective == Objective::MinPerSampleLatency ? "latency" : "energy";
}

std::string PlanChoice::describe() const {
  if (mode != CostMode::Prism) return std::string(prism::to_string(mode));
  std::ostringstream out;
  out << "prism cr=" << cr.value_or(0.0);
  return out.str();
}

ExecutionPlan PlanChoice::to_plan(const PerformanceMap& map) const {
  const std::size_t n = map.model.seq_len;
  switch (mode) {
    case CostMode::Local: return ExecutionPlan::local(n);
    case CostMode::Voltage: return ExecutionPlan::voltage(n, map.grid.devices);
    case CostMode::Prism: return ExecutionPlan::prism_cr(n, map.grid.devices, cr.value_or(1.0));
  }
  throw ConfigError("unknown plan mode");
}

namespace {

double objective_value(const PlanEstimate& e, Objective o) {
  return o == Objective::MinPerSampleLatency ? e.per_sample_ms : e.per_sample_j;
}

bool same_plan(const PerfRecord& r, const PlanChoice& p) {
  if (r.mode != p.mode || r.cr.has_value() != p.cr.has_value()) return false;
  return !p.cr || std::abs(*r.cr - *p.cr) <= 1e-9 * *p.cr;
}

// Candidate order doubles as the tie-break: Local, then ascending CR.
std::vector<PlanChoice> candidates(const PerformanceMap& map, std::size_t batch, bool include_voltage) {
  bool local = false;
  bool voltage = false;
  std::set<double> crs;
  for (const auto& r : map.records) {
    if (r.batch != batch) continue;
    if (r.mode == CostMode::Local) local = true;
    if (r.mode == CostMode::Voltage) voltage = true;
    if (r.mode == CostMode::Prism && r.cr) crs.insert(*r.cr);
  }
  std::vector<PlanChoice> out;
  if (local) out.push_back({CostMode::Local, std::nullopt});
  if (voltage && include_voltage) out.push_back({CostMode::Voltage, 1.0});
  for (double cr : crs) out.push_back({CostMode::Prism, cr});
  return out;
}

}  // namespace

std::optional<PlanEstimate> estimate(const PerformanceMap& map, const PlanChoice& plan, std::size_t batch,
                                     double bandwidth_mbps) {
  std::map<int, const PerfRecord*> by_bw;
  for (const auto& r : map.records) {
    if (r.batch == batch && !r.failed && same_plan(r, plan)) by_bw.emplace(r.bandwidth_mbps, &r);
  }
  if (by_bw.empty()) return std::nullopt;

  PlanEstimate e;
  e.plan = plan;
  const auto& [lo_bw, lo] = *by_bw.begin();
  const auto& [hi_bw, hi] = *by_bw.rbegin();
  if (plan.mode == CostMode::Local || bandwidth_mbps <= lo_bw) {
    e.per_sample_ms = lo->per_sample_ms;
    e.per_sample_j = lo->per_sample_j;
    return e;
  }
  if (bandwidth_mbps >= hi_bw) {
    e.per_sample_ms = hi->per_sample_ms;
    e.per_sample_j = hi->per_sample_j;
    return e;
  }
  const auto upper = by_bw.lower_bound(static_cast<int>(std::ceil(bandwidth_mbps)));
  const auto lower = std::prev(upper);
  if (upper->first == bandwidth_mbps) {
    e.per_sample_ms = upper->second->per_sample_ms;
    e.per_sample_j = upper->second->per_sample_j;
    return e;
  }
  const double t = (bandwidth_mbps - lower->first) / static_cast<double>(upper->first - lower->first);
  e.per_sample_ms = lower->second->per_sample_ms + t * (upper->second->per_sample_ms - lower->second->per_sample_ms);
  e.per_sample_j = lower->second->per_sample_j + t * (upper->second->per_sample_j - lower->second->per_sample_j);
  return e;
}

Decision select_plan(const PerformanceMap& map, std::size_t batch, double observed_bw_mbps, Objective objective,
                     const PolicyOptions& options) {
  if (map.records.empty()) throw PolicyError("performance map has no records");
  if (!(observed_bw_mbps > 0.0) || !std::isfinite(observed_bw_mbps)) {
    throw ConfigError("observed bandwidth must be positive");
  }

  Decision d;
  d.objective = objective;
  d.requested_batch = batch;
  d.bandwidth_mbps = observed_bw_mbps;

  std::set<std::size_t> batches;
  std::set<int> bandwidths;
  for (const auto& r : map.records) {
    batches.insert(r.batch);
    bandwidths.insert(r.bandwidth_mbps);
  }
  std::vector<std::string> warnings;
  if (batches.count(batch) != 0) {
    d.batch = batch;
  } else if (!options.nearest_batch) {
    throw LookupError("batch " + std::to_string(batch) + " is not in the performance map");
  } else {
    d.batch = *batches.begin();
    for (std::size_t b : batches) {
      const auto dist = [&](std::size_t x) { return x > batch ? x - batch : batch - x; };
      if (dist(b) < dist(d.batch)) d.batch = b;
    }
    warnings.push_back("batch " + std::to_string(batch) + " not profiled; using nearest batch " +
                       std::to_string(d.batch));
  }
  if (observed_bw_mbps < *bandwidths.begin() || observed_bw_mbps > *bandwidths.rbegin()) {
    std::ostringstream w;
    w << "bandwidth " << observed_bw_mbps << " Mbps outside the profiled range [" << *bandwidths.begin() << ", "
      << *bandwidths.rbegin() << "]; clamped";
    warnings.push_back(w.str());
  }

  std::vector<PlanEstimate> ranked;
  for (const auto& plan : candidates(map, d.batch, options.include_voltage)) {
    if (auto e = estimate(map, plan, d.batch, observed_bw_mbps)) ranked.push_back(*e);
  }
  if (ranked.empty()) {
    throw PolicyError("every candidate plan failed at batch " + std::to_string(d.batch));
  }
  // Stable: equal values keep candidate (tie-break) order.
  std::stable_sort(ranked.begin(), ranked.end(), [&](const PlanEstimate& a, const PlanEstimate& b) {
    return objective_value(a, objective) < objective_value(b, objective);
  });
  d.chosen = ranked[0];
  if (ranked.size() > 1) {
    d.runner_up = ranked[1];
    d.margin = objective_value(ranked[1], objective) - objective_value(ranked[0], objective);
  }
  if (!warnings.empty()) {
    std::string joined;
    for (const auto& w : warnings) joined += (joined.empty() ? "" : "; ") + w;
    d.warning = joined;
  }
  return d;
}

std::optional<std::size_t> crossover_batch(const PerformanceMap& map, double bandwidth_mbps, Objective objective) {
  std::set<std::size_t> batches;
  for (const auto& r : map.records) batches.insert(r.batch);
  for (std::size_t b : batches) {
    try {
      if (select_plan(map, b, bandwidth_mbps, objective).chosen.plan.mode != CostMode::Local) return b;
    } catch (const PolicyError&) {
    }
  }
  return std::nullopt;
}

std::string decision_to_json(const Decision& d) {
  auto estimate_json = [](const PlanEstimate& e) {
    return json{{"plan", e.plan.describe()},
                {"mode", to_string(e.plan.mode)},
                {"cr", e.plan.cr ? json(*e.plan.cr) : json(nullptr)},
                {"per_sample_ms", e.per_sample_ms},
                {"per_sample_j", e.per_sample_j}};
  };
  json j = {{"objective", to_string(d.objective)},
            {"requested_batch", d.requested_batch},
            {"batch", d.batch},
            {"bandwidth_mbps", d.bandwidth_mbps},
            {"chosen", estimate_json(d.chosen)},
            {"runner_up", d.runner_up ? estimate_json(*d.runner_up) : json(nullptr)},
            {"margin", d.margin},
            {"warning", d.warning ? json(*d.warning) : json(nullptr)}};
  return j.dump(2) + "\n";
}

}  // namespace prism
