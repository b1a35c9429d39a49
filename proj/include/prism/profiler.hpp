#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "prism/commsim.hpp"
#include "prism/segmodel.hpp"

namespace prism {

struct SweepGrid {
  std::vector<std::size_t> batches{1, 2, 4, 8, 16, 32};
  std::vector<double> crs{3.3, 4.95, 9.9};
  std::vector<int> bandwidths_mbps{200, 300, 400, 500, 600, 700, 800, 900};
  std::size_t warmup_runs = 20;
  std::size_t measured_runs = 20;
  std::size_t devices = 2;
  /// Also profile full-tensor exchange (CR 1) as a comparison baseline.
  bool include_voltage = false;

  void validate() const;

  friend bool operator==(const SweepGrid&, const SweepGrid&) = default;
};

struct PerfRecord {
  std::size_t batch = 1;
  CostMode mode = CostMode::Local;
  /// Compression rate of Segment Means records; 1 for full-tensor, none for Local.
  std::optional<double> cr;
  int bandwidth_mbps = 0;
  double total_ms = 0.0;
  double per_sample_ms = 0.0;
  double per_sample_j = 0.0;
  double comp_ms = 0.0;
  double staging_ms = 0.0;
  double comm_ms = 0.0;
  std::size_t runs = 0;
  double std_ms = 0.0;
  bool failed = false;

  /// "local", "voltage" or "prism cr=<cr>".
  [[nodiscard]] std::string plan_label() const;

  friend bool operator==(const PerfRecord&, const PerfRecord&) = default;
};

struct PerformanceMap {
  ModelConfig model;
  SweepGrid grid;
  std::string cost_model_hash;
  std::string created;
  std::size_t invocations = 0;
  /// Sorted by (batch, mode, cr, bandwidth).
  std::vector<PerfRecord> records;

  [[nodiscard]] const PerfRecord* find(std::size_t batch, CostMode mode, std::optional<double> cr,
                                       int bandwidth_mbps) const;
  [[nodiscard]] std::vector<std::string> failures() const;
  void sort_records();

  friend bool operator==(const PerformanceMap&, const PerformanceMap&) = default;
};

struct RunMeasurement {
  PhaseBreakdown breakdown;
  double energy_j = 0.0;
};

/// Anything that can execute a plan once and report its cost.
class ExecutionEngine {
 public:
  virtual ~ExecutionEngine() = default;
  virtual RunMeasurement run(const ExecutionPlan& plan, std::size_t batch, double bandwidth_mbps) = 0;
};

/// Runs plans on the threaded device simulator.
class SimulatorEngine final : public ExecutionEngine {
 public:
  SimulatorEngine(ModelConfig cfg, CostModel cm, SimOptions options = {});
  RunMeasurement run(const ExecutionPlan& plan, std::size_t batch, double bandwidth_mbps) override;
  [[nodiscard]] std::size_t invocations() const { return invocations_; }

 private:
  ModelConfig cfg_;
  CostModel cm_;
  SimOptions options_;
  std::size_t invocations_ = 0;
};

/// Profiles every (batch, plan, bandwidth) point of `grid`: warm-up runs are
/// discarded, measured runs are averaged. A point whose engine call throws
/// is recorded as failed and the sweep continues.
PerformanceMap run_sweep(const SweepGrid& grid, ExecutionEngine& engine, const ModelConfig& cfg,
                         const CostModel& cm);

/// Engine calls run_sweep makes for `grid`.
std::size_t sweep_invocations(const SweepGrid& grid);

std::string map_to_json(const PerformanceMap& map);
PerformanceMap map_from_json(std::string_view text);
void save_map(const PerformanceMap& map, const std::filesystem::path& path);
PerformanceMap load_map(const std::filesystem::path& path);

}  // namespace prism
