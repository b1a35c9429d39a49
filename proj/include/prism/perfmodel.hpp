#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "prism/commsim.hpp"
#include "prism/segmodel.hpp"

namespace prism {

/// One measured configuration: latency breakdown in ms and, when known, the
/// energy of the run in J.
struct CalibrationRow {
  CostMode mode = CostMode::Local;
  std::size_t devices = 1;
  std::size_t rows_per_device = 197;
  std::size_t segments = 197;
  double cr = 1.0;
  std::size_t batch = 1;
  double comp_ms = 0.0;
  double other_ms = 0.0;
  double comm_ms = 0.0;
  double total_ms = 0.0;
  std::optional<double> energy_j;
  double bandwidth_mbps = 400.0;

  /// Elements one device contributes to each all-gather for one sample.
  [[nodiscard]] std::size_t exchanged_rows() const;
};

struct CalibrationTable {
  ModelConfig config;
  std::vector<CalibrationRow> rows;

  /// Measurements of ViT-Base on two integrated-GPU boards at 400 Mbps:
  /// Local, Segment Means at CR 9.9 and full-tensor exchange for batches 1 to
  /// 32, with run energies where available.
  static CalibrationTable embedded();

  /// Every row must satisfy total = comp + other + comm within 0.2 ms.
  void validate() const;
};

struct FitResidual {
  CostMode mode = CostMode::Local;
  std::size_t batch = 0;
  double observed = 0.0;
  double predicted = 0.0;
  [[nodiscard]] double relative_error() const { return (predicted - observed) / observed; }
};

struct FitReport {
  CostModel model;
  std::vector<FitResidual> latency;
  std::vector<FitResidual> energy;
  double max_latency_rel_error = 0.0;
  double max_energy_rel_error = 0.0;
  std::vector<std::string> notes;
};

/// Weighted least-squares calibration of every CostModel constant.
///
/// Latency: compute (per mode), staging, collective overhead, network fixed
/// cost and link scale are fitted jointly on the comp/other/comm columns and
/// the totals, each row weighted by 1/sqrt(total). Host copies are charged
/// half to each direction. Energy: compute and transfer (staging = comm)
/// powers from the energy rows, summed over participating devices; the idle
/// power takes the transfer power when no row contains idle time. A power
/// that fits negative is clamped to kMinPhasePowerW and the rest refitted.
FitReport fit_cost_model(const CalibrationTable& table);

inline constexpr double kMinPhasePowerW = 0.1;

struct Prediction {
  PhaseBreakdown breakdown;
  double energy_j = 0.0;
  double per_sample_ms = 0.0;
  double per_sample_j = 0.0;
};

Prediction predict(const ExecutionPlan& plan, const ModelConfig& cfg, std::size_t batch, double bandwidth_mbps,
                   const CostModel& cm);

std::string fit_report_to_json(const FitReport& report);

/// The embedded table fitted once per process.
const CostModel& default_cost_model();

}  // namespace prism
