#pragma once

#include <array>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "prism/collective.hpp"
#include "prism/segmodel.hpp"

namespace prism {

/// Compute-model class of a plan: single device, Segment Means exchange, or
/// full-tensor exchange.
enum class CostMode : std::size_t { Local = 0, Prism = 1, Voltage = 2 };
inline constexpr std::size_t kCostModes = 3;

CostMode cost_mode(const ExecutionPlan& plan);
std::string_view to_string(CostMode mode);
CostMode cost_mode_from_string(std::string_view name);

/// Bytes per exchanged activation element (float32).
inline constexpr std::size_t kElementBytes = 4;

struct PhasePowers {
  double comp_w = 6.0;
  double stage_w = 3.0;
  double comm_w = 3.0;
  double idle_w = 2.0;

  friend bool operator==(const PhasePowers&, const PhasePowers&) = default;
};

/// Constants of the CPU-staged transport and device compute model.
///
/// Staging is charged per all-gather as sent/d2h + received/h2d plus a fixed
/// collective overhead, independent of the network. The network charges
/// received bits at net_bandwidth * net_link_scale plus a fixed per-round
/// cost. The link scale is the achieved-to-nominal throughput ratio.
struct CostModel {
  double stage_d2h_rate_bytes_per_ms = 400'000.0;
  double stage_h2d_rate_bytes_per_ms = 400'000.0;
  double collective_overhead_ms = 0.0;
  double net_bandwidth_mbps = 400.0;
  double net_link_scale = 1.0;
  double net_fixed_ms = 0.0;
  std::array<double, kCostModes> comp_intercept_ms{20.0, 70.0, 180.0};
  std::array<double, kCostModes> comp_per_sample_ms{57.0, 28.0, 42.0};
  PhasePowers power;

  void validate() const;
  [[nodiscard]] double compute_ms(CostMode mode, std::size_t batch) const;
  [[nodiscard]] CostModel with_bandwidth(double mbps) const;

  friend bool operator==(const CostModel&, const CostModel&) = default;
};

std::string cost_model_to_json(const CostModel& cm);
CostModel cost_model_from_json(std::string_view text);
void save_cost_model(const CostModel& cm, const std::filesystem::path& path);
CostModel load_cost_model(const std::filesystem::path& path);
/// FNV-1a over the canonical JSON form, as 16 hex digits.
std::string cost_model_hash(const CostModel& cm);

/// Device-to-host plus host-to-device copy time of one tensor.
double staging_time(double bytes, const CostModel& cm);
/// Transfer time of `bytes` over the configured link, plus the fixed round cost.
double network_time(double bytes, const CostModel& cm);

struct PhaseBreakdown {
  double comp_ms = 0.0;
  double staging_ms = 0.0;
  double comm_ms = 0.0;
  double total_ms = 0.0;

  static PhaseBreakdown of(double comp, double staging, double comm) {
    return {comp, staging, comm, comp + staging + comm};
  }

  friend bool operator==(const PhaseBreakdown&, const PhaseBreakdown&) = default;
};

class VirtualClock {
 public:
  [[nodiscard]] double now() const noexcept { return now_; }
  void advance(double ms);
  /// Moves to `t` if it is later than now.
  void advance_to(double t) noexcept;

 private:
  double now_ = 0.0;
};

struct SimOptions {
  double deadlock_timeout_ms = 1e6;
  /// Non-zero: device workers yield for random real-time intervals before
  /// each collective, to exercise schedule independence.
  std::uint64_t jitter_seed = 0;
};

/// Virtual-time world of P devices connected by the staged transport.
///
/// Thread-safe; each device is driven by its own worker. An all-gather
/// completes for everyone at the latest device finish time.
class SimWorld final : public Collective {
 public:
  SimWorld(std::size_t devices, CostModel cm, SimOptions options = {});

  [[nodiscard]] std::size_t world_size() const override { return devices_; }
  GatherResult all_gather(std::size_t device, Payload payload) override;
  void compute(std::size_t device, double ms) override;
  void leave(std::size_t device) override;

  [[nodiscard]] PhaseBreakdown breakdown(std::size_t device) const;
  [[nodiscard]] double now(std::size_t device) const;
  [[nodiscard]] double wait_ms(std::size_t device) const;
  [[nodiscard]] std::size_t collectives_completed() const;

 private:
  struct DeviceState {
    VirtualClock clock;
    PhaseBreakdown phases;
    double wait_ms = 0.0;
    bool arrived = false;
    bool left = false;
    double arrival_ms = 0.0;
    Payload payload;
    GatherResult result;
    std::uint64_t gathers = 0;
  };

  void complete_round();
  [[nodiscard]] std::optional<std::string> deadlock_reason() const;
  void jitter(std::size_t device);

  std::size_t devices_;
  CostModel cm_;
  SimOptions options_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::vector<DeviceState> state_;
  std::size_t arrived_ = 0;
  std::size_t generation_ = 0;
  std::optional<std::string> failure_;
};

struct SimulationResult {
  std::vector<PhaseBreakdown> devices;
  /// Breakdown of the device with the largest busy time.
  PhaseBreakdown overall;
  double makespan_ms = 0.0;
  std::vector<double> idle_ms;
  double energy_j = 0.0;
  /// Present when numerics were executed.
  std::optional<DistributedOutput> numerics;
};

/// Runs the plan on simulated devices. With `execute_numerics` the toy encoder
/// (weights and inputs derived from `seed`) runs inside the same device
/// workers and exchanges real payloads.
SimulationResult run_simulation(const ExecutionPlan& plan, const ModelConfig& cfg,
                                std::size_t batch, const CostModel& cm,
                                bool execute_numerics = false, std::uint64_t seed = 0,
                                const SimOptions& options = {});

/// Same per-device breakdown as run_simulation, evaluated in closed form.
PhaseBreakdown closed_form_breakdown(const ExecutionPlan& plan, const ModelConfig& cfg,
                                     std::size_t batch, const CostModel& cm);

/// Energy of `devices` homogeneous devices each with `b` and no idle time.
double energy_j(const PhaseBreakdown& b, const CostModel& cm, std::size_t devices);
/// Energy of a simulated run including barrier idle time.
double energy_j(const SimulationResult& result, const CostModel& cm);

/// Seeds for the sample inputs of a numerics run.
std::uint64_t input_seed(std::uint64_t seed, std::size_t sample);

/// Mean output_deviation of a numerics run's features against the local
/// forward pass on the same padded inputs. Requires `result.numerics`.
double numerics_deviation(const SimulationResult& result, const ExecutionPlan& plan,
                          const ModelConfig& cfg, std::uint64_t seed);

}  // namespace prism
