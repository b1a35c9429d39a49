#pragma once

#include <cstddef>
#include <vector>

#include "prism/numerics.hpp"

namespace prism {

/// What a device contributes to an all-gather. `elements` is the count charged
/// on the wire; `data` may be empty when only timing is simulated.
struct Payload {
  Matrix data;
  std::size_t elements = 0;

  static Payload of(Matrix m) {
    const std::size_t n = m.size();
    return {std::move(m), n};
  }
  static Payload shape_only(std::size_t elements) { return {Matrix{}, elements}; }
};

/// Virtual time a device spent inside one collective.
struct GatherTiming {
  double staging_ms = 0.0;
  double comm_ms = 0.0;
  /// Barrier wait beyond the device's own staging and communication.
  double wait_ms = 0.0;
  double completed_at_ms = 0.0;
};

struct GatherResult {
  /// One entry per device in device-index order (empty matrices for
  /// shape-only payloads).
  std::vector<Matrix> payloads;
  GatherTiming timing;
};

/// A collective transport shared by the device workers of one run. Calls from
/// different devices may arrive concurrently; each call blocks until all
/// devices have contributed.
class Collective {
 public:
  virtual ~Collective() = default;

  [[nodiscard]] virtual std::size_t world_size() const = 0;
  virtual GatherResult all_gather(std::size_t device, Payload payload) = 0;
  /// Charges `ms` of local computation to the device's clock.
  virtual void compute(std::size_t device, double ms) = 0;
  /// Marks a device as finished; collectives it has not joined can no longer
  /// complete.
  virtual void leave(std::size_t device) = 0;
};

}  // namespace prism
