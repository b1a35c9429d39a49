#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "prism/segmodel.hpp"

namespace prism {

/// Padded sequence length over (segments * devices); see PartitionSpec.
double compression_rate(std::size_t seq_len, std::size_t segments, std::size_t devices);

/// Elements one device receives per block: (P-1) N_p D for full-tensor
/// exchange, (P-1) L D for Segment Means, 0 for Local.
std::size_t comm_elements_per_block(const ModelConfig& cfg, const ExecutionPlan& plan);

/// Bytes one device moves across the host boundary in one run (sent plus
/// received, every block, every sample).
std::size_t staged_bytes_per_run(const ModelConfig& cfg, const ExecutionPlan& plan, std::size_t batch);

/// Rows whose keys and values a device projects in every block.
std::size_t key_rows(const ExecutionPlan& plan);

/// Per-device GFLOPs of one forward pass at 2 FLOPs per multiply-accumulate.
///
/// Counts the Q/K/V/O projections, attention scores and weighted values, the
/// MLP, the patch embedding of the device's own rows and, on device 0, the
/// classification head. Softmax, normalisation and activations are ignored.
double flops_per_device(const ModelConfig& cfg, const ExecutionPlan& plan);

struct FlopsReport {
  std::string label;
  double gflops_per_device = 0.0;
  double comp_speedup_pct = 0.0;
  std::size_t comm_elements_per_block = 0;
  double comm_speedup_pct = 0.0;
  double cr = 1.0;
};

/// (comp_su_pct, comm_su_pct) of `dist` against the single-device `single`.
std::pair<double, double> speedups(const FlopsReport& single, const FlopsReport& dist);

FlopsReport flops_report(const ModelConfig& cfg, const ExecutionPlan& plan);

/// Local, full-tensor and Segment Means rows (one per compression rate) on
/// `devices` devices, speed-ups relative to the Local row.
std::vector<FlopsReport> flops_table(const ModelConfig& cfg, std::size_t devices, const std::vector<double>& crs);

}  // namespace prism
