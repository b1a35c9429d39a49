#include "prism/costacct.hpp"

#include "prism/commsim.hpp"
#include "prism/errors.hpp"

namespace prism {

double compression_rate(std::size_t seq_len, std::size_t segments, std::size_t devices) {
  return PartitionSpec::make(seq_len, devices, segments).compression_rate();
}

std::size_t comm_elements_per_block(const ModelConfig& cfg, const ExecutionPlan& plan) {
  plan.validate();
  if (!plan.distributed()) return 0;
  return (plan.devices() - 1) * plan.exchanged_rows() * cfg.embed_dim;
}

std::size_t staged_bytes_per_run(const ModelConfig& cfg, const ExecutionPlan& plan, std::size_t batch) {
  plan.validate();
  if (!plan.distributed() || plan.devices() == 1) return 0;
  const std::size_t per_block = plan.devices() * plan.exchanged_rows() * cfg.embed_dim * kElementBytes;
  return cfg.num_layers * batch * per_block;
}

std::size_t key_rows(const ExecutionPlan& plan) {
  const auto& s = plan.partition;
  if (!plan.distributed()) return s.seq_len;
  return s.rows_per_device + (s.devices - 1) * plan.exchanged_rows();
}

double flops_per_device(const ModelConfig& cfg, const ExecutionPlan& plan) {
  cfg.validate();
  plan.validate();
  if (plan.partition.seq_len != cfg.seq_len) throw ConfigError("flops: plan and model disagree on N");
  const auto rows = static_cast<double>(plan.distributed() ? plan.partition.rows_per_device : cfg.seq_len);
  const auto keys = static_cast<double>(key_rows(plan));
  const auto d = static_cast<double>(cfg.embed_dim);
  const auto hidden = static_cast<double>(cfg.mlp_hidden());

  const double q = rows * d * d;
  const double kv = 2.0 * keys * d * d;
  const double attention = 2.0 * rows * keys * d;
  const double out = rows * d * d;
  const double mlp = 2.0 * rows * d * hidden;
  const double per_layer_macs = q + kv + attention + out + mlp;
  const double patch_macs = rows * static_cast<double>(cfg.patch_dim) * d;
  const double head_macs = d * static_cast<double>(cfg.num_classes);
  const double macs = static_cast<double>(cfg.num_layers) * per_layer_macs + patch_macs + head_macs;
  return 2.0 * macs / 1e9;
}

std::pair<double, double> speedups(const FlopsReport& single, const FlopsReport& dist) {
  if (!(single.gflops_per_device > 0.0)) throw ConfigError("speedups: baseline has no FLOPs");
  const double comp = 100.0 * (1.0 - dist.gflops_per_device / single.gflops_per_device);
  const double comm = 100.0 * (dist.cr - 1.0) / dist.cr;
  return {comp, comm};
}

FlopsReport flops_report(const ModelConfig& cfg, const ExecutionPlan& plan) {
  FlopsReport r;
  r.label = plan.describe();
  r.gflops_per_device = flops_per_device(cfg, plan);
  r.comm_elements_per_block = comm_elements_per_block(cfg, plan);
  r.cr = plan.distributed() ? plan.partition.compression_rate() : 1.0;
  r.comm_speedup_pct = 100.0 * (r.cr - 1.0) / r.cr;
  return r;
}

std::vector<FlopsReport> flops_table(const ModelConfig& cfg, std::size_t devices, const std::vector<double>& crs) {
  std::vector<FlopsReport> rows;
  const FlopsReport single = flops_report(cfg, ExecutionPlan::local(cfg.seq_len));
  rows.push_back(single);
  std::vector<ExecutionPlan> plans = {ExecutionPlan::voltage(cfg.seq_len, devices)};
  for (double cr : crs) plans.push_back(ExecutionPlan::prism_cr(cfg.seq_len, devices, cr));
  for (const auto& plan : plans) {
    FlopsReport r = flops_report(cfg, plan);
    std::tie(r.comp_speedup_pct, r.comm_speedup_pct) = speedups(single, r);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace prism
