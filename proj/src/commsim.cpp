#include "prism/commsim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <thread>

#include "json_util.hpp"
#include "prism/errors.hpp"

namespace prism {

using detail::json;

CostMode cost_mode(const ExecutionPlan& plan) {
  if (!plan.distributed()) return CostMode::Local;
  return plan.exchange == Exchange::FullTensor ? CostMode::Voltage : CostMode::Prism;
}

std::string_view to_string(CostMode mode) {
  switch (mode) {
    case CostMode::Local: return "local";
    case CostMode::Prism: return "prism";
    case CostMode::Voltage: return "voltage";
  }
  return "unknown";
}

CostMode cost_mode_from_string(std::string_view name) {
  if (name == "local") return CostMode::Local;
  if (name == "prism") return CostMode::Prism;
  if (name == "voltage") return CostMode::Voltage;
  throw ConfigError("unknown execution mode '" + std::string(name) + "'");
}

namespace {

bool finite_nonneg(double v) { return std::isfinite(v) && v >= 0.0; }
bool finite_pos(double v) { return std::isfinite(v) && v > 0.0; }

}  // namespace

void CostModel::validate() const {
  if (!finite_pos(stage_d2h_rate_bytes_per_ms) || !finite_pos(stage_h2d_rate_bytes_per_ms)) {
    throw ConfigError("cost model: staging rates must be positive");
  }
  if (!finite_pos(net_bandwidth_mbps)) throw ConfigError("cost model: bandwidth must be positive");
  if (!finite_pos(net_link_scale)) throw ConfigError("cost model: link scale must be positive");
  if (!finite_nonneg(collective_overhead_ms) || !finite_nonneg(net_fixed_ms)) {
    throw ConfigError("cost model: fixed costs must be non-negative");
  }
  for (std::size_t m = 0; m < kCostModes; ++m) {
    if (!finite_nonneg(comp_intercept_ms[m]) || !finite_nonneg(comp_per_sample_ms[m])) {
      throw ConfigError("cost model: compute coefficients for " +
                        std::string(to_string(static_cast<CostMode>(m))) + " must be non-negative");
    }
  }
  if (!finite_nonneg(power.comp_w) || !finite_nonneg(power.stage_w) || !finite_nonneg(power.comm_w) ||
      !finite_nonneg(power.idle_w)) {
    throw ConfigError("cost model: phase powers must be non-negative");
  }
}

double CostModel::compute_ms(CostMode mode, std::size_t batch) const {
  if (batch < 1) throw ConfigError("batch size must be at least 1");
  const auto m = static_cast<std::size_t>(mode);
  return comp_intercept_ms[m] + comp_per_sample_ms[m] * static_cast<double>(batch);
}

CostModel CostModel::with_bandwidth(double mbps) const {
  if (!finite_pos(mbps)) throw ConfigError("bandwidth must be positive");
  CostModel out = *this;
  out.net_bandwidth_mbps = mbps;
  return out;
}

namespace {

json cost_model_json(const CostModel& cm) {
  json compute = json::object();
  for (std::size_t m = 0; m < kCostModes; ++m) {
    compute[std::string(to_string(static_cast<CostMode>(m)))] = {
        {"intercept_ms", cm.comp_intercept_ms[m]}, {"per_sample_ms", cm.comp_per_sample_ms[m]}};
  }
  return {{"schema", 1},
          {"staging",
           {{"d2h_bytes_per_ms", cm.stage_d2h_rate_bytes_per_ms},
            {"h2d_bytes_per_ms", cm.stage_h2d_rate_bytes_per_ms},
            {"collective_overhead_ms", cm.collective_overhead_ms}}},
          {"network",
           {{"bandwidth_mbps", cm.net_bandwidth_mbps},
            {"link_scale", cm.net_link_scale},
            {"fixed_ms", cm.net_fixed_ms}}},
          {"compute", compute},
          {"power_w",
           {{"comp", cm.power.comp_w},
            {"stage", cm.power.stage_w},
            {"comm", cm.power.comm_w},
            {"idle", cm.power.idle_w}}}};
}

}  // namespace

std::string cost_model_to_json(const CostModel& cm) { return cost_model_json(cm).dump(2) + "\n"; }

CostModel cost_model_from_json(std::string_view text) {
  using namespace detail;
  const json j = parse_json(text, "cost model");
  check_schema(j, 1, "cost model");
  CostModel cm;
  const json& st = member(j, "staging", "cost model");
  cm.stage_d2h_rate_bytes_per_ms = get_number(st, "d2h_bytes_per_ms", "staging");
  cm.stage_h2d_rate_bytes_per_ms = get_number(st, "h2d_bytes_per_ms", "staging");
  cm.collective_overhead_ms = get_number(st, "collective_overhead_ms", "staging");
  const json& net = member(j, "network", "cost model");
  cm.net_bandwidth_mbps = get_number(net, "bandwidth_mbps", "network");
  cm.net_link_scale = get_number(net, "link_scale", "network");
  cm.net_fixed_ms = get_number(net, "fixed_ms", "network");
  const json& comp = member(j, "compute", "cost model");
  for (std::size_t m = 0; m < kCostModes; ++m) {
    const std::string name(to_string(static_cast<CostMode>(m)));
    const json& c = member(comp, name, "compute");
    cm.comp_intercept_ms[m] = get_number(c, "intercept_ms", "compute." + name);
    cm.comp_per_sample_ms[m] = get_number(c, "per_sample_ms", "compute." + name);
  }
  const json& pw = member(j, "power_w", "cost model");
  cm.power.comp_w = get_number(pw, "comp", "power_w");
  cm.power.stage_w = get_number(pw, "stage", "power_w");
  cm.power.comm_w = get_number(pw, "comm", "power_w");
  cm.power.idle_w = get_number(pw, "idle", "power_w");
  cm.validate();
  return cm;
}

void save_cost_model(const CostModel& cm, const std::filesystem::path& path) {
  cm.validate();
  detail::write_text(path, cost_model_to_json(cm));
}

CostModel load_cost_model(const std::filesystem::path& path) {
  return cost_model_from_json(detail::read_text(path));
}

std::string cost_model_hash(const CostModel& cm) {
  const std::string canonical = cost_model_json(cm).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : canonical) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double staging_time(double bytes, const CostModel& cm) {
  return bytes / cm.stage_d2h_rate_bytes_per_ms + bytes / cm.stage_h2d_rate_bytes_per_ms;
}

double network_time(double bytes, const CostModel& cm) {
  const double bits_per_ms = cm.net_bandwidth_mbps * cm.net_link_scale * 1000.0;
  return bytes * 8.0 / bits_per_ms + cm.net_fixed_ms;
}

void VirtualClock::advance(double ms) {
  if (!(ms >= 0.0)) throw ConfigError("virtual clock cannot move backwards");
  now_ += ms;
}

void VirtualClock::advance_to(double t) noexcept { now_ = std::max(now_, t); }

SimWorld::SimWorld(std::size_t devices, CostModel cm, SimOptions options)
    : devices_(devices), cm_(cm), options_(options), state_(devices) {
  if (devices < 1) throw ConfigError("simulated world needs at least one device");
  if (!(options.deadlock_timeout_ms > 0.0)) throw ConfigError("deadlock timeout must be positive");
}

void SimWorld::jitter(std::size_t device) {
  if (options_.jitter_seed == 0) return;
  std::uint64_t n = 0;
  {
    std::lock_guard lock(mutex_);
    n = state_[device].gathers;
  }
  Rng rng(options_.jitter_seed ^ (device * 0x9e3779b97f4a7c15ULL) ^ (n << 20));
  std::this_thread::sleep_for(std::chrono::microseconds(rng.next_u64() % 300));
}

std::optional<std::string> SimWorld::deadlock_reason() const {
  if (arrived_ == 0) return std::nullopt;
  double earliest = std::numeric_limits<double>::infinity();
  for (const auto& s : state_) {
    if (s.arrived) earliest = std::min(earliest, s.arrival_ms);
  }
  for (std::size_t j = 0; j < devices_; ++j) {
    const auto& s = state_[j];
    if (s.arrived) continue;
    if (s.left) {
      return "device " + std::to_string(j) + " finished without joining all-gather #" +
             std::to_string(generation_ + 1);
    }
    if (s.clock.now() > earliest + options_.deadlock_timeout_ms) {
      return "device " + std::to_string(j) + " did not reach all-gather #" +
             std::to_string(generation_ + 1) + " within " +
             std::to_string(options_.deadlock_timeout_ms) + " ms of virtual time";
    }
  }
  return std::nullopt;
}

void SimWorld::complete_round() {
  std::vector<Matrix> payloads;
  payloads.reserve(devices_);
  std::size_t total_elements = 0;
  for (auto& s : state_) {
    payloads.push_back(std::move(s.payload.data));
    total_elements += s.payload.elements;
  }

  std::vector<GatherTiming> timing(devices_);
  double completion = 0.0;
  for (std::size_t i = 0; i < devices_; ++i) {
    const double sent = static_cast<double>(state_[i].payload.elements * kElementBytes);
    const double recv = static_cast<double>((total_elements - state_[i].payload.elements) * kElementBytes);
    timing[i].staging_ms = sent / cm_.stage_d2h_rate_bytes_per_ms + recv / cm_.stage_h2d_rate_bytes_per_ms +
                           cm_.collective_overhead_ms;
    timing[i].comm_ms = network_time(recv, cm_);
    completion = std::max(completion, state_[i].arrival_ms + timing[i].staging_ms + timing[i].comm_ms);
  }
  for (std::size_t i = 0; i < devices_; ++i) {
    auto& s = state_[i];
    auto& t = timing[i];
    t.wait_ms = completion - (s.arrival_ms + t.staging_ms + t.comm_ms);
    t.completed_at_ms = completion;
    s.phases.staging_ms += t.staging_ms;
    s.phases.comm_ms += t.comm_ms;
    s.phases.total_ms = s.phases.comp_ms + s.phases.staging_ms + s.phases.comm_ms;
    s.wait_ms += t.wait_ms;
    s.clock.advance_to(completion);
    s.result.payloads = payloads;
    s.result.timing = t;
    s.arrived = false;
    s.payload = Payload{};
  }
  arrived_ = 0;
  ++generation_;
}

GatherResult SimWorld::all_gather(std::size_t device, Payload payload) {
  if (device >= devices_) throw ConfigError("all_gather: device index out of range");
  if (!payload.data.empty() && payload.data.size() != payload.elements) {
    throw ProtocolError("all_gather: payload element count does not match its data");
  }
  jitter(device);

  std::unique_lock lock(mutex_);
  auto& self = state_[device];
  if (failure_) throw DeadlockError("all_gather aborted: " + *failure_);
  if (self.left) throw ProtocolError("all_gather: device " + std::to_string(device) + " already left");
  if (self.arrived) throw ProtocolError("all_gather: device " + std::to_string(device) + " joined twice");
  ++self.gathers;

  if (devices_ == 1) {
    GatherResult r;
    r.payloads.push_back(std::move(payload.data));
    r.timing.completed_at_ms = self.clock.now();
    return r;
  }

  for (std::size_t j = 0; j < devices_; ++j) {
    const auto& other = state_[j];
    if (j != device && other.arrived && other.payload.elements != payload.elements) {
      failure_ = "device " + std::to_string(device) + " sent " + std::to_string(payload.elements) +
                 " elements, device " + std::to_string(j) + " sent " + std::to_string(other.payload.elements);
      cv_.notify_all();
      throw ProtocolError("all_gather: payload mismatch: " + *failure_);
    }
  }

  self.arrived = true;
  self.arrival_ms = self.clock.now();
  self.payload = std::move(payload);
  ++arrived_;

  if (arrived_ == devices_) {
    complete_round();
    cv_.notify_all();
    return std::move(self.result);
  }

  const std::size_t generation = generation_;
  cv_.notify_all();
  while (generation_ == generation) {
    if (failure_) throw DeadlockError("all_gather aborted: " + *failure_);
    if (auto reason = deadlock_reason()) {
      failure_ = *reason;
      cv_.notify_all();
      throw DeadlockError("all_gather deadlock: " + *reason);
    }
    cv_.wait(lock);
  }
  return std::move(self.result);
}

void SimWorld::compute(std::size_t device, double ms) {
  if (device >= devices_) throw ConfigError("compute: device index out of range");
  std::lock_guard lock(mutex_);
  auto& s = state_[device];
  s.clock.advance(ms);
  s.phases.comp_ms += ms;
  s.phases.total_ms = s.phases.comp_ms + s.phases.staging_ms + s.phases.comm_ms;
  cv_.notify_all();
}

void SimWorld::leave(std::size_t device) {
  if (device >= devices_) throw ConfigError("leave: device index out of range");
  std::lock_guard lock(mutex_);
  state_[device].left = true;
  cv_.notify_all();
}

PhaseBreakdown SimWorld::breakdown(std::size_t device) const {
  std::lock_guard lock(mutex_);
  return state_.at(device).phases;
}

double SimWorld::now(std::size_t device) const {
  std::lock_guard lock(mutex_);
  return state_.at(device).clock.now();
}

double SimWorld::wait_ms(std::size_t device) const {
  std::lock_guard lock(mutex_);
  return state_.at(device).wait_ms;
}

std::size_t SimWorld::collectives_completed() const {
  std::lock_guard lock(mutex_);
  return generation_;
}

std::uint64_t input_seed(std::uint64_t seed, std::size_t sample) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(sample) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

void check_run_inputs(const ExecutionPlan& plan, const ModelConfig& cfg, std::size_t batch,
                      const CostModel& cm) {
  cfg.validate();
  plan.validate();
  cm.validate();
  if (batch < 1) throw ConfigError("batch size must be at least 1");
  if (plan.partition.seq_len != cfg.seq_len) {
    throw ConfigError("plan sequence length " + std::to_string(plan.partition.seq_len) +
                      " does not match model sequence length " + std::to_string(cfg.seq_len));
  }
}

void run_timing_only(const ExecutionPlan& plan, const ModelConfig& cfg, std::size_t batch,
                     double comp_per_layer, SimWorld& world) {
  const std::size_t devices = plan.devices();
  const std::size_t elements = batch * plan.exchanged_rows() * cfg.embed_dim;
  std::vector<std::exception_ptr> errors(devices);
  {
    std::vector<std::jthread> threads;
    threads.reserve(devices);
    for (std::size_t p = 0; p < devices; ++p) {
      threads.emplace_back([&, p] {
        try {
          for (std::size_t l = 0; l < cfg.num_layers; ++l) {
            if (plan.distributed()) world.all_gather(p, Payload::shape_only(elements));
            world.compute(p, comp_per_layer);
          }
        } catch (...) {
          errors[p] = std::current_exception();
        }
        world.leave(p);
      });
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

SimulationResult run_simulation(const ExecutionPlan& plan, const ModelConfig& cfg, std::size_t batch,
                                const CostModel& cm, bool execute_numerics, std::uint64_t seed,
                                const SimOptions& options) {
  check_run_inputs(plan, cfg, batch, cm);
  const std::size_t devices = plan.devices();
  const double comp_per_layer =
      cm.compute_ms(cost_mode(plan), batch) / static_cast<double>(cfg.num_layers);
  SimWorld world(devices, cm, options);
  SimulationResult result;

  if (execute_numerics) {
    const Weights w = Weights::random(cfg, seed);
    std::vector<Matrix> inputs;
    inputs.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) inputs.push_back(random_tokens(cfg, input_seed(seed, b)));
    if (plan.distributed()) {
      result.numerics = forward_distributed(inputs, plan, w, world,
                                            [&](std::size_t p, std::size_t) { world.compute(p, comp_per_layer); });
    } else {
      DistributedOutput out;
      out.log.received.assign(cfg.num_layers, std::vector<std::size_t>(1, 0));
      for (const auto& x : inputs) out.samples.push_back(forward_local(x, w));
      for (std::size_t l = 0; l < cfg.num_layers; ++l) world.compute(0, comp_per_layer);
      result.numerics = std::move(out);
    }
  } else {
    run_timing_only(plan, cfg, batch, comp_per_layer, world);
  }

  double busiest = -1.0;
  for (std::size_t p = 0; p < devices; ++p) {
    const PhaseBreakdown b = world.breakdown(p);
    result.devices.push_back(b);
    result.makespan_ms = std::max(result.makespan_ms, world.now(p));
    if (b.total_ms > busiest) {
      busiest = b.total_ms;
      result.overall = b;
    }
  }
  for (std::size_t p = 0; p < devices; ++p) {
    result.idle_ms.push_back(result.makespan_ms - result.devices[p].total_ms);
  }
  result.energy_j = energy_j(result, cm);
  return result;
}

PhaseBreakdown closed_form_breakdown(const ExecutionPlan& plan, const ModelConfig& cfg, std::size_t batch,
                                     const CostModel& cm) {
  check_run_inputs(plan, cfg, batch, cm);
  const double comp = cm.compute_ms(cost_mode(plan), batch);
  if (!plan.distributed() || plan.devices() == 1) return PhaseBreakdown::of(comp, 0.0, 0.0);
  const double elements = static_cast<double>(batch * plan.exchanged_rows() * cfg.embed_dim);
  const double sent = elements * kElementBytes;
  const double recv = sent * static_cast<double>(plan.devices() - 1);
  const auto layers = static_cast<double>(cfg.num_layers);
  const double staging = layers * (sent / cm.stage_d2h_rate_bytes_per_ms + recv / cm.stage_h2d_rate_bytes_per_ms +
                                   cm.collective_overhead_ms);
  const double comm = layers * network_time(recv, cm);
  return PhaseBreakdown::of(comp, staging, comm);
}

double energy_j(const PhaseBreakdown& b, const CostModel& cm, std::size_t devices) {
  const double mj = b.comp_ms * cm.power.comp_w + b.staging_ms * cm.power.stage_w + b.comm_ms * cm.power.comm_w;
  return static_cast<double>(devices) * mj / 1000.0;
}

double energy_j(const SimulationResult& result, const CostModel& cm) {
  double total = 0.0;
  for (std::size_t p = 0; p < result.devices.size(); ++p) {
    total += energy_j(result.devices[p], cm, 1);
    if (p < result.idle_ms.size()) total += result.idle_ms[p] * cm.power.idle_w / 1000.0;
  }
  return total;
}

double numerics_deviation(const SimulationResult& result, const ExecutionPlan& plan, const ModelConfig& cfg,
                          std::uint64_t seed) {
  if (!result.numerics) throw ConfigError("simulation ran without numerics");
  const Weights w = Weights::random(cfg, seed);
  const auto& samples = result.numerics->samples;
  if (samples.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const Matrix x = random_tokens(cfg, input_seed(seed, b));
    const Matrix reference = plan.distributed() ? forward_local_padded(x, w, plan.partition).features
                                                : forward_local(x, w).features;
    sum += output_deviation(samples[b].features, reference);
  }
  return sum / static_cast<double>(samples.size());
}

}  // namespace prism
