#include "prism/profiler.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <tuple>

#include "json_util.hpp"
#include "prism/errors.hpp"

namespace prism {

using detail::json;

void SweepGrid::validate() const {
  if (batches.empty() || crs.empty() || bandwidths_mbps.empty()) {
    throw ConfigError("sweep grid: batches, crs and bandwidths must be non-empty");
  }
  if (std::any_of(batches.begin(), batches.end(), [](std::size_t b) { return b < 1; })) {
    throw ConfigError("sweep grid: batch sizes must be at least 1");
  }
  if (std::any_of(crs.begin(), crs.end(), [](double c) { return !(c >= 1.0); })) {
    throw ConfigError("sweep grid: compression rates must be at least 1");
  }
  if (std::any_of(bandwidths_mbps.begin(), bandwidths_mbps.end(), [](int b) { return b <= 0; })) {
    throw ConfigError("sweep grid: bandwidths must be positive");
  }
  if (measured_runs < 1) throw ConfigError("sweep grid: at least one measured run is required");
  if (devices < 2) throw ConfigError("sweep grid: distributed plans need at least two devices");
}

std::string PerfRecord::plan_label() const {
  if (mode != CostMode::Prism) return std::string(to_string(mode));
  std::ostringstream out;
  out << "prism cr=" << cr.value_or(0.0);
  return out.str();
}

namespace {

auto record_key(const PerfRecord& r) {
  return std::make_tuple(r.batch, static_cast<int>(r.mode), r.cr.value_or(0.0), r.bandwidth_mbps);
}

template <typename T>
std::vector<T> sorted_unique(std::vector<T> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

}  // namespace

const PerfRecord* PerformanceMap::find(std::size_t batch, CostMode mode, std::optional<double> cr,
                                       int bandwidth_mbps) const {
  for (const auto& r : records) {
    if (r.batch != batch || r.mode != mode || r.bandwidth_mbps != bandwidth_mbps) continue;
    if (cr.has_value() != r.cr.has_value()) continue;
    if (cr && std::abs(*cr - *r.cr) > 1e-9 * *cr) continue;
    return &r;
  }
  return nullptr;
}

std::vector<std::string> PerformanceMap::failures() const {
  std::vector<std::string> out;
  for (const auto& r : records) {
    if (r.failed) {
      out.push_back("batch " + std::to_string(r.batch) + ", " + r.plan_label() + ", " +
                    std::to_string(r.bandwidth_mbps) + " Mbps");
    }
  }
  return out;
}

void PerformanceMap::sort_records() {
  std::stable_sort(records.begin(), records.end(),
                   [](const PerfRecord& a, const PerfRecord& b) { return record_key(a) < record_key(b); });
}

SimulatorEngine::SimulatorEngine(ModelConfig cfg, CostModel cm, SimOptions options)
    : cfg_(cfg), cm_(cm), options_(options) {
  cfg_.validate();
  cm_.validate();
}

RunMeasurement SimulatorEngine::run(const ExecutionPlan& plan, std::size_t batch, double bandwidth_mbps) {
  ++invocations_;
  const CostModel cm = cm_.with_bandwidth(bandwidth_mbps);
  const SimulationResult r = run_simulation(plan, cfg_, batch, cm, false, 0, options_);
  return {r.overall, r.energy_j};
}

std::size_t sweep_invocations(const SweepGrid& grid) {
  const std::size_t batches = sorted_unique(grid.batches).size();
  const std::size_t crs = sorted_unique(grid.crs).size() + (grid.include_voltage ? 1 : 0);
  const std::size_t bws = sorted_unique(grid.bandwidths_mbps).size();
  return batches * (1 + crs) * bws * (grid.warmup_runs + grid.measured_runs);
}

namespace {

PerfRecord measure(ExecutionEngine& engine, const ExecutionPlan& plan, std::size_t batch, double bandwidth,
                   const SweepGrid& grid, std::size_t& invocations) {
  PerfRecord rec;
  rec.batch = batch;
  rec.mode = cost_mode(plan);
  try {
    for (std::size_t i = 0; i < grid.warmup_runs; ++i) {
      ++invocations;
      engine.run(plan, batch, bandwidth);
    }
    // Welford running mean and variance.
    double mean = 0.0, m2 = 0.0, comp = 0.0, staging = 0.0, comm = 0.0, energy = 0.0;
    for (std::size_t i = 0; i < grid.measured_runs; ++i) {
      ++invocations;
      const RunMeasurement m = engine.run(plan, batch, bandwidth);
      const auto n = static_cast<double>(i + 1);
      const double delta = m.breakdown.total_ms - mean;
      mean += delta / n;
      m2 += delta * (m.breakdown.total_ms - mean);
      comp += (m.breakdown.comp_ms - comp) / n;
      staging += (m.breakdown.staging_ms - staging) / n;
      comm += (m.breakdown.comm_ms - comm) / n;
      energy += (m.energy_j - energy) / n;
    }
    rec.runs = grid.measured_runs;
    rec.total_ms = mean;
    rec.per_sample_ms = mean / static_cast<double>(batch);
    rec.per_sample_j = energy / static_cast<double>(batch);
    rec.comp_ms = comp;
    rec.staging_ms = staging;
    rec.comm_ms = comm;
    rec.std_ms = grid.measured_runs > 1 ? std::sqrt(m2 / static_cast<double>(grid.measured_runs - 1)) : 0.0;
  } catch (const std::exception&) {
    rec = PerfRecord{};
    rec.batch = batch;
    rec.mode = cost_mode(plan);
    rec.failed = true;
  }
  return rec;
}

}  // namespace

PerformanceMap run_sweep(const SweepGrid& grid, ExecutionEngine& engine, const ModelConfig& cfg,
                         const CostModel& cm) {
  grid.validate();
  cfg.validate();
  PerformanceMap map;
  map.model = cfg;
  map.grid = grid;
  map.cost_model_hash = cost_model_hash(cm);

  const auto batches = sorted_unique(grid.batches);
  const auto crs = sorted_unique(grid.crs);
  const auto bws = sorted_unique(grid.bandwidths_mbps);

  std::vector<std::pair<ExecutionPlan, std::optional<double>>> distributed;
  for (double cr : crs) {
    distributed.emplace_back(ExecutionPlan::prism_cr(cfg.seq_len, grid.devices, cr), cr);
  }
  if (grid.include_voltage) distributed.emplace_back(ExecutionPlan::voltage(cfg.seq_len, grid.devices), 1.0);

  const ExecutionPlan local = ExecutionPlan::local(cfg.seq_len);
  for (std::size_t batch : batches) {
    for (int bw : bws) {
      PerfRecord r = measure(engine, local, batch, bw, grid, map.invocations);
      r.bandwidth_mbps = bw;
      map.records.push_back(r);
    }
    for (const auto& [plan, cr] : distributed) {
      for (int bw : bws) {
        PerfRecord r = measure(engine, plan, batch, bw, grid, map.invocations);
        r.cr = cr;
        r.bandwidth_mbps = bw;
        map.records.push_back(r);
      }
    }
  }
  map.sort_records();
  return map;
}

namespace {

json grid_to_json(const SweepGrid& g) {
  return {{"batches", g.batches},           {"crs", g.crs},
          {"bandwidths_mbps", g.bandwidths_mbps}, {"warmup_runs", g.warmup_runs},
          {"measured_runs", g.measured_runs}, {"devices", g.devices},
          {"include_voltage", g.include_voltage}};
}

SweepGrid grid_from_json(const json& j) {
  using namespace detail;
  SweepGrid g;
  try {
    g.batches = member(j, "batches", "grid").get<std::vector<std::size_t>>();
    g.crs = member(j, "crs", "grid").get<std::vector<double>>();
    g.bandwidths_mbps = member(j, "bandwidths_mbps", "grid").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("grid: ") + e.what());
  }
  g.warmup_runs = get_count(j, "warmup_runs", "grid");
  g.measured_runs = get_count(j, "measured_runs", "grid");
  g.devices = get_count(j, "devices", "grid");
  g.include_voltage = get_bool(j, "include_voltage", "grid");
  return g;
}

json model_to_json(const ModelConfig& c) {
  return {{"embed_dim", c.embed_dim},     {"num_heads", c.num_heads}, {"num_layers", c.num_layers},
          {"mlp_ratio", c.mlp_ratio},     {"seq_len", c.seq_len},     {"num_classes", c.num_classes},
          {"patch_dim", c.patch_dim}};
}

ModelConfig model_from_json(const json& j) {
  using namespace detail;
  ModelConfig c;
  c.embed_dim = get_count(j, "embed_dim", "model");
  c.num_heads = get_count(j, "num_heads", "model");
  c.num_layers = get_count(j, "num_layers", "model");
  c.mlp_ratio = get_number(j, "mlp_ratio", "model");
  c.seq_len = get_count(j, "seq_len", "model");
  c.num_classes = get_count(j, "num_classes", "model");
  c.patch_dim = get_count(j, "patch_dim", "model");
  c.validate();
  return c;
}

json record_to_json(const PerfRecord& r) {
  json j = json::object();
  j["batch"] = r.batch;
  j["mode"] = to_string(r.mode);
  j["cr"] = r.cr ? json(*r.cr) : json(nullptr);
  j["bandwidth_mbps"] = r.bandwidth_mbps;
  j["total_ms"] = r.total_ms;
  j["per_sample_ms"] = r.per_sample_ms;
  j["per_sample_j"] = r.per_sample_j;
  j["comp_ms"] = r.comp_ms;
  j["staging_ms"] = r.staging_ms;
  j["comm_ms"] = r.comm_ms;
  j["runs"] = r.runs;
  j["std_ms"] = r.std_ms;
  j["failed"] = r.failed;
  return j;
}

PerfRecord record_from_json(const json& j, std::size_t index) {
  using namespace detail;
  const std::string path = "records[" + std::to_string(index) + "]";
  PerfRecord r;
  r.batch = get_count(j, "batch", path);
  try {
    r.mode = cost_mode_from_string(get_string(j, "mode", path));
  } catch (const ConfigError& e) {
    throw ParseError(path + ": " + e.what());
  }
  const json& cr = member(j, "cr", path);
  if (cr.is_null()) {
    r.cr = std::nullopt;
  } else if (cr.is_number()) {
    r.cr = cr.get<double>();
  } else {
    throw ParseError(path + ".cr: expected a number or null");
  }
  const json& bw = member(j, "bandwidth_mbps", path);
  if (!bw.is_number_integer()) throw ParseError(path + ".bandwidth_mbps: expected an integer");
  r.bandwidth_mbps = bw.get<int>();
  r.total_ms = get_number(j, "total_ms", path);
  r.per_sample_ms = get_number(j, "per_sample_ms", path);
  r.per_sample_j = get_number(j, "per_sample_j", path);
  r.comp_ms = get_number(j, "comp_ms", path);
  r.staging_ms = get_number(j, "staging_ms", path);
  r.comm_ms = get_number(j, "comm_ms", path);
  r.runs = get_count(j, "runs", path);
  r.std_ms = get_number(j, "std_ms", path);
  r.failed = get_bool(j, "failed", path);
  return r;
}

}  // namespace

std::string map_to_json(const PerformanceMap& map) {
  json records = json::array();
  for (const auto& r : map.records) records.push_back(record_to_json(r));
  const json j = {{"schema", 1},
                  {"model", model_to_json(map.model)},
                  {"grid", grid_to_json(map.grid)},
                  {"cost_model_hash", map.cost_model_hash},
                  {"created", map.created},
                  {"invocations", map.invocations},
                  {"records", records}};
  return j.dump(1) + "\n";
}

PerformanceMap map_from_json(std::string_view text) {
  using namespace detail;
  const json j = parse_json(text, "performance map");
  check_schema(j, 1, "performance map");
  PerformanceMap map;
  map.model = model_from_json(member(j, "model", "performance map"));
  map.grid = grid_from_json(member(j, "grid", "performance map"));
  map.cost_model_hash = get_string(j, "cost_model_hash", "performance map");
  map.created = get_string(j, "created", "performance map");
  map.invocations = get_count(j, "invocations", "performance map");
  const json& records = member(j, "records", "performance map");
  if (!records.is_array()) throw ParseError("performance map: records must be an array");
  for (std::size_t i = 0; i < records.size(); ++i) map.records.push_back(record_from_json(records[i], i));
  map.sort_records();
  return map;
}

void save_map(const PerformanceMap& map, const std::filesystem::path& path) {
  detail::write_text(path, map_to_json(map));
}

PerformanceMap load_map(const std::filesystem::path& path) { return map_from_json(detail::read_text(path)); }

}  // namespace prism
