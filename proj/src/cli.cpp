#include "prism/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "json_util.hpp"
#include "prism/commsim.hpp"
#include "prism/costacct.hpp"
#include "prism/errors.hpp"
#include "prism/perfmodel.hpp"
#include "prism/policy.hpp"
#include "prism/profiler.hpp"

namespace prism {

using detail::json;

ModelConfig numerics_toy_config() {
  ModelConfig cfg;
  cfg.embed_dim = 32;
  cfg.num_heads = 4;
  cfg.num_layers = 2;
  return cfg;
}

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Format { Json, Csv, Md };

Format format_from_string(const std::string& s) {
  if (s == "json") return Format::Json;
  if (s == "csv") return Format::Csv;
  return Format::Md;
}

// printf-style format per numeric column; empty means "print as is".
struct Column {
  std::string name;
  std::string fmt;
};

struct Table {
  std::vector<Column> columns;
  std::vector<std::vector<json>> rows;
};

std::string cell(const json& v, const std::string& fmt) {
  if (v.is_null()) return "";
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  if (fmt.empty()) return v.dump();
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt.c_str(), v.get<double>());
  return buf;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

json table_json(const Table& t) {
  json rows = json::array();
  for (const auto& row : t.rows) {
    json obj = json::object();
    for (std::size_t c = 0; c < t.columns.size(); ++c) obj[t.columns[c].name] = row[c];
    rows.push_back(std::move(obj));
  }
  return rows;
}

void emit(const Table& t, Format format, std::ostream& out) {
  if (format == Format::Json) {
    out << table_json(t).dump(2) << "\n";
    return;
  }
  const bool md = format == Format::Md;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (md) {
        out << (c == 0 ? "| " : " | ") << cells[c];
      } else {
        out << (c == 0 ? "" : ",") << csv_escape(cells[c]);
      }
    }
    out << (md ? " |\n" : "\n");
  };
  std::vector<std::string> header;
  for (const auto& c : t.columns) header.push_back(c.name);
  line(header);
  if (md) line(std::vector<std::string>(t.columns.size(), "---"));
  for (const auto& row : t.rows) {
    std::vector<std::string> cells;
    for (std::size_t c = 0; c < t.columns.size(); ++c) cells.push_back(cell(row[c], t.columns[c].fmt));
    line(cells);
  }
}

struct GlobalOptions {
  std::string cost_model_path;
  std::string format = "md";
  std::ostream* err = nullptr;
};

CostModel resolve_cost_model(const GlobalOptions& g) {
  std::string path = g.cost_model_path;
  if (path.empty()) {
    if (const char* env = std::getenv(kCostModelEnv); env != nullptr) path = env;
  }
  if (path.empty()) return default_cost_model();
  return load_cost_model(path);
}

std::string utc_timestamp() {
  std::time_t t = 0;
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH"); epoch != nullptr && *epoch != '\0') {
    char* end = nullptr;
    t = static_cast<std::time_t>(std::strtoll(epoch, &end, 10));
    if (*end != '\0') throw UsageError("SOURCE_DATE_EPOCH is not an integer");
  } else {
    t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

ExecutionPlan plan_from_flags(const std::string& mode, std::optional<double> cr, std::size_t seq_len,
                              std::size_t devices) {
  try {
    if (mode == "local") {
      if (cr) throw UsageError("--cr does not apply to --mode local");
      return ExecutionPlan::local(seq_len);
    }
    if (mode == "voltage") {
      if (cr && *cr != 1.0) throw UsageError("--mode voltage exchanges full tensors; --cr must be 1 or omitted");
      return ExecutionPlan::voltage(seq_len, devices);
    }
    if (!cr) throw UsageError("--mode prism requires --cr");
    return ExecutionPlan::prism_cr(seq_len, devices, *cr);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

struct Baseline {
  double per_sample_ms = 0.0;
  double per_sample_j = 0.0;
  std::string source;
};

// Voltage reference for gains: profiled records when the map has them,
// otherwise the cost model.
Baseline voltage_baseline(const PerformanceMap& map, std::size_t batch, double bw, const CostModel& cm) {
  if (auto e = estimate(map, {CostMode::Voltage, 1.0}, batch, bw)) return {e->per_sample_ms, e->per_sample_j, "map"};
  const auto p = predict(ExecutionPlan::voltage(map.model.seq_len, map.grid.devices), map.model, batch, bw, cm);
  return {p.per_sample_ms, p.per_sample_j, "model"};
}

double gain_pct(double value, double baseline) { return 100.0 * (1.0 - value / baseline); }

void warn_hash(const PerformanceMap& map, const CostModel& cm, std::ostream& err) {
  if (!map.cost_model_hash.empty() && map.cost_model_hash != cost_model_hash(cm)) {
    err << "warning: map was profiled with cost model " << map.cost_model_hash << ", current model is "
        << cost_model_hash(cm) << "\n";
  }
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
  std::string mode;
  std::optional<double> cr;
  std::size_t batch = 1;
  double bandwidth = 400.0;
  std::size_t devices = 2;
  bool numerics = false;
  std::uint64_t seed = 0;
};

int cmd_simulate(const SimulateArgs& a, const GlobalOptions& g, std::ostream& out) {
  const ModelConfig cfg;
  const ExecutionPlan plan = plan_from_flags(a.mode, a.cr, cfg.seq_len, a.devices);
  const CostModel cm = resolve_cost_model(g).with_bandwidth(a.bandwidth);
  const SimulationResult r = run_simulation(plan, cfg, a.batch, cm);
  const auto& b = r.overall;
  const double batch = static_cast<double>(a.batch);

  Table t;
  t.columns = {{"plan", ""},           {"batch", ""},         {"bandwidth_mbps", "%.1f"},
               {"comp_ms", "%.3f"},    {"staging_ms", "%.3f"}, {"comm_ms", "%.3f"},
               {"total_ms", "%.3f"},   {"per_sample_ms", "%.3f"}, {"energy_j", "%.4f"},
               {"per_sample_j", "%.4f"}};
  std::vector<json> row = {plan.describe(), a.batch,           a.bandwidth,          b.comp_ms,
                           b.staging_ms,    b.comm_ms,         b.total_ms,           b.total_ms / batch,
                           r.energy_j,      r.energy_j / batch};
  if (a.numerics) {
    const ModelConfig toy = numerics_toy_config();
    const ExecutionPlan toy_plan = plan_from_flags(a.mode, a.cr, toy.seq_len, a.devices);
    const SimulationResult n = run_simulation(toy_plan, toy, a.batch, cm, true, a.seed);
    t.columns.push_back({"seed", ""});
    t.columns.push_back({"output_deviation", "%.6e"});
    row.push_back(a.seed);
    row.push_back(numerics_deviation(n, toy_plan, toy, a.seed));
  }
  t.rows.push_back(std::move(row));
  if (format_from_string(g.format) == Format::Json) {
    out << table_json(t).at(0).dump(2) << "\n";
  } else {
    emit(t, format_from_string(g.format), out);
  }
  return kExitOk;
}

// ------------------------------------------------------------------- flops

struct FlopsArgs {
  std::vector<double> crs{9.9, 4.95, 3.3};
  std::size_t devices = 2;
};

int cmd_flops(const FlopsArgs& a, const GlobalOptions& g, std::ostream& out) {
  const ModelConfig cfg;
  std::vector<FlopsReport> rows;
  try {
    rows = flops_table(cfg, a.devices, a.crs);
  } catch (const PartitionError& e) {
    throw UsageError(e.what());
  }
  Table t;
  t.columns = {{"method", ""},           {"cr", "%.2f"},           {"gflops_per_device", "%.3f"},
               {"comp_speedup_pct", "%.2f"}, {"comm_elements_per_block", ""}, {"comm_speedup_pct", "%.2f"}};
  for (const auto& r : rows) {
    const json cr = r.label == "local" ? json(nullptr) : json(r.cr);
    t.rows.push_back({r.label, cr, r.gflops_per_device, r.comp_speedup_pct, r.comm_elements_per_block,
                      r.comm_speedup_pct});
  }
  emit(t, format_from_string(g.format), out);
  return kExitOk;
}

// --------------------------------------------------------------- calibrate

struct CalibrateArgs {
  std::string out_path;
  std::string report_path;
};

int cmd_calibrate(const CalibrateArgs& a, const GlobalOptions& g, std::ostream& out) {
  const FitReport report = fit_cost_model(CalibrationTable::embedded());
  if (!a.out_path.empty()) {
    save_cost_model(report.model, a.out_path);
    *g.err << "wrote cost model " << cost_model_hash(report.model) << " to " << a.out_path << "\n";
  }
  if (!a.report_path.empty()) detail::write_text(a.report_path, fit_report_to_json(report));
  for (const auto& n : report.notes) *g.err << "note: " << n << "\n";

  const Format format = format_from_string(g.format);
  if (format == Format::Json) {
    out << fit_report_to_json(report);
    return kExitOk;
  }
  Table t;
  t.columns = {{"quantity", ""},    {"mode", ""},          {"batch", ""},
               {"observed", "%.3f"}, {"predicted", "%.3f"}, {"rel_error_pct", "%.2f"}};
  auto add = [&](const char* quantity, const std::vector<FitResidual>& rs) {
    for (const auto& r : rs) {
      t.rows.push_back({quantity, std::string(to_string(r.mode)), r.batch, r.observed, r.predicted,
                        100.0 * r.relative_error()});
    }
  };
  add("total_ms", report.latency);
  add("energy_j", report.energy);
  emit(t, format, out);
  if (format == Format::Md) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "\nmax latency error %.2f%%, max energy error %.2f%%\n",
                  100.0 * report.max_latency_rel_error, 100.0 * report.max_energy_rel_error);
    out << buf;
  }
  return kExitOk;
}

// ----------------------------------------------------------------- profile

struct ProfileArgs {
  std::string out_path;
  SweepGrid grid;
};

int cmd_profile(const ProfileArgs& a, const GlobalOptions& g, std::ostream& out) {
  try {
    a.grid.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const ModelConfig cfg;
  const CostModel cm = resolve_cost_model(g);
  SimulatorEngine engine(cfg, cm);
  PerformanceMap map = run_sweep(a.grid, engine, cfg, cm);
  map.created = utc_timestamp();
  save_map(map, a.out_path);
  const auto failures = map.failures();
  for (const auto& f : failures) *g.err << "warning: " << f << "\n";

  Table t;
  t.columns = {{"records", ""}, {"invocations", ""}, {"failures", ""}, {"path", ""}};
  t.rows.push_back({map.records.size(), map.invocations, failures.size(), a.out_path});
  emit(t, format_from_string(g.format), out);
  return kExitOk;
}

// --------------------------------------------------------------------- run

struct RunArgs {
  std::string map_path;
  std::size_t batch = 1;
  double bandwidth = 400.0;
  std::string objective = "latency";
  bool nearest_batch = false;
  bool with_voltage = false;
};

int cmd_run(const RunArgs& a, const GlobalOptions& g, std::ostream& out) {
  const PerformanceMap map = load_map(a.map_path);
  const CostModel cm = resolve_cost_model(g);
  warn_hash(map, cm, *g.err);
  PolicyOptions opts;
  opts.nearest_batch = a.nearest_batch;
  opts.include_voltage = a.with_voltage;
  const Decision d = select_plan(map, a.batch, a.bandwidth, objective_from_string(a.objective), opts);
  if (d.warning) *g.err << "warning: " << *d.warning << "\n";

  const ExecutionPlan plan = d.chosen.plan.to_plan(map);
  const SimulationResult sim = run_simulation(plan, map.model, d.batch, cm.with_bandwidth(a.bandwidth));
  const Baseline base = voltage_baseline(map, d.batch, a.bandwidth, cm);
  const double batch = static_cast<double>(d.batch);
  const double lat_gain = gain_pct(d.chosen.per_sample_ms, base.per_sample_ms);
  const double en_gain = gain_pct(d.chosen.per_sample_j, base.per_sample_j);

  const Format format = format_from_string(g.format);
  if (format == Format::Json) {
    json j = detail::parse_json(decision_to_json(d), "decision");
    j["executed"] = {{"comp_ms", sim.overall.comp_ms},
                     {"staging_ms", sim.overall.staging_ms},
                     {"comm_ms", sim.overall.comm_ms},
                     {"total_ms", sim.overall.total_ms},
                     {"per_sample_ms", sim.overall.total_ms / batch},
                     {"energy_j", sim.energy_j}};
    j["voltage_baseline"] = {
        {"source", base.source}, {"per_sample_ms", base.per_sample_ms}, {"per_sample_j", base.per_sample_j}};
    j["latency_gain_pct"] = lat_gain;
    j["energy_gain_pct"] = en_gain;
    out << j.dump(2) << "\n";
    return kExitOk;
  }
  Table t;
  t.columns = {{"plan", ""},
               {"batch", ""},
               {"bandwidth_mbps", "%.1f"},
               {"objective", ""},
               {"per_sample_ms", "%.3f"},
               {"per_sample_j", "%.4f"},
               {"runner_up", ""},
               {"margin", "%.4f"},
               {"executed_total_ms", "%.3f"},
               {"voltage_per_sample_ms", "%.3f"},
               {"latency_gain_pct", "%.2f"},
               {"energy_gain_pct", "%.2f"}};
  t.rows.push_back({d.chosen.plan.describe(), d.batch, a.bandwidth, a.objective, d.chosen.per_sample_ms,
                    d.chosen.per_sample_j, d.runner_up ? json(d.runner_up->plan.describe()) : json(nullptr),
                    d.margin, sim.overall.total_ms, base.per_sample_ms, lat_gain, en_gain});
  emit(t, format, out);
  return kExitOk;
}

// ------------------------------------------------------------------ report

struct ReportArgs {
  std::string map_path;
  double bandwidth = 400.0;
  std::string objective = "latency";
  std::string series_path;
};

void write_series(const PerformanceMap& map, const std::string& path) {
  std::vector<const PerfRecord*> rows;
  for (const auto& r : map.records) {
    if (!r.failed) rows.push_back(&r);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const PerfRecord* a, const PerfRecord* b) {
    return std::tuple(a->mode, a->cr.value_or(0.0), a->bandwidth_mbps, a->batch) <
           std::tuple(b->mode, b->cr.value_or(0.0), b->bandwidth_mbps, b->batch);
  });
  Table t;
  t.columns = {{"plan", ""},           {"mode", ""},          {"cr", "%.2f"},
               {"bandwidth_mbps", ""}, {"batch", ""},         {"per_sample_ms", "%.4f"},
               {"per_sample_j", "%.5f"}, {"total_ms", "%.4f"}};
  for (const auto* r : rows) {
    t.rows.push_back({r->plan_label(), std::string(to_string(r->mode)), r->cr ? json(*r->cr) : json(nullptr),
                      r->bandwidth_mbps, r->batch, r->per_sample_ms, r->per_sample_j, r->total_ms});
  }
  std::ostringstream s;
  emit(t, Format::Csv, s);
  detail::write_text(path, s.str());
}

int cmd_report(const ReportArgs& a, const GlobalOptions& g, std::ostream& out) {
  const PerformanceMap map = load_map(a.map_path);
  if (map.records.empty()) {
    out << "no records\n";
    return kExitOk;
  }
  const CostModel cm = resolve_cost_model(g);
  warn_hash(map, cm, *g.err);
  const Objective objective = objective_from_string(a.objective);
  if (!a.series_path.empty()) write_series(map, a.series_path);

  std::set<std::size_t> batches;
  for (const auto& r : map.records) batches.insert(r.batch);
  Table t;
  t.columns = {{"batch", ""},
               {"plan", ""},
               {"per_sample_ms", "%.3f"},
               {"voltage_per_sample_ms", "%.3f"},
               {"latency_gain_pct", "%.2f"},
               {"per_sample_j", "%.4f"},
               {"voltage_per_sample_j", "%.4f"},
               {"energy_gain_pct", "%.2f"},
               {"baseline", ""}};
  bool warned = false;
  for (std::size_t b : batches) {
    Decision d;
    try {
      d = select_plan(map, b, a.bandwidth, objective);
    } catch (const PolicyError& e) {
      *g.err << "warning: " << e.what() << "\n";
      continue;
    }
    if (d.warning && !warned) {
      *g.err << "warning: " << *d.warning << "\n";
      warned = true;
    }
    const Baseline base = voltage_baseline(map, b, a.bandwidth, cm);
    t.rows.push_back({b, d.chosen.plan.describe(), d.chosen.per_sample_ms, base.per_sample_ms,
                      gain_pct(d.chosen.per_sample_ms, base.per_sample_ms), d.chosen.per_sample_j,
                      base.per_sample_j, gain_pct(d.chosen.per_sample_j, base.per_sample_j), base.source});
  }
  const auto crossover = crossover_batch(map, a.bandwidth, objective);
  const Format format = format_from_string(g.format);
  if (format == Format::Json) {
    json j = {{"bandwidth_mbps", a.bandwidth},
              {"objective", a.objective},
              {"crossover_batch", crossover ? json(*crossover) : json(nullptr)},
              {"rows", table_json(t)}};
    out << j.dump(2) << "\n";
    return kExitOk;
  }
  emit(t, format, out);
  if (format == Format::Md) {
    out << "\ncrossover batch at " << a.bandwidth << " Mbps: " << (crossover ? std::to_string(*crossover) : "none")
        << "\n";
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Plans and simulates segment-means distributed transformer inference."};
  app.name("prism");
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions g;
  g.err = &err;
  app.add_option("--cost-model", g.cost_model_path,
                 std::string("Cost-model JSON (default: $") + kCostModelEnv + " or the built-in fit)");
  app.add_option("--format", g.format, "Output format")->check(CLI::IsMember({"json", "csv", "md"}));

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Simulate one plan and print its phase breakdown");
  simulate->add_option("--mode", sim.mode, "local, prism or voltage")
      ->required()
      ->check(CLI::IsMember({"local", "prism", "voltage"}));
  simulate->add_option("--cr", sim.cr, "Compression rate (prism)")->check(CLI::PositiveNumber);
  simulate->add_option("--batch", sim.batch, "Batch size")->check(CLI::PositiveNumber);
  simulate->add_option("--bandwidth", sim.bandwidth, "Link bandwidth in Mbps")->check(CLI::PositiveNumber);
  simulate->add_option("--devices", sim.devices, "Device count")->check(CLI::Range(1, 64));
  simulate->add_flag("--numerics", sim.numerics, "Also run the toy forward pass and report deviation vs local");
  simulate->add_option("--seed", sim.seed, "Seed for --numerics weights and inputs");

  FlopsArgs fl;
  auto* flops = app.add_subcommand("flops", "Per-device FLOPs and communication volume table");
  flops->add_option("--crs", fl.crs, "Compression rates")->delimiter(',')->check(CLI::PositiveNumber);
  flops->add_option("--devices", fl.devices, "Device count")->check(CLI::Range(1, 64));

  CalibrateArgs cal;
  auto* calibrate = app.add_subcommand("calibrate", "Fit the cost model to the embedded calibration table");
  calibrate->add_option("--out", cal.out_path, "Write the fitted cost model here");
  calibrate->add_option("--report", cal.report_path, "Write the fit report JSON here");

  ProfileArgs prof;
  auto* profile = app.add_subcommand("profile", "Sweep the grid on the simulator and write a performance map");
  profile->add_option("--out", prof.out_path, "Performance-map path")->required();
  profile->add_option("--batches", prof.grid.batches, "Batch sizes")->delimiter(',');
  profile->add_option("--crs", prof.grid.crs, "Compression rates")->delimiter(',');
  profile->add_option("--bandwidths", prof.grid.bandwidths_mbps, "Bandwidths in Mbps")->delimiter(',');
  profile->add_option("--warmup", prof.grid.warmup_runs, "Discarded warm-up runs per point");
  profile->add_option("--runs", prof.grid.measured_runs, "Measured runs per point");
  profile->add_option("--devices", prof.grid.devices, "Device count")->check(CLI::Range(1, 64));
  profile->add_flag("--with-voltage", prof.grid.include_voltage, "Also profile full-tensor exchange");

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Choose a plan from a performance map and execute it");
  run_cmd->add_option("--map", run.map_path, "Performance-map path")->required();
  run_cmd->add_option("--batch", run.batch, "Batch size")->required()->check(CLI::PositiveNumber);
  run_cmd->add_option("--bandwidth", run.bandwidth, "Observed bandwidth in Mbps")->check(CLI::PositiveNumber);
  run_cmd->add_option("--objective", run.objective, "latency or energy")
      ->check(CLI::IsMember({"latency", "energy"}));
  run_cmd->add_flag("--nearest-batch", run.nearest_batch, "Fall back to the nearest profiled batch");
  run_cmd->add_flag("--with-voltage", run.with_voltage, "Let full-tensor exchange compete");

  ReportArgs rep;
  auto* report = app.add_subcommand("report", "Per-batch decisions and gains vs full-tensor exchange");
  report->add_option("--map", rep.map_path, "Performance-map path")->required();
  report->add_option("--bandwidth", rep.bandwidth, "Bandwidth in Mbps")->check(CLI::PositiveNumber);
  report->add_option("--objective", rep.objective, "latency or energy")
      ->check(CLI::IsMember({"latency", "energy"}));
  report->add_option("--series", rep.series_path, "Write per-sample series CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*simulate) return cmd_simulate(sim, g, out);
    if (*flops) return cmd_flops(fl, g, out);
    if (*calibrate) return cmd_calibrate(cal, g, out);
    if (*profile) return cmd_profile(prof, g, out);
    if (*run_cmd) return cmd_run(run, g, out);
    if (*report) return cmd_report(rep, g, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace prism
