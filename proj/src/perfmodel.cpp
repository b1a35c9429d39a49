#include "prism/perfmodel.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <tuple>

#include "json_util.hpp"
#include "prism/errors.hpp"

namespace prism {

namespace {

using detail::json;

enum Param : Eigen::Index {
  kCompIntercept = 0,  // + 2 * mode
  kCompSlope = 1,      // + 2 * mode
  kOverhead = 6,
  kStagePerByte = 7,
  kNetFixed = 8,
  kNetInverseScale = 9,
  kParams = 10,
};

std::string param_name(Eigen::Index i) {
  if (i < kOverhead) {
    const std::string mode(to_string(static_cast<CostMode>(i / 2)));
    return (i % 2 == 0 ? "comp_intercept_ms[" : "comp_per_sample_ms[") + mode + "]";
  }
  switch (i) {
    case kOverhead: return "collective_overhead_ms";
    case kStagePerByte: return "stage_rate_bytes_per_ms";
    case kNetFixed: return "net_fixed_ms";
    case kNetInverseScale: return "net_link_scale";
    default: return "parameter " + std::to_string(i);
  }
}

// Weighted least squares with column-pivoted QR; rank loss names the first
// parameter the pivoting could not resolve.
Eigen::VectorXd solve_wls(const Eigen::MatrixXd& a, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                          const std::vector<std::string>& names) {
  Eigen::MatrixXd wa = w.asDiagonal() * a;
  const Eigen::VectorXd wy = w.asDiagonal() * y;
  // Columns span many orders of magnitude (ms against bytes).
  Eigen::VectorXd col_scale = wa.colwise().norm().transpose();
  for (Eigen::Index c = 0; c < col_scale.size(); ++c) {
    if (col_scale(c) == 0.0) col_scale(c) = 1.0;
  }
  wa = wa * col_scale.cwiseInverse().asDiagonal();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(wa);
  qr.setThreshold(1e-10);
  if (qr.rank() < a.cols()) {
    const auto missing = qr.colsPermutation().indices()(qr.rank());
    throw CalibrationError("calibration is rank-deficient: cannot identify " + names[static_cast<std::size_t>(missing)] +
                           " from the given rows");
  }
  return qr.solve(wy).cwiseQuotient(col_scale);
}

std::tuple<int, std::size_t, std::size_t, std::size_t, double> row_key(const CalibrationRow& r) {
  return {static_cast<int>(r.mode), r.devices, r.segments, r.batch, r.bandwidth_mbps};
}

ExecutionPlan row_plan(const CalibrationRow& r, const ModelConfig& cfg) {
  switch (r.mode) {
    case CostMode::Local: return ExecutionPlan::local(cfg.seq_len);
    case CostMode::Prism: return ExecutionPlan::prism(cfg.seq_len, r.devices, r.segments);
    case CostMode::Voltage: return ExecutionPlan::voltage(cfg.seq_len, r.devices);
  }
  throw ConfigError("unknown calibration mode");
}

// Per-run staging and network features of a distributed row.
struct TransferFeatures {
  double gathers = 0.0;
  double half_staged_bytes = 0.0;
  double nominal_net_ms = 0.0;
};

TransferFeatures transfer_features(const CalibrationRow& r, const ModelConfig& cfg) {
  TransferFeatures f;
  if (r.mode == CostMode::Local || r.devices < 2) return f;
  const double sent = static_cast<double>(r.batch * r.exchanged_rows() * cfg.embed_dim * kElementBytes);
  const double recv = sent * static_cast<double>(r.devices - 1);
  f.gathers = static_cast<double>(cfg.num_layers);
  f.half_staged_bytes = f.gathers * (sent + recv) / 2.0;
  f.nominal_net_ms = f.gathers * recv * 8.0 / (r.bandwidth_mbps * 1000.0);
  return f;
}

void fit_latency(const std::vector<CalibrationRow>& rows, const ModelConfig& cfg, CostModel& cm) {
  std::vector<Eigen::VectorXd> design;
  std::vector<double> target, weight;
  for (const auto& r : rows) {
    const auto m = static_cast<Eigen::Index>(r.mode);
    const double wt = 1.0 / std::sqrt(r.total_ms);
    Eigen::VectorXd comp = Eigen::VectorXd::Zero(kParams);
    comp(kCompIntercept + 2 * m) = 1.0;
    comp(kCompSlope + 2 * m) = static_cast<double>(r.batch);
    Eigen::VectorXd stage = Eigen::VectorXd::Zero(kParams);
    Eigen::VectorXd comm = Eigen::VectorXd::Zero(kParams);
    const auto f = transfer_features(r, cfg);
    stage(kOverhead) = f.gathers;
    stage(kStagePerByte) = f.half_staged_bytes;
    comm(kNetFixed) = f.gathers;
    comm(kNetInverseScale) = f.nominal_net_ms;

    design.push_back(comp);
    target.push_back(r.comp_ms);
    weight.push_back(wt);
    if (f.gathers > 0.0) {
      design.push_back(stage);
      target.push_back(r.other_ms);
      weight.push_back(wt);
      design.push_back(comm);
      target.push_back(r.comm_ms);
      weight.push_back(wt);
    }
    design.push_back(comp + stage + comm);
    target.push_back(r.total_ms);
    weight.push_back(wt);
  }

  const auto n = static_cast<Eigen::Index>(design.size());
  Eigen::MatrixXd a(n, kParams);
  for (Eigen::Index i = 0; i < n; ++i) a.row(i) = design[static_cast<std::size_t>(i)].transpose();
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(target.data(), n);
  const Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(weight.data(), n);
  std::vector<std::string> names;
  for (Eigen::Index i = 0; i < kParams; ++i) names.push_back(param_name(i));
  const Eigen::VectorXd theta = solve_wls(a, y, w, names);

  for (Eigen::Index i = 0; i < kParams; ++i) {
    const bool must_be_positive = i == kStagePerByte || i == kNetInverseScale;
    if (!std::isfinite(theta(i)) || theta(i) < 0.0 || (must_be_positive && theta(i) == 0.0)) {
      std::ostringstream msg;
      msg << "calibration produced an invalid " << names[static_cast<std::size_t>(i)] << " coefficient " << theta(i);
      throw CalibrationError(msg.str());
    }
  }
  for (std::size_t m = 0; m < kCostModes; ++m) {
    cm.comp_intercept_ms[m] = theta(kCompIntercept + 2 * static_cast<Eigen::Index>(m));
    cm.comp_per_sample_ms[m] = theta(kCompSlope + 2 * static_cast<Eigen::Index>(m));
  }
  cm.collective_overhead_ms = theta(kOverhead);
  cm.stage_d2h_rate_bytes_per_ms = 2.0 / theta(kStagePerByte);
  cm.stage_h2d_rate_bytes_per_ms = cm.stage_d2h_rate_bytes_per_ms;
  cm.net_fixed_ms = theta(kNetFixed);
  cm.net_link_scale = 1.0 / theta(kNetInverseScale);
}

void fit_energy(const std::vector<CalibrationRow>& rows, CostModel& cm, std::vector<std::string>& notes) {
  std::vector<const CalibrationRow*> obs;
  for (const auto& r : rows) {
    if (r.energy_j) obs.push_back(&r);
  }
  if (obs.empty()) {
    notes.emplace_back("no energy rows: phase powers left at their defaults");
    return;
  }
  const std::vector<std::string> names = {"power.comp_w", "power.transfer_w"};
  const auto n = static_cast<Eigen::Index>(obs.size());
  Eigen::MatrixXd a(n, 2);
  Eigen::VectorXd y(n), w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = *obs[static_cast<std::size_t>(i)];
    const auto devices = static_cast<double>(r.mode == CostMode::Local ? 1 : r.devices);
    a(i, 0) = devices * r.comp_ms;
    a(i, 1) = devices * (r.other_ms + r.comm_ms);
    y(i) = *r.energy_j * 1000.0;
    w(i) = 1.0 / std::sqrt(y(i));
  }

  Eigen::Vector2d powers = solve_wls(a, y, w, names);
  std::vector<bool> clamped(2, false);
  for (int round = 0; round < 2; ++round) {
    Eigen::Index worst = -1;
    for (Eigen::Index k = 0; k < 2; ++k) {
      if (!clamped[static_cast<std::size_t>(k)] && powers(k) < kMinPhasePowerW &&
          (worst < 0 || powers(k) < powers(worst))) {
        worst = k;
      }
    }
    if (worst < 0) break;
    std::ostringstream note;
    note << names[static_cast<std::size_t>(worst)] << " fitted to " << powers(worst) << " W; clamped to "
         << kMinPhasePowerW << " W and the remaining powers refitted";
    notes.push_back(note.str());
    clamped[static_cast<std::size_t>(worst)] = true;
    std::vector<Eigen::Index> free;
    Eigen::VectorXd adjusted = y;
    for (Eigen::Index k = 0; k < 2; ++k) {
      if (clamped[static_cast<std::size_t>(k)]) {
        powers(k) = kMinPhasePowerW;
        adjusted -= a.col(k) * kMinPhasePowerW;
      } else {
        free.push_back(k);
      }
    }
    if (free.empty()) break;
    Eigen::MatrixXd sub(n, static_cast<Eigen::Index>(free.size()));
    std::vector<std::string> sub_names;
    for (std::size_t j = 0; j < free.size(); ++j) {
      sub.col(static_cast<Eigen::Index>(j)) = a.col(free[j]);
      sub_names.push_back(names[static_cast<std::size_t>(free[j])]);
    }
    const Eigen::VectorXd part = solve_wls(sub, adjusted, w, sub_names);
    for (std::size_t j = 0; j < free.size(); ++j) powers(free[j]) = part(static_cast<Eigen::Index>(j));
  }

  cm.power.comp_w = powers(0);
  cm.power.stage_w = powers(1);
  cm.power.comm_w = powers(1);
  cm.power.idle_w = powers(1);
  notes.emplace_back(
      "staging and network powers share one fitted transfer power; idle power is not identifiable "
      "from rows without idle time and is set to the transfer power");
}

}  // namespace

std::size_t CalibrationRow::exchanged_rows() const {
  switch (mode) {
    case CostMode::Local: return 0;
    case CostMode::Prism: return segments;
    case CostMode::Voltage: return rows_per_device;
  }
  return 0;
}

void CalibrationTable::validate() const {
  config.validate();
  if (rows.empty()) throw CalibrationError("calibration table is empty");
  const std::size_t n = config.seq_len;
  for (const auto& r : rows) {
    std::ostringstream where;
    where << to_string(r.mode) << " batch " << r.batch;
    if (r.batch < 1) throw CalibrationError(where.str() + ": batch must be at least 1");
    if (std::abs(r.comp_ms + r.other_ms + r.comm_ms - r.total_ms) > 0.2) {
      throw CalibrationError(where.str() + ": total does not equal comp + other + comm");
    }
    if (!(r.total_ms > 0.0) || r.comp_ms < 0.0 || r.other_ms < 0.0 || r.comm_ms < 0.0) {
      throw CalibrationError(where.str() + ": latencies must be non-negative with a positive total");
    }
    if (r.energy_j && !(*r.energy_j > 0.0)) throw CalibrationError(where.str() + ": energy must be positive");
    if (!(r.bandwidth_mbps > 0.0)) throw CalibrationError(where.str() + ": bandwidth must be positive");
    if (r.mode == CostMode::Local) continue;
    const auto spec = PartitionSpec::make(n, r.devices, r.segments);
    if (spec.rows_per_device != r.rows_per_device || std::abs(spec.compression_rate() - r.cr) > 1e-6 * r.cr) {
      throw CalibrationError(where.str() + ": partition geometry does not match the model");
    }
    if (r.mode == CostMode::Voltage && r.segments != r.rows_per_device) {
      throw CalibrationError(where.str() + ": full-tensor rows must not be compressed");
    }
  }
}

FitReport fit_cost_model(const CalibrationTable& table) {
  table.validate();
  std::vector<CalibrationRow> rows = table.rows;
  std::stable_sort(rows.begin(), rows.end(),
                   [](const CalibrationRow& a, const CalibrationRow& b) { return row_key(a) < row_key(b); });

  FitReport report;
  CostModel cm;
  cm.net_bandwidth_mbps = rows.front().bandwidth_mbps;
  fit_latency(rows, table.config, cm);
  report.notes.emplace_back("host copy cost split equally between device-to-host and host-to-device");
  fit_energy(rows, cm, report.notes);
  cm.validate();
  report.model = cm;

  for (const auto& r : rows) {
    const auto p = predict(row_plan(r, table.config), table.config, r.batch, r.bandwidth_mbps, cm);
    FitResidual lat{r.mode, r.batch, r.total_ms, p.breakdown.total_ms};
    report.max_latency_rel_error = std::max(report.max_latency_rel_error, std::abs(lat.relative_error()));
    report.latency.push_back(lat);
    if (r.energy_j) {
      FitResidual en{r.mode, r.batch, *r.energy_j, p.energy_j};
      report.max_energy_rel_error = std::max(report.max_energy_rel_error, std::abs(en.relative_error()));
      report.energy.push_back(en);
    }
  }
  return report;
}

Prediction predict(const ExecutionPlan& plan, const ModelConfig& cfg, std::size_t batch, double bandwidth_mbps,
                   const CostModel& cm) {
  const CostModel at = cm.with_bandwidth(bandwidth_mbps);
  Prediction p;
  p.breakdown = closed_form_breakdown(plan, cfg, batch, at);
  p.energy_j = energy_j(p.breakdown, at, plan.devices());
  p.per_sample_ms = p.breakdown.total_ms / static_cast<double>(batch);
  p.per_sample_j = p.energy_j / static_cast<double>(batch);
  return p;
}

std::string fit_report_to_json(const FitReport& report) {
  auto residuals = [](const std::vector<FitResidual>& rs) {
    json out = json::array();
    for (const auto& r : rs) {
      out.push_back({{"mode", to_string(r.mode)},
                     {"batch", r.batch},
                     {"observed", r.observed},
                     {"predicted", r.predicted},
                     {"rel_error", r.relative_error()}});
    }
    return out;
  };
  const json j = {{"schema", 1},
                  {"cost_model", json::parse(cost_model_to_json(report.model))},
                  {"latency_residuals", residuals(report.latency)},
                  {"energy_residuals", residuals(report.energy)},
                  {"max_latency_rel_error", report.max_latency_rel_error},
                  {"max_energy_rel_error", report.max_energy_rel_error},
                  {"notes", report.notes}};
  return j.dump(2) + "\n";
}

const CostModel& default_cost_model() {
  static const CostModel model = fit_cost_model(CalibrationTable::embedded()).model;
  return model;
}

}  // namespace prism
