#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <unistd.h>

#include <json.hpp>

#include "prism/cli.hpp"
#include "prism/commsim.hpp"
#include "prism/perfmodel.hpp"
#include "prism/profiler.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "prism");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out;
  std::ostringstream err;
  const int code = prism::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::vector<std::string>> split_rows(const std::string& text, char sep, bool md) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.starts_with("| ---")) continue;
    if (md) line = line.substr(2, line.size() - 4);
    std::vector<std::string> cells;
    const std::string delim = md ? " | " : std::string(1, sep);
    std::size_t pos = 0;
    while (true) {
      const auto next = line.find(delim, pos);
      cells.push_back(line.substr(pos, next - pos));
      if (next == std::string::npos) break;
      pos = next + delim.size();
    }
    rows.push_back(cells);
  }
  return rows;
}

struct TempDir {
  fs::path path = fs::temp_directory_path() / ("prism_cli_" + std::to_string(::getpid()));
  TempDir() { fs::create_directories(path); }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("exit codes") {
  CHECK(cli({}).code == prism::kExitUsage);
  CHECK(cli({"--help"}).code == prism::kExitOk);
  CHECK(cli({"simulate", "--mode", "prism", "--batch", "2"}).code == prism::kExitUsage);
  CHECK(cli({"simulate", "--mode", "local", "--cr", "3.3"}).code == prism::kExitUsage);
  CHECK(cli({"simulate", "--mode", "voltage", "--cr", "9.9"}).code == prism::kExitUsage);
  CHECK(cli({"simulate", "--mode", "prism", "--cr", "7"}).code == prism::kExitUsage);
  CHECK(cli({"simulate", "--mode", "warp"}).code == prism::kExitUsage);
  CHECK(cli({"simulate", "--mode", "local", "--batch", "0"}).code == prism::kExitUsage);
  const auto missing = cli({"run", "--map", "/nonexistent/map.json", "--batch", "1"});
  CHECK(missing.code == prism::kExitRuntime);
  CHECK(missing.err.find("/nonexistent/map.json") != std::string::npos);
}

TEST_CASE("flops emits the same numbers in every format") {
  const auto md = cli({"flops"});
  const auto csv = cli({"flops", "--format", "csv"});
  const auto js = cli({"flops", "--format", "json"});
  REQUIRE(md.code == 0);
  REQUIRE(csv.code == 0);
  REQUIRE(js.code == 0);
  const auto md_rows = split_rows(md.out, '|', true);
  const auto csv_rows = split_rows(csv.out, ',', false);
  CHECK(md_rows.size() == 6);
  CHECK(md_rows == csv_rows);
  const auto j = json::parse(js.out);
  REQUIRE(j.size() == 5);
  CHECK(j[2]["method"] == "prism cr=9.9");
  CHECK(j[2]["comm_elements_per_block"] == 7680);
  CHECK(j[0]["cr"].is_null());
}

TEST_CASE("flops with CR 1 has no communication saving") {
  const auto r = cli({"flops", "--crs", "1", "--format", "json"});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j.back()["comm_speedup_pct"] == 0.0);
}

TEST_CASE("simulate") {
  SUBCASE("local has no staging or communication") {
    const auto r = cli({"simulate", "--mode", "local", "--batch", "4", "--format", "csv"});
    REQUIRE(r.code == 0);
    const auto rows = split_rows(r.out, ',', false);
    REQUIRE(rows.size() == 2);
    CHECK(rows[1][4] == "0.000");
    CHECK(rows[1][5] == "0.000");
  }
  SUBCASE("matches the cost-model prediction") {
    const auto r = cli({"simulate", "--mode", "voltage", "--batch", "1", "--bandwidth", "400", "--format", "json"});
    REQUIRE(r.code == 0);
    const auto j = json::parse(r.out);
    const auto p = prism::predict(prism::ExecutionPlan::voltage(197, 2), prism::ModelConfig{}, 1, 400,
                                  prism::default_cost_model());
    CHECK(j["total_ms"].get<double>() == doctest::Approx(p.breakdown.total_ms));
  }
  SUBCASE("numerics deviation equals the library value for the same seed") {
    const auto r = cli({"simulate", "--mode", "prism", "--cr", "9.9", "--batch", "8", "--numerics", "--seed", "7",
                        "--format", "json"});
    REQUIRE(r.code == 0);
    const auto j = json::parse(r.out);
    const auto cfg = prism::numerics_toy_config();
    const auto plan = prism::ExecutionPlan::prism_cr(cfg.seq_len, 2, 9.9);
    const auto w = prism::Weights::random(cfg, 7);
    double sum = 0.0;
    for (std::size_t b = 0; b < 8; ++b) {
      const auto x = prism::random_tokens(cfg, prism::input_seed(7, b));
      const auto dist = prism::forward_distributed(x, plan, w);
      sum += prism::output_deviation(dist.samples[0].features, prism::forward_local_padded(x, w, plan.partition).features);
    }
    CHECK(j["output_deviation"].get<double>() == doctest::Approx(sum / 8).epsilon(1e-12));
    CHECK(j["output_deviation"].get<double>() > 0.0);

    const auto full = cli({"simulate", "--mode", "voltage", "--batch", "2", "--numerics", "--format", "json"});
    CHECK(json::parse(full.out)["output_deviation"].get<double>() == 0.0);
  }
}

TEST_CASE("cost model from file and environment") {
  TempDir dir;
  const auto path = (dir.path / "cm.json").string();
  REQUIRE(cli({"calibrate", "--out", path, "--format", "csv"}).code == 0);
  auto cm = prism::load_cost_model(path);
  CHECK(cm == prism::default_cost_model());

  cm.comp_intercept_ms[0] += 1000.0;
  prism::save_cost_model(cm, path);
  auto total = [](const Result& r) { return json::parse(r.out)["total_ms"].get<double>(); };
  const double base = total(cli({"simulate", "--mode", "local", "--format", "json"}));
  CHECK(total(cli({"--cost-model", path, "simulate", "--mode", "local", "--format", "json"})) ==
        doctest::Approx(base + 1000.0));
  ::setenv(prism::kCostModelEnv, path.c_str(), 1);
  const double from_env = total(cli({"simulate", "--mode", "local", "--format", "json"}));
  ::unsetenv(prism::kCostModelEnv);
  CHECK(from_env == doctest::Approx(base + 1000.0));
  CHECK(cli({"--cost-model", (dir.path / "none.json").string(), "simulate", "--mode", "local"}).code ==
        prism::kExitRuntime);
}

TEST_CASE("calibrate writes a fit report") {
  TempDir dir;
  const auto report = (dir.path / "fit.json").string();
  const auto r = cli({"calibrate", "--report", report});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(report));
  CHECK(r.out.find("max latency error") != std::string::npos);
}

TEST_CASE("profile, run and report") {
  TempDir dir;
  const auto map_path = (dir.path / "map.json").string();

  SUBCASE("minimal grid") {
    const auto r = cli({"profile", "--out", map_path, "--batches", "1", "--crs", "9.9", "--bandwidths", "400"});
    REQUIRE(r.code == 0);
    CHECK(prism::load_map(map_path).records.size() == 2);
  }

  SUBCASE("decisions, gains and series") {
    ::setenv("SOURCE_DATE_EPOCH", "86400", 1);
    REQUIRE(cli({"profile", "--out", map_path, "--warmup", "0", "--runs", "1"}).code == 0);
    ::unsetenv("SOURCE_DATE_EPOCH");
    const auto map = prism::load_map(map_path);
    CHECK(map.records.size() == 192);
    CHECK(map.created == "1970-01-02T00:00:00Z");

    const auto b1 = json::parse(cli({"run", "--map", map_path, "--batch", "1", "--format", "json"}).out);
    CHECK(b1["chosen"]["plan"] == "local");
    CHECK(b1["chosen"]["per_sample_ms"].get<double>() == doctest::Approx(80.7).epsilon(0.05));
    const auto b32 = json::parse(cli({"run", "--map", map_path, "--batch", "32", "--format", "json"}).out);
    CHECK(b32["chosen"]["plan"] == "prism cr=9.9");
    CHECK(b32["voltage_baseline"]["source"] == "model");
    CHECK(b32["latency_gain_pct"].get<double>() == doctest::Approx(65.1).epsilon(0.1));

    const auto series = (dir.path / "series.csv").string();
    const auto rep = cli({"report", "--map", map_path, "--series", series, "--format", "json"});
    REQUIRE(rep.code == 0);
    const auto j = json::parse(rep.out);
    CHECK(j["crossover_batch"] == 8);
    CHECK(j["rows"].size() == 6);

    std::ifstream in(series);
    std::stringstream text;
    text << in.rdbuf();
    const auto rows = split_rows(text.str(), ',', false);
    CHECK(rows.size() == 193);
    // Prism per-sample latency never rises with batch.
    std::map<std::pair<std::string, std::string>, double> last;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i][1] != "prism") continue;
      const auto key = std::make_pair(rows[i][2], rows[i][3]);
      const double v = std::stod(rows[i][5]);
      if (last.count(key) != 0) CHECK(v <= last[key]);
      last[key] = v;
    }
  }

  SUBCASE("simulate argmin agrees with run") {
    REQUIRE(cli({"profile", "--out", map_path, "--batches", "1,4,8,32", "--bandwidths", "300,400", "--warmup", "0",
                 "--runs", "1"})
                .code == 0);
    for (const char* batch : {"1", "4", "8", "32"}) {
      for (const char* bw : {"300", "400"}) {
        std::string best;
        double best_ms = 1e300;
        for (const auto& args : std::vector<std::vector<std::string>>{{"--mode", "local"},
                                                                      {"--mode", "prism", "--cr", "3.3"},
                                                                      {"--mode", "prism", "--cr", "4.95"},
                                                                      {"--mode", "prism", "--cr", "9.9"}}) {
          std::vector<std::string> a = {"simulate", "--batch", batch, "--bandwidth", bw, "--format", "json"};
          a.insert(a.end(), args.begin(), args.end());
          const auto j = json::parse(cli(a).out);
          if (j["per_sample_ms"].get<double>() < best_ms) {
            best_ms = j["per_sample_ms"].get<double>();
            best = j["plan"].get<std::string>();
          }
        }
        const auto d =
            json::parse(cli({"run", "--map", map_path, "--batch", batch, "--bandwidth", bw, "--format", "json"}).out);
        CHECK(d["chosen"]["plan"] == best);
      }
    }
  }

  SUBCASE("empty map") {
    prism::save_map(prism::PerformanceMap{}, map_path);
    const auto r = cli({"report", "--map", map_path});
    CHECK(r.code == 0);
    CHECK(r.out == "no records\n");
    CHECK(cli({"run", "--map", map_path, "--batch", "1"}).code == prism::kExitRuntime);
  }

  SUBCASE("missing batch") {
    REQUIRE(cli({"profile", "--out", map_path, "--batches", "1,8", "--bandwidths", "400", "--warmup", "0", "--runs",
                 "1"})
                .code == 0);
    CHECK(cli({"run", "--map", map_path, "--batch", "5"}).code == prism::kExitRuntime);
    const auto r = cli({"run", "--map", map_path, "--batch", "5", "--nearest-batch"});
    CHECK(r.code == 0);
    CHECK(r.err.find("nearest batch 8") != std::string::npos);
  }
}
