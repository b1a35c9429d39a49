#include <doctest.h>

#include <thread>

#include "prism/commsim.hpp"
#include "prism/errors.hpp"

using prism::CostModel;
using prism::ExecutionPlan;
using prism::Payload;
using prism::SimWorld;

namespace {

CostModel simple_model() {
  CostModel cm;
  cm.stage_d2h_rate_bytes_per_ms = 1e6;
  cm.stage_h2d_rate_bytes_per_ms = 1e6;
  cm.collective_overhead_ms = 0.5;
  cm.net_bandwidth_mbps = 100.0;
  cm.net_fixed_ms = 0.2;
  return cm;
}

prism::ModelConfig toy(std::size_t n = 16) {
  prism::ModelConfig c;
  c.embed_dim = 32;
  c.num_heads = 4;
  c.num_layers = 2;
  c.seq_len = n;
  c.num_classes = 4;
  return c;
}

}  // namespace

TEST_CASE("network and staging time oracles") {
  CostModel cm;
  cm.net_bandwidth_mbps = 800.0;
  CHECK(prism::network_time(1e6, cm) == doctest::Approx(10.0));
  cm.net_link_scale = 2.0;
  CHECK(prism::network_time(1e6, cm) == doctest::Approx(5.0));
  cm.net_fixed_ms = 1.5;
  CHECK(prism::network_time(0.0, cm) == doctest::Approx(1.5));
  cm.stage_d2h_rate_bytes_per_ms = 1e5;
  cm.stage_h2d_rate_bytes_per_ms = 2e5;
  CHECK(prism::staging_time(1e6, cm) == doctest::Approx(15.0));
}

TEST_CASE("compute model is affine in the batch") {
  CostModel cm;
  CHECK(cm.compute_ms(prism::CostMode::Local, 4) == doctest::Approx(20.0 + 57.0 * 4));
  CHECK(cm.compute_ms(prism::CostMode::Voltage, 1) == doctest::Approx(222.0));
  CHECK_THROWS_AS((void)cm.compute_ms(prism::CostMode::Prism, 0), prism::ConfigError);
}

TEST_CASE("cost modes") {
  CHECK(prism::cost_mode(ExecutionPlan::local(197)) == prism::CostMode::Local);
  CHECK(prism::cost_mode(ExecutionPlan::voltage(197, 2)) == prism::CostMode::Voltage);
  CHECK(prism::cost_mode(ExecutionPlan::prism(197, 2, 10)) == prism::CostMode::Prism);
  CHECK(prism::cost_mode_from_string("voltage") == prism::CostMode::Voltage);
  CHECK(prism::to_string(prism::CostMode::Prism) == "prism");
  CHECK_THROWS_AS(prism::cost_mode_from_string("turbo"), prism::ConfigError);
}

TEST_CASE("three-device all-gather matches the closed form") {
  const CostModel cm = simple_model();
  SimWorld world(3, cm);
  std::vector<prism::GatherResult> results(3);
  {
    std::vector<std::jthread> threads;
    for (std::size_t p = 0; p < 3; ++p) {
      threads.emplace_back([&, p] {
        results[p] = world.all_gather(p, Payload::of(prism::Matrix(10, 100, static_cast<float>(p))));
      });
    }
  }
  // sent 4000 B, received 8000 B per device.
  const double staging = 4000.0 / 1e6 + 8000.0 / 1e6 + 0.5;
  const double comm = 8000.0 * 8.0 / (100.0 * 1000.0) + 0.2;
  for (std::size_t p = 0; p < 3; ++p) {
    CHECK(results[p].timing.staging_ms == doctest::Approx(staging));
    CHECK(results[p].timing.comm_ms == doctest::Approx(comm));
    CHECK(results[p].timing.wait_ms == doctest::Approx(0.0));
    CHECK(world.now(p) == doctest::Approx(staging + comm));
    REQUIRE(results[p].payloads.size() == 3);
    for (std::size_t j = 0; j < 3; ++j) CHECK(results[p].payloads[j](0, 0) == static_cast<float>(j));
  }
  CHECK(world.collectives_completed() == 1);
}

TEST_CASE("a straggler delays everyone and the others wait") {
  const CostModel cm = simple_model();
  SimWorld world(2, cm);
  {
    std::jthread a([&] { world.all_gather(0, Payload::shape_only(1000)); });
    std::jthread b([&] {
      world.compute(1, 5.0);
      world.all_gather(1, Payload::shape_only(1000));
    });
  }
  const double round = 4000.0 / 1e6 * 2 + 0.5 + 4000.0 * 8.0 / 1e5 + 0.2;
  CHECK(world.now(0) == doctest::Approx(5.0 + round));
  CHECK(world.now(1) == doctest::Approx(5.0 + round));
  CHECK(world.wait_ms(0) == doctest::Approx(5.0));
  CHECK(world.wait_ms(1) == doctest::Approx(0.0));
  CHECK(world.breakdown(1).comp_ms == doctest::Approx(5.0));
  CHECK(world.breakdown(0).total_ms == doctest::Approx(round));
}

TEST_CASE("payload size disagreement is a protocol error") {
  SimWorld world(2, simple_model());
  std::exception_ptr e0, e1;
  {
    std::jthread a([&] {
      try {
        world.all_gather(0, Payload::shape_only(100));
      } catch (...) {
        e0 = std::current_exception();
      }
    });
    std::jthread b([&] {
      try {
        world.all_gather(1, Payload::shape_only(200));
      } catch (...) {
        e1 = std::current_exception();
      }
    });
  }
  REQUIRE(e0);
  REQUIRE(e1);
  int protocol = 0;
  for (auto e : {e0, e1}) {
    try {
      std::rethrow_exception(e);
    } catch (const prism::ProtocolError&) {
      ++protocol;
    } catch (const prism::TransportError&) {
    }
  }
  CHECK(protocol == 1);
  CHECK_THROWS_AS(world.all_gather(0, Payload::shape_only(100)), prism::TransportError);
}

TEST_CASE("a device that never joins causes a deadlock error") {
  SimWorld world(2, simple_model());
  std::exception_ptr err;
  {
    std::jthread a([&] {
      try {
        world.all_gather(0, Payload::shape_only(10));
      } catch (...) {
        err = std::current_exception();
      }
    });
    std::jthread b([&] { world.leave(1); });
  }
  REQUIRE(err);
  CHECK_THROWS_AS(std::rethrow_exception(err), prism::DeadlockError);
}

TEST_CASE("virtual-time timeout is detected") {
  prism::SimOptions opt;
  opt.deadlock_timeout_ms = 100.0;
  SimWorld world(2, simple_model(), opt);
  std::exception_ptr err;
  {
    std::jthread a([&] {
      try {
        world.all_gather(0, Payload::shape_only(10));
      } catch (...) {
        err = std::current_exception();
      }
    });
    std::jthread b([&] {
      for (int i = 0; i < 50; ++i) world.compute(1, 10.0);
    });
  }
  REQUIRE(err);
  CHECK_THROWS_WITH_AS(std::rethrow_exception(err), doctest::Contains("virtual time"), prism::DeadlockError);
}

TEST_CASE("a single device collective is free") {
  SimWorld world(1, simple_model());
  const auto r = world.all_gather(0, Payload::of(prism::Matrix(2, 2, 1.0F)));
  CHECK(r.payloads.size() == 1);
  CHECK(world.now(0) == 0.0);
  CHECK(world.breakdown(0).total_ms == 0.0);
}

TEST_CASE("virtual clock") {
  prism::VirtualClock c;
  c.advance(2.0);
  c.advance_to(1.0);
  CHECK(c.now() == 2.0);
  c.advance_to(3.5);
  CHECK(c.now() == 3.5);
  CHECK_THROWS_AS(c.advance(-1.0), prism::ConfigError);
}

TEST_CASE("simulation agrees with the closed form") {
  const CostModel cm = simple_model();
  const auto cfg = toy(17);
  for (const auto& plan : {ExecutionPlan::local(17), ExecutionPlan::voltage(17, 2), ExecutionPlan::prism(17, 2, 3),
                           ExecutionPlan::prism(17, 3, 2), ExecutionPlan::voltage(17, 4)}) {
    CAPTURE(plan.describe());
    for (std::size_t batch : {1, 3}) {
      const auto closed = prism::closed_form_breakdown(plan, cfg, batch, cm);
      const auto timed = prism::run_simulation(plan, cfg, batch, cm);
      const auto numeric = prism::run_simulation(plan, cfg, batch, cm, true, 4);
      for (const auto& r : {timed, numeric}) {
        CHECK(r.devices.size() == plan.devices());
        CHECK(r.overall.comp_ms == doctest::Approx(closed.comp_ms));
        CHECK(r.overall.staging_ms == doctest::Approx(closed.staging_ms));
        CHECK(r.overall.comm_ms == doctest::Approx(closed.comm_ms));
        CHECK(r.makespan_ms == doctest::Approx(closed.total_ms));
        CHECK(r.energy_j == doctest::Approx(prism::energy_j(closed, cm, plan.devices())));
      }
      REQUIRE(numeric.numerics.has_value());
      CHECK(numeric.numerics->samples.size() == batch);
    }
  }
}

TEST_CASE("simulated timing is independent of thread scheduling") {
  const CostModel cm = simple_model();
  const auto cfg = toy(16);
  const auto plan = ExecutionPlan::prism(16, 4, 2);
  const auto base = prism::run_simulation(plan, cfg, 2, cm, true, 9);
  for (std::uint64_t jitter : {1, 2, 3}) {
    prism::SimOptions opt;
    opt.jitter_seed = jitter;
    const auto r = prism::run_simulation(plan, cfg, 2, cm, true, 9, opt);
    CHECK(r.devices == base.devices);
    CHECK(r.makespan_ms == base.makespan_ms);
    CHECK(r.numerics->samples[1].features == base.numerics->samples[1].features);
  }
}

TEST_CASE("simulation numerics match standalone inference") {
  const auto cfg = toy(16);
  const auto plan = ExecutionPlan::prism(16, 2, 4);
  const auto r = prism::run_simulation(plan, cfg, 2, simple_model(), true, 3);
  const auto w = prism::Weights::random(cfg, 3);
  const auto x = prism::random_tokens(cfg, prism::input_seed(3, 1));
  CHECK(r.numerics->samples[1].features == prism::forward_distributed(x, plan, w).samples[0].features);
}

TEST_CASE("energy accounting") {
  CostModel cm;
  const auto b = prism::PhaseBreakdown::of(100.0, 10.0, 20.0);
  CHECK(prism::energy_j(b, cm, 1) == doctest::Approx(0.69));
  CHECK(prism::energy_j(b, cm, 2) == doctest::Approx(1.38));
  prism::SimulationResult r;
  r.devices = {b, prism::PhaseBreakdown::of(50.0, 10.0, 20.0)};
  r.idle_ms = {0.0, 50.0};
  CHECK(prism::energy_j(r, cm) == doctest::Approx(0.69 + 0.39 + 0.1));
}

TEST_CASE("run inputs are validated") {
  const auto cfg = toy(16);
  CHECK_THROWS_AS(prism::run_simulation(ExecutionPlan::local(16), cfg, 0, CostModel{}), prism::ConfigError);
  CHECK_THROWS_AS(prism::run_simulation(ExecutionPlan::local(17), cfg, 1, CostModel{}), prism::ConfigError);
  CostModel bad;
  bad.net_bandwidth_mbps = 0.0;
  CHECK_THROWS_AS(prism::run_simulation(ExecutionPlan::local(16), cfg, 1, bad), prism::ConfigError);
  CHECK_THROWS_AS(SimWorld(0, CostModel{}), prism::ConfigError);
}

TEST_CASE("cost model JSON round trip") {
  CostModel cm = simple_model();
  cm.comp_intercept_ms = {1.25, 2.5, 3.75};
  cm.power.idle_w = 0.75;
  const auto text = prism::cost_model_to_json(cm);
  CHECK(prism::cost_model_from_json(text) == cm);
  CHECK(prism::cost_model_hash(cm) == prism::cost_model_hash(prism::cost_model_from_json(text)));
  CHECK(prism::cost_model_hash(cm).size() == 16);
  CHECK(prism::cost_model_hash(cm) != prism::cost_model_hash(cm.with_bandwidth(50.0)));
}

TEST_CASE("cost model parse failures") {
  CHECK_THROWS_WITH_AS(prism::cost_model_from_json("{\n  \"schema\": 1,\n  oops\n}"), doctest::Contains("line 3"),
                       prism::ParseError);
  CHECK_THROWS_AS(prism::cost_model_from_json(R"({"schema": 2})"), prism::VersionError);
  CHECK_THROWS_WITH_AS(prism::cost_model_from_json(R"({"schema": 1})"), doctest::Contains("staging"),
                       prism::ParseError);
  auto text = prism::cost_model_to_json(CostModel{});
  text.replace(text.find("\"link_scale\": 1.0"), 17, "\"link_scale\": -1.0");
  CHECK_THROWS_AS(prism::cost_model_from_json(text), prism::ConfigError);
}
