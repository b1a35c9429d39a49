#include <doctest.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "prism/commsim.hpp"
#include "prism/errors.hpp"
#include "prism/segmodel.hpp"

using prism::ExecutionPlan;
using prism::Matrix;
using prism::ModelConfig;
using prism::PartitionSpec;

namespace {

ModelConfig tiny(std::size_t d, std::size_t heads, std::size_t layers, std::size_t n) {
  ModelConfig c;
  c.embed_dim = d;
  c.num_heads = heads;
  c.num_layers = layers;
  c.seq_len = n;
  c.num_classes = 3;
  c.patch_dim = d;
  return c;
}

using Dmat = std::vector<std::vector<double>>;

Dmat to_d(const Matrix& m) {
  Dmat out(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
  return out;
}

Dmat mul(const Dmat& a, const Matrix& b) {
  Dmat out(a.size(), std::vector<double>(b.cols(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j)
      for (std::size_t k = 0; k < b.rows(); ++k) out[i][j] += a[i][k] * b(k, j);
  return out;
}

Dmat norm(const Dmat& x, const std::vector<float>& g, const std::vector<float>& b) {
  Dmat out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(x[i].size());
    double mean = 0.0;
    for (double v : x[i]) mean += v / n;
    double var = 0.0;
    for (double v : x[i]) var += (v - mean) * (v - mean) / n;
    for (std::size_t j = 0; j < x[i].size(); ++j) out[i][j] = (x[i][j] - mean) / std::sqrt(var + 1e-6) * g[j] + b[j];
  }
  return out;
}

// Straight-line double-precision encoder used as an independent oracle.
Dmat reference_forward(const Matrix& input, const prism::Weights& w) {
  const auto& cfg = w.config;
  const std::size_t n = input.rows();
  const std::size_t dh = cfg.head_dim();
  Dmat x = to_d(input);
  for (const auto& L : w.layers) {
    const Dmat h = norm(x, L.ln1_gamma, L.ln1_beta);
    const Dmat q = mul(h, L.w_q), k = mul(h, L.w_k), v = mul(h, L.w_v);
    Dmat ctx(n, std::vector<double>(cfg.embed_dim, 0.0));
    for (std::size_t head = 0; head < cfg.num_heads; ++head) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(n);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += q[i][head * dh + c] * k[j][head * dh + c];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t c = 0; c < dh; ++c) ctx[i][head * dh + c] += s[j] / z * v[j][head * dh + c];
      }
    }
    const Dmat o = mul(ctx, L.w_o);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < cfg.embed_dim; ++c) x[i][c] += o[i][c];
    Dmat m = mul(norm(x, L.ln2_gamma, L.ln2_beta), L.w_mlp_in);
    for (auto& row : m)
      for (auto& e : row) e = 0.5 * e * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (e + 0.044715 * e * e * e)));
    const Dmat y = mul(m, L.w_mlp_out);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < cfg.embed_dim; ++c) x[i][c] += y[i][c];
  }
  return norm(x, w.final_gamma, w.final_beta);
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(ModelConfig{}.validate());
  CHECK_THROWS_AS(tiny(10, 3, 1, 4).validate(), prism::ConfigError);
  CHECK(ModelConfig{}.head_dim() == 64);
  CHECK(ModelConfig{}.mlp_hidden() == 3072);
}

TEST_CASE("partition geometry for the 197-token encoder on two devices") {
  const auto s = PartitionSpec::full(197, 2);
  CHECK(s.rows_per_device == 99);
  CHECK(s.effective_len == 198);
  CHECK(s.padding() == 1);
  CHECK(s.compression_rate() == doctest::Approx(1.0));
  CHECK(PartitionSpec::with_compression(197, 2, 9.9).segments == 10);
  CHECK(PartitionSpec::with_compression(197, 2, 4.95).segments == 20);
  CHECK(PartitionSpec::with_compression(197, 2, 3.3).segments == 30);
  CHECK(PartitionSpec::with_compression(197, 2, 1.0).segments == 99);
  CHECK_THROWS_AS(PartitionSpec::with_compression(197, 2, 2.5), prism::PartitionError);
  CHECK_THROWS_AS(PartitionSpec::with_compression(197, 2, 0.5), prism::PartitionError);
  CHECK_THROWS_AS(PartitionSpec::make(197, 2, 100), prism::PartitionError);
  CHECK_THROWS_AS(PartitionSpec::make(197, 2, 0), prism::PartitionError);
  CHECK_THROWS_AS(PartitionSpec::make(197, 0, 1), prism::ConfigError);
}

TEST_CASE("balanced segment lengths") {
  const auto s = PartitionSpec::make(197, 2, 30);
  const auto sizes = s.segment_sizes();
  CHECK(sizes.size() == 30);
  CHECK(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) == 99);
  CHECK(std::count(sizes.begin(), sizes.end(), 4U) == 9);
  CHECK(std::count(sizes.begin(), sizes.end(), 3U) == 21);
  CHECK(sizes.front() == 4);
  CHECK(sizes.back() == 3);
  CHECK(s.segment_size() == doctest::Approx(3.3));
}

TEST_CASE("segment means of four rows in two segments") {
  const Matrix x = Matrix::from_rows({{1, 1}, {3, 3}, {5, 0}, {7, 0}});
  CHECK(prism::segment_means(x, 2) == Matrix::from_rows({{2, 2}, {6, 0}}));
  CHECK(prism::segment_means(x, 1) == Matrix::from_rows({{4, 1}}));
  CHECK(prism::segment_means(x, 4) == x);
  const std::size_t sizes[] = {3, 1};
  CHECK(prism::segment_means(x, sizes) == Matrix::from_rows({{3, 4.0F / 3.0F}, {7, 0}}));
  CHECK_THROWS_AS(prism::segment_means(x, 3), prism::PartitionError);
  const std::size_t bad[] = {3, 2};
  CHECK_THROWS_AS(prism::segment_means(x, bad), prism::PartitionError);
}

TEST_CASE("partitioning pads with the last token") {
  const Matrix x = Matrix::from_rows({{1}, {2}, {3}});
  const auto parts = prism::partition_input(x, PartitionSpec::full(3, 2));
  REQUIRE(parts.size() == 2);
  CHECK(parts[0] == Matrix::from_rows({{1}, {2}}));
  CHECK(parts[1] == Matrix::from_rows({{3}, {3}}));
  CHECK_THROWS_AS(prism::partition_input(x, PartitionSpec::full(4, 2)), prism::ShapeError);
}

TEST_CASE("augmentation puts the own partition first") {
  const Matrix own = Matrix::from_rows({{1, 1}});
  const Matrix others[] = {Matrix::from_rows({{2, 2}}), Matrix::from_rows({{3, 3}, {4, 4}})};
  CHECK(prism::augment(own, others) == Matrix::from_rows({{1, 1}, {2, 2}, {3, 3}, {4, 4}}));
  const Matrix wrong[] = {Matrix(1, 3)};
  CHECK_THROWS_AS(prism::augment(own, wrong), prism::ShapeError);
}

TEST_CASE("key layout follows global device order") {
  const auto plan = ExecutionPlan::prism(8, 2, 2);
  const auto d1 = prism::key_layout(plan, 1);
  CHECK(d1.order == std::vector<std::size_t>{4, 5, 0, 1, 2, 3});
  const float ln2 = std::log(2.0F);
  CHECK(d1.bias == std::vector<float>{ln2, ln2, 0, 0, 0, 0});
  const auto d0 = prism::key_layout(plan, 0);
  CHECK(d0.order == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});
  CHECK(d0.bias == std::vector<float>{0, 0, 0, 0, ln2, ln2});
  const auto unbiased = prism::key_layout(ExecutionPlan::prism(8, 2, 2, false), 0);
  CHECK(unbiased.bias == std::vector<float>(6, 0.0F));
  CHECK(prism::key_layout(ExecutionPlan::local(8), 0).order.empty());
}

TEST_CASE("plans") {
  const auto p = ExecutionPlan::prism_cr(197, 2, 9.9);
  CHECK(p.mode_name() == "prism");
  CHECK(p.describe() == "prism cr=9.9");
  CHECK(p.exchanged_rows() == 10);
  CHECK(p.multiplicity_bias);
  CHECK(ExecutionPlan::voltage(197, 2).exchanged_rows() == 99);
  CHECK(ExecutionPlan::voltage(197, 2).describe() == "voltage");
  CHECK(ExecutionPlan::local(197).devices() == 1);
  CHECK(ExecutionPlan::local(197).exchanged_rows() == 0);
  auto bad = ExecutionPlan::voltage(197, 2);
  bad.partition.segments = 10;
  CHECK_THROWS_AS(bad.validate(), prism::ConfigError);
}

TEST_CASE("random weights are deterministic and scaled by fan-in") {
  const auto cfg = tiny(64, 4, 2, 8);
  const auto a = prism::Weights::random(cfg, 9);
  CHECK(a == prism::Weights::random(cfg, 9));
  CHECK_FALSE(a == prism::Weights::random(cfg, 10));
  const double sd = prism::frobenius_norm(a.layers[0].w_q) / 64.0;
  CHECK(sd == doctest::Approx(1.0 / 8.0).epsilon(0.05));
  CHECK(a.layers[0].ln1_gamma == std::vector<float>(64, 1.0F));
}

TEST_CASE("local forward matches a double-precision reference") {
  const auto cfg = tiny(8, 2, 1, 4);
  const auto w = prism::Weights::random(cfg, 1);
  const Matrix x = prism::random_tokens(cfg, 2);
  const auto out = prism::forward_local(x, w);
  const Dmat ref = reference_forward(x, w);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 8; ++c) CHECK(out.features(i, c) == doctest::Approx(ref[i][c]).epsilon(1e-4));
  REQUIRE(out.logits.size() == 3);
  for (std::size_t k = 0; k < 3; ++k) {
    double logit = 0.0;
    for (std::size_t c = 0; c < 8; ++c) logit += ref[0][c] * w.head(c, k);
    CHECK(out.logits[k] == doctest::Approx(logit).epsilon(1e-4));
  }
}

TEST_CASE("two-layer reference agreement") {
  const auto cfg = tiny(16, 4, 2, 6);
  const auto w = prism::Weights::random(cfg, 3);
  const Matrix x = prism::random_tokens(cfg, 4);
  const auto out = prism::forward_local(x, w);
  const Dmat ref = reference_forward(x, w);
  double diff = 0.0, base = 0.0;
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t c = 0; c < 16; ++c) {
      diff += std::pow(out.features(i, c) - ref[i][c], 2);
      base += ref[i][c] * ref[i][c];
    }
  CHECK(std::sqrt(diff / base) < 1e-5);
}

TEST_CASE("full-tensor exchange reproduces local inference exactly") {
  for (std::size_t devices : {2, 3, 4}) {
    CAPTURE(devices);
    const auto cfg = tiny(32, 4, 2, 17);
    const auto w = prism::Weights::random(cfg, 5);
    const Matrix x = prism::random_tokens(cfg, 6);
    const auto plan = ExecutionPlan::voltage(17, devices);
    const auto dist = prism::forward_distributed(x, plan, w);
    const auto local = prism::forward_local_padded(x, w, plan.partition);
    CHECK(dist.samples[0].features == local.features);
    CHECK(dist.samples[0].logits == local.logits);
    CHECK(prism::output_deviation(dist.samples[0].features, local.features) == 0.0);
  }
}

TEST_CASE("segment means with one row per segment equal full-tensor exchange") {
  const auto cfg = tiny(32, 4, 2, 16);
  const auto w = prism::Weights::random(cfg, 7);
  const Matrix x = prism::random_tokens(cfg, 8);
  const auto a = prism::forward_distributed(x, ExecutionPlan::prism(16, 2, 8), w);
  const auto b = prism::forward_distributed(x, ExecutionPlan::voltage(16, 2), w);
  CHECK(a.samples[0].features == b.samples[0].features);
}

TEST_CASE("single-device distribution equals local inference") {
  const auto cfg = tiny(32, 4, 2, 16);
  const auto w = prism::Weights::random(cfg, 7);
  const Matrix x = prism::random_tokens(cfg, 8);
  const auto dist = prism::forward_distributed(x, ExecutionPlan::prism(16, 1, 4), w);
  CHECK(dist.samples[0].features == prism::forward_local(x, w).features);
}

TEST_CASE("multiplicity bias makes means of repeated rows exact") {
  // Each segment of two rows holds one repeated token, so its mean is that
  // token and ln(2) restores its full softmax weight.
  const auto cfg = tiny(16, 2, 1, 8);
  const auto w = prism::Weights::random(cfg, 11);
  prism::Rng rng(12);
  const Matrix unique = prism::seeded_matrix(4, 16, 1.0, rng);
  Matrix x(8, 16);
  for (std::size_t r = 0; r < 8; ++r) std::copy(unique.row(r / 2).begin(), unique.row(r / 2).end(), x.row(r).begin());

  const auto biased = ExecutionPlan::prism(8, 2, 2, true);
  const auto unbiased = ExecutionPlan::prism(8, 2, 2, false);
  const auto full = ExecutionPlan::voltage(8, 2);
  const auto parts = prism::partition_input(x, biased.partition);
  for (std::size_t p = 0; p < 2; ++p) {
    const Matrix other_full[] = {parts[1 - p]};
    const Matrix other_mean[] = {prism::segment_means(parts[1 - p], 2)};
    const Matrix ref = prism::attention_block(parts[p], prism::augment(parts[p], other_full), w.layers[0], cfg, full, p);
    const Matrix with_bias =
        prism::attention_block(parts[p], prism::augment(parts[p], other_mean), w.layers[0], cfg, biased, p);
    const Matrix without =
        prism::attention_block(parts[p], prism::augment(parts[p], other_mean), w.layers[0], cfg, unbiased, p);
    CHECK(prism::output_deviation(with_bias, ref) < 1e-6);
    CHECK(prism::output_deviation(without, ref) > 1e-4);
  }
}

TEST_CASE("communication log counts received elements per block") {
  const auto cfg = tiny(64, 4, 2, 197);
  const auto w = prism::Weights::random(cfg, 1);
  const Matrix x = prism::random_tokens(cfg, 2);
  const auto full = prism::forward_distributed(x, ExecutionPlan::voltage(197, 2), w);
  const auto seg = prism::forward_distributed(x, ExecutionPlan::prism_cr(197, 2, 9.9), w);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t p = 0; p < 2; ++p) {
      CHECK(full.log.received[l][p] == 99 * 64);
      CHECK(seg.log.received[l][p] == 10 * 64);
    }
  CHECK(full.log.total_per_device(0) == 2 * 99 * 64);
}

TEST_CASE("batched distributed inference matches per-sample runs") {
  const auto cfg = tiny(32, 4, 2, 16);
  const auto w = prism::Weights::random(cfg, 2);
  const auto plan = ExecutionPlan::prism(16, 2, 4);
  const std::vector<Matrix> batch = {prism::random_tokens(cfg, 1), prism::random_tokens(cfg, 2)};
  prism::SimWorld world(2, prism::CostModel{});
  std::atomic<int> calls{0};
  const auto out = prism::forward_distributed(batch, plan, w, world, [&](std::size_t, std::size_t) { ++calls; });
  CHECK(calls == 4);
  CHECK(world.collectives_completed() == 2);
  for (std::size_t b = 0; b < 2; ++b) {
    CHECK(out.samples[b].features == prism::forward_distributed(batch[b], plan, w).samples[0].features);
  }
}

namespace {

class BrokenTransport : public prism::Collective {
 public:
  std::size_t world_size() const override { return 2; }
  prism::GatherResult all_gather(std::size_t, prism::Payload) override { throw std::runtime_error("link down"); }
  void compute(std::size_t, double) override {}
  void leave(std::size_t) override {}
};

}  // namespace

TEST_CASE("transport failures surface as transport errors") {
  const auto cfg = tiny(16, 2, 1, 8);
  const auto w = prism::Weights::random(cfg, 1);
  const std::vector<Matrix> batch = {prism::random_tokens(cfg, 1)};
  BrokenTransport broken;
  CHECK_THROWS_AS(prism::forward_distributed(batch, ExecutionPlan::voltage(8, 2), w, broken), prism::TransportError);
  prism::SimWorld three(3, prism::CostModel{});
  CHECK_THROWS_AS(prism::forward_distributed(batch, ExecutionPlan::voltage(8, 2), w, three), prism::ConfigError);
}

TEST_CASE("a failing device is reported instead of the induced deadlock") {
  const auto cfg = tiny(16, 2, 3, 8);
  const auto w = prism::Weights::random(cfg, 1);
  const std::vector<Matrix> batch = {prism::random_tokens(cfg, 1)};
  prism::SimWorld world(2, prism::CostModel{});
  auto hook = [](std::size_t device, std::size_t layer) {
    if (device == 1 && layer == 0) throw prism::ConfigError("device 1 crashed");
  };
  CHECK_THROWS_WITH_AS(prism::forward_distributed(batch, ExecutionPlan::voltage(8, 2), w, world, hook),
                       "device 1 crashed", prism::ConfigError);
}

TEST_CASE("weights round-trip through disk") {
  const auto cfg = tiny(16, 2, 2, 8);
  const auto w = prism::Weights::random(cfg, 21);
  const auto dir = std::filesystem::temp_directory_path() / "prism_weights_test";
  std::filesystem::create_directories(dir);
  prism::save_weights(w, dir / "toy.json");
  CHECK(std::filesystem::exists(dir / "toy.bin"));
  CHECK(prism::load_weights(dir / "toy.json") == w);
  CHECK(prism::weight_tensor_names(cfg).size() == 2 * 10 + 3);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(prism::load_weights(dir / "toy.json"), prism::IoError);
}
