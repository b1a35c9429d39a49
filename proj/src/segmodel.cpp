#include "prism/segmodel.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <thread>

#include "prism/commsim.hpp"
#include "prism/errors.hpp"

namespace prism {

void ModelConfig::validate() const {
  if (embed_dim == 0 || num_heads == 0 || num_layers == 0 || seq_len == 0 || num_classes == 0) {
    throw ConfigError("model config: dimensions must be positive");
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError("model config: embed_dim " + std::to_string(embed_dim) +
                      " is not divisible by num_heads " + std::to_string(num_heads));
  }
  if (!(mlp_ratio > 0.0) || mlp_hidden() == 0) throw ConfigError("model config: bad mlp_ratio");
}

std::size_t ModelConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
}

PartitionSpec PartitionSpec::make(std::size_t seq_len, std::size_t devices, std::size_t segments) {
  if (devices < 1) throw ConfigError("partition: device count must be at least 1");
  if (seq_len < 1) throw ConfigError("partition: sequence length must be at least 1");
  PartitionSpec s;
  s.devices = devices;
  s.seq_len = seq_len;
  s.rows_per_device = (seq_len + devices - 1) / devices;
  s.effective_len = s.rows_per_device * devices;
  if (segments < 1 || segments > s.rows_per_device) {
    throw PartitionError("partition: segment count " + std::to_string(segments) +
                         " outside [1, " + std::to_string(s.rows_per_device) + "]");
  }
  s.segments = segments;
  return s;
}

PartitionSpec PartitionSpec::full(std::size_t seq_len, std::size_t devices) {
  if (devices < 1) throw ConfigError("partition: device count must be at least 1");
  return make(seq_len, devices, (seq_len + devices - 1) / devices);
}

PartitionSpec PartitionSpec::with_compression(std::size_t seq_len, std::size_t devices, double cr) {
  if (!(cr >= 1.0)) throw PartitionError("partition: compression rate must be >= 1");
  const PartitionSpec base = full(seq_len, devices);
  const double exact = static_cast<double>(base.effective_len) / (static_cast<double>(devices) * cr);
  const auto segments = static_cast<std::size_t>(std::llround(exact));
  if (segments >= 1 && segments <= base.rows_per_device) {
    PartitionSpec s = make(seq_len, devices, segments);
    if (std::abs(s.compression_rate() - cr) <= 1e-6 * cr) return s;
  }
  std::ostringstream msg;
  msg << "partition: no integral segment count gives CR " << cr << " for N=" << seq_len
      << ", P=" << devices;
  throw PartitionError(msg.str());
}

double PartitionSpec::compression_rate() const {
  return static_cast<double>(effective_len) /
         (static_cast<double>(segments) * static_cast<double>(devices));
}

double PartitionSpec::segment_size() const {
  return static_cast<double>(rows_per_device) / static_cast<double>(segments);
}

std::vector<std::size_t> PartitionSpec::segment_sizes() const {
  const std::size_t base = rows_per_device / segments;
  const std::size_t extra = rows_per_device % segments;
  std::vector<std::size_t> sizes(segments, base);
  for (std::size_t i = 0; i < extra; ++i) ++sizes[i];
  return sizes;
}

ExecutionPlan ExecutionPlan::local(std::size_t seq_len) {
  ExecutionPlan p;
  p.mode = ExecutionMode::Local;
  p.partition = PartitionSpec::full(seq_len, 1);
  return p;
}

ExecutionPlan ExecutionPlan::voltage(std::size_t seq_len, std::size_t devices) {
  ExecutionPlan p;
  p.mode = ExecutionMode::Distributed;
  p.partition = PartitionSpec::full(seq_len, devices);
  p.exchange = Exchange::FullTensor;
  return p;
}

ExecutionPlan ExecutionPlan::prism(std::size_t seq_len, std::size_t devices, std::size_t segments,
                                   bool multiplicity_bias) {
  ExecutionPlan p;
  p.mode = ExecutionMode::Distributed;
  p.partition = PartitionSpec::make(seq_len, devices, segments);
  p.exchange = Exchange::SegmentMeans;
  p.multiplicity_bias = multiplicity_bias;
  return p;
}

ExecutionPlan ExecutionPlan::prism_cr(std::size_t seq_len, std::size_t devices, double cr,
                                      bool multiplicity_bias) {
  ExecutionPlan p;
  p.mode = ExecutionMode::Distributed;
  p.partition = PartitionSpec::with_compression(seq_len, devices, cr);
  p.exchange = Exchange::SegmentMeans;
  p.multiplicity_bias = multiplicity_bias;
  return p;
}

void ExecutionPlan::validate() const {
  const auto& s = partition;
  if (s.devices < 1 || s.rows_per_device * s.devices != s.effective_len || s.effective_len < s.seq_len ||
      s.effective_len - s.seq_len >= s.devices) {
    throw ConfigError("plan: inconsistent partition geometry");
  }
  if (mode == ExecutionMode::Local) return;
  if (s.segments < 1 || s.segments > s.rows_per_device) {
    throw ConfigError("plan: segment count outside [1, rows per device]");
  }
  if (exchange == Exchange::FullTensor && s.segments != s.rows_per_device) {
    throw ConfigError("plan: full-tensor exchange requires one row per segment");
  }
}

std::size_t ExecutionPlan::exchanged_rows() const {
  if (!distributed()) return 0;
  return exchange == Exchange::FullTensor ? partition.rows_per_device : partition.segments;
}

std::string ExecutionPlan::mode_name() const {
  if (!distributed()) return "local";
  return exchange == Exchange::FullTensor ? "voltage" : "prism";
}

std::string ExecutionPlan::describe() const {
  if (!distributed() || exchange == Exchange::FullTensor) return mode_name();
  std::ostringstream out;
  out << "prism cr=" << std::setprecision(6) << partition.compression_rate();
  return out.str();
}

Weights Weights::random(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t d = cfg.embed_dim;
  const std::size_t hidden = cfg.mlp_hidden();
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sh = 1.0 / std::sqrt(static_cast<double>(hidden));
  Weights w;
  w.config = cfg;
  w.seed = seed;
  w.layers.reserve(cfg.num_layers);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    LayerWeights lw;
    lw.ln1_gamma.assign(d, 1.0F);
    lw.ln1_beta.assign(d, 0.0F);
    lw.ln2_gamma.assign(d, 1.0F);
    lw.ln2_beta.assign(d, 0.0F);
    lw.w_q = seeded_matrix(d, d, sd, rng);
    lw.w_k = seeded_matrix(d, d, sd, rng);
    lw.w_v = seeded_matrix(d, d, sd, rng);
    lw.w_o = seeded_matrix(d, d, sd, rng);
    lw.w_mlp_in = seeded_matrix(d, hidden, sd, rng);
    lw.w_mlp_out = seeded_matrix(hidden, d, sh, rng);
    w.layers.push_back(std::move(lw));
  }
  w.final_gamma.assign(d, 1.0F);
  w.final_beta.assign(d, 0.0F);
  w.head = seeded_matrix(d, cfg.num_classes, sd, rng);
  return w;
}

Matrix random_tokens(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return seeded_matrix(cfg.seq_len, cfg.embed_dim, 1.0, rng);
}

Matrix pad_sequence(const Matrix& x, std::size_t rows) {
  if (x.rows() == 0) throw ShapeError("pad_sequence: empty input");
  if (rows < x.rows()) throw ShapeError("pad_sequence: target shorter than input");
  Matrix out(rows, x.cols());
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  const auto last = x.row(x.rows() - 1);
  for (std::size_t r = x.rows(); r < rows; ++r) std::copy(last.begin(), last.end(), out.row(r).begin());
  return out;
}

std::vector<Matrix> partition_input(const Matrix& x, const PartitionSpec& spec) {
  if (spec.devices < 1) throw ConfigError("partition_input: device count must be at least 1");
  if (x.rows() != spec.seq_len) {
    throw ShapeError("partition_input: input has " + std::to_string(x.rows()) + " rows, expected " +
                     std::to_string(spec.seq_len));
  }
  const Matrix padded = pad_sequence(x, spec.effective_len);
  std::vector<Matrix> parts;
  parts.reserve(spec.devices);
  for (std::size_t p = 0; p < spec.devices; ++p) {
    parts.push_back(padded.slice_rows(p * spec.rows_per_device, spec.rows_per_device));
  }
  return parts;
}

Matrix segment_means(const Matrix& x, std::size_t segments) {
  if (segments == 0 || x.rows() % segments != 0) {
    throw PartitionError("segment_means: " + std::to_string(x.rows()) + " rows do not split into " +
                         std::to_string(segments) + " equal segments");
  }
  const std::vector<std::size_t> sizes(segments, x.rows() / segments);
  return segment_means(x, sizes);
}

Matrix segment_means(const Matrix& x, std::span<const std::size_t> segment_sizes) {
  const std::size_t total = std::accumulate(segment_sizes.begin(), segment_sizes.end(), std::size_t{0});
  if (total != x.rows() || std::find(segment_sizes.begin(), segment_sizes.end(), 0U) != segment_sizes.end()) {
    throw PartitionError("segment_means: segment lengths do not tile " + std::to_string(x.rows()) +
                         " rows");
  }
  Matrix out(segment_sizes.size(), x.cols());
  std::vector<double> acc(x.cols());
  std::size_t row = 0;
  for (std::size_t s = 0; s < segment_sizes.size(); ++s) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t i = 0; i < segment_sizes[s]; ++i, ++row) {
      const auto r = x.row(row);
      for (std::size_t c = 0; c < x.cols(); ++c) acc[c] += r[c];
    }
    const auto n = static_cast<double>(segment_sizes[s]);
    auto o = out.row(s);
    for (std::size_t c = 0; c < x.cols(); ++c) o[c] = static_cast<float>(acc[c] / n);
  }
  return out;
}

Matrix augment(const Matrix& own, std::span<const Matrix> others) {
  std::vector<Matrix> blocks;
  blocks.reserve(others.size() + 1);
  blocks.push_back(own);
  for (const auto& o : others) {
    if (o.cols() != own.cols()) {
      throw ShapeError("augment: block has " + std::to_string(o.cols()) + " columns, expected " +
                       std::to_string(own.cols()));
    }
    blocks.push_back(o);
  }
  return vstack(blocks);
}

KeyLayout key_layout(const ExecutionPlan& plan, std::size_t device) {
  KeyLayout layout;
  if (!plan.distributed()) return layout;
  const auto& spec = plan.partition;
  if (device >= spec.devices) throw ConfigError("key_layout: device index out of range");
  const std::size_t own = spec.rows_per_device;
  const std::size_t block = plan.exchanged_rows();

  std::vector<float> block_bias(block, 0.0F);
  if (plan.exchange == Exchange::SegmentMeans && plan.multiplicity_bias) {
    const auto sizes = spec.segment_sizes();
    for (std::size_t i = 0; i < block; ++i) {
      block_bias[i] = static_cast<float>(std::log(static_cast<double>(sizes[i])));
    }
  }

  std::size_t other_index = 0;
  for (std::size_t j = 0; j < spec.devices; ++j) {
    if (j == device) {
      for (std::size_t r = 0; r < own; ++r) {
        layout.order.push_back(r);
        layout.bias.push_back(0.0F);
      }
      continue;
    }
    const std::size_t offset = own + other_index * block;
    for (std::size_t r = 0; r < block; ++r) {
      layout.order.push_back(offset + r);
      layout.bias.push_back(block_bias[r]);
    }
    ++other_index;
  }
  return layout;
}

Matrix attention_block(const Matrix& x_own, const Matrix& x_augmented, const LayerWeights& layer,
                       const ModelConfig& cfg, const ExecutionPlan& plan, std::size_t device) {
  const std::size_t d = cfg.embed_dim;
  if (x_own.cols() != d || x_augmented.cols() != d) {
    throw ShapeError("attention_block: expected " + std::to_string(d) + " columns");
  }
  if (x_augmented.rows() < x_own.rows()) {
    throw ShapeError("attention_block: augmented input shorter than own partition");
  }
  KeyLayout layout = key_layout(plan, device);
  if (plan.distributed()) {
    const auto& spec = plan.partition;
    const std::size_t expected = spec.rows_per_device + (spec.devices - 1) * plan.exchanged_rows();
    if (x_own.rows() != spec.rows_per_device || x_augmented.rows() != expected) {
      throw ShapeError("attention_block: partition shapes do not match the plan");
    }
  }

  const Matrix normed = layer_norm(x_augmented, layer.ln1_gamma, layer.ln1_beta);
  const Matrix queries_in = normed.slice_rows(0, x_own.rows());
  const Matrix keys_in = layout.order.empty() ? normed : normed.gather_rows(layout.order);

  const Matrix q = matmul(queries_in, layer.w_q);
  const Matrix k = matmul(keys_in, layer.w_k);
  const Matrix v = matmul(keys_in, layer.w_v);

  const std::size_t dh = cfg.head_dim();
  const auto inv_sqrt = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));
  Matrix context(x_own.rows(), d);
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    const Matrix qh = q.slice_cols(h * dh, dh);
    const Matrix kh = k.slice_cols(h * dh, dh);
    const Matrix vh = v.slice_cols(h * dh, dh);
    const Matrix scores = scale(matmul_transposed(qh, kh), inv_sqrt);
    const Matrix probs = softmax_rows(scores, layout.bias);
    set_cols(context, h * dh, matmul(probs, vh));
  }
  return add(x_own, matmul(context, layer.w_o));
}

Matrix mlp_block(const Matrix& x, const LayerWeights& layer) {
  const Matrix normed = layer_norm(x, layer.ln2_gamma, layer.ln2_beta);
  return add(x, matmul(gelu(matmul(normed, layer.w_mlp_in)), layer.w_mlp_out));
}

std::size_t CommLog::total_per_device(std::size_t device) const {
  std::size_t total = 0;
  for (const auto& layer : received) {
    if (device < layer.size()) total += layer[device];
  }
  return total;
}

namespace {

std::vector<float> classify(const Matrix& features, const Weights& w) {
  const Matrix cls = features.slice_rows(0, 1);
  const Matrix logits = matmul(cls, w.head);
  return {logits.data().begin(), logits.data().end()};
}

ForwardOutput forward_rows(const Matrix& x, const Weights& w) {
  const auto& cfg = w.config;
  if (x.cols() != cfg.embed_dim) throw ShapeError("forward_local: wrong embedding width");
  const ExecutionPlan plan = ExecutionPlan::local(x.rows());
  Matrix h = x;
  for (const auto& layer : w.layers) {
    h = mlp_block(attention_block(h, h, layer, cfg, plan), layer);
  }
  ForwardOutput out;
  out.features = layer_norm(h, w.final_gamma, w.final_beta);
  out.logits = classify(out.features, w);
  return out;
}

}  // namespace

ForwardOutput forward_local(const Matrix& x, const Weights& w) {
  if (x.rows() != w.config.seq_len) {
    throw ShapeError("forward_local: input has " + std::to_string(x.rows()) + " rows, expected " +
                     std::to_string(w.config.seq_len));
  }
  return forward_rows(x, w);
}

ForwardOutput forward_local_padded(const Matrix& x, const Weights& w, const PartitionSpec& spec) {
  if (x.rows() != spec.seq_len) throw ShapeError("forward_local_padded: sequence length mismatch");
  return forward_rows(pad_sequence(x, spec.effective_len), w);
}

DistributedOutput forward_distributed(std::span<const Matrix> batch, const ExecutionPlan& plan,
                                      const Weights& w, Collective& comm,
                                      const BlockHook& after_block) {
  if (!plan.distributed()) throw ConfigError("forward_distributed: plan is not distributed");
  plan.validate();
  const auto& cfg = w.config;
  const auto& spec = plan.partition;
  const std::size_t devices = spec.devices;
  if (comm.world_size() != devices) {
    throw ConfigError("forward_distributed: collective has " + std::to_string(comm.world_size()) +
                      " devices, plan needs " + std::to_string(devices));
  }
  if (spec.seq_len != cfg.seq_len) throw ConfigError("forward_distributed: plan and model disagree on N");
  if (batch.empty()) throw ConfigError("forward_distributed: empty batch");

  // parts[b][p]
  std::vector<std::vector<Matrix>> parts;
  parts.reserve(batch.size());
  for (const auto& x : batch) {
    if (x.cols() != cfg.embed_dim) throw ShapeError("forward_distributed: wrong embedding width");
    parts.push_back(partition_input(x, spec));
  }

  const auto sizes = spec.segment_sizes();
  const std::size_t block_rows = plan.exchanged_rows();
  DistributedOutput result;
  result.log.received.assign(cfg.num_layers, std::vector<std::size_t>(devices, 0));
  std::vector<std::vector<Matrix>> outputs(devices);
  std::vector<std::exception_ptr> errors(devices);

  auto worker = [&](std::size_t p) {
    try {
      std::vector<Matrix> h;
      h.reserve(parts.size());
      for (auto& sample : parts) h.push_back(sample[p]);

      for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const auto& layer = w.layers[l];
        std::vector<Matrix> blocks;
        blocks.reserve(h.size());
        for (const auto& hb : h) {
          blocks.push_back(plan.exchange == Exchange::SegmentMeans ? segment_means(hb, sizes) : hb);
        }
        GatherResult gathered;
        try {
          gathered = comm.all_gather(p, Payload::of(vstack(blocks)));
        } catch (const TransportError&) {
          throw;
        } catch (const std::exception& e) {
          throw TransportError(std::string("all-gather failed: ") + e.what());
        }
        if (gathered.payloads.size() != devices) throw TransportError("all-gather returned wrong device count");

        std::size_t received = 0;
        for (std::size_t j = 0; j < devices; ++j) {
          if (j != p) received += gathered.payloads[j].size();
        }
        result.log.received[l][p] = received;

        for (std::size_t b = 0; b < h.size(); ++b) {
          std::vector<Matrix> others;
          others.reserve(devices - 1);
          for (std::size_t j = 0; j < devices; ++j) {
            if (j != p) others.push_back(gathered.payloads[j].slice_rows(b * block_rows, block_rows));
          }
          const Matrix x_hat = augment(h[b], others);
          h[b] = mlp_block(attention_block(h[b], x_hat, layer, cfg, plan, p), layer);
        }
        if (after_block) after_block(p, l);
      }
      for (auto& hb : h) hb = layer_norm(hb, w.final_gamma, w.final_beta);
      outputs[p] = std::move(h);
    } catch (...) {
      errors[p] = std::current_exception();
    }
    comm.leave(p);
  };

  {
    std::vector<std::jthread> threads;
    threads.reserve(devices);
    for (std::size_t p = 0; p < devices; ++p) threads.emplace_back(worker, p);
  }

  // Report the root cause rather than the deadlocks it induced in peers.
  std::exception_ptr first_error;
  for (const auto& e : errors) {
    if (!e) continue;
    if (!first_error) first_error = e;
    try {
      std::rethrow_exception(e);
    } catch (const DeadlockError&) {
    } catch (...) {
      std::rethrow_exception(e);
    }
  }
  if (first_error) std::rethrow_exception(first_error);

  result.samples.reserve(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    std::vector<Matrix> rows;
    rows.reserve(devices);
    for (std::size_t p = 0; p < devices; ++p) rows.push_back(std::move(outputs[p][b]));
    ForwardOutput out;
    out.features = vstack(rows);
    // The class token is row 0, owned by device 0.
    out.logits = classify(out.features, w);
    result.samples.push_back(std::move(out));
  }
  return result;
}

DistributedOutput forward_distributed(const Matrix& x, const ExecutionPlan& plan, const Weights& w) {
  CostModel free_transport;
  free_transport.stage_d2h_rate_bytes_per_ms = 1e300;
  free_transport.stage_h2d_rate_bytes_per_ms = 1e300;
  free_transport.net_bandwidth_mbps = 1e300;
  SimWorld world(plan.partition.devices, free_transport);
  return forward_distributed(std::span<const Matrix>(&x, 1), plan, w, world);
}

double output_deviation(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("output_deviation: shape mismatch");
  }
  double diff = 0.0;
  double ref = 0.0;
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const double delta = static_cast<double>(ad[i]) - static_cast<double>(bd[i]);
    diff += delta * delta;
    ref += static_cast<double>(bd[i]) * static_cast<double>(bd[i]);
  }
  if (diff == 0.0) return 0.0;
  if (ref == 0.0) return std::numeric_limits<double>::infinity();
  return std::sqrt(diff) / std::sqrt(ref);
}

std::size_t argmax(std::span<const float> v) {
  if (v.empty()) throw ShapeError("argmax: empty vector");
  return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

}  // namespace prism
