#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "prism/collective.hpp"
#include "prism/numerics.hpp"

namespace prism {

/// Encoder hyperparameters. Defaults are ViT-Base at 224x224 with 16x16
/// patches: 196 patches plus the class token.
struct ModelConfig {
  std::size_t embed_dim = 768;
  std::size_t num_heads = 12;
  std::size_t num_layers = 12;
  double mlp_ratio = 4.0;
  std::size_t seq_len = 197;
  std::size_t num_classes = 10;
  /// Flattened patch length (16*16*3); only used for FLOP accounting.
  std::size_t patch_dim = 768;

  void validate() const;
  [[nodiscard]] std::size_t head_dim() const { return embed_dim / num_heads; }
  [[nodiscard]] std::size_t mlp_hidden() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// How the sequence is split across devices and summarised for exchange.
///
/// The sequence is padded to a multiple of the device count by repeating the
/// last token. When `rows_per_device` is not a multiple of `segments`, segment
/// lengths differ by at most one (longer segments first).
struct PartitionSpec {
  std::size_t devices = 1;
  std::size_t seq_len = 1;
  std::size_t effective_len = 1;
  std::size_t rows_per_device = 1;
  std::size_t segments = 1;

  static PartitionSpec make(std::size_t seq_len, std::size_t devices, std::size_t segments);
  /// segments == rows_per_device, i.e. no compression.
  static PartitionSpec full(std::size_t seq_len, std::size_t devices);
  /// Picks the segment count whose compression rate equals `cr`.
  static PartitionSpec with_compression(std::size_t seq_len, std::size_t devices, double cr);

  [[nodiscard]] double compression_rate() const;
  /// Mean segment length rows_per_device / segments (not necessarily integral).
  [[nodiscard]] double segment_size() const;
  [[nodiscard]] std::vector<std::size_t> segment_sizes() const;
  [[nodiscard]] std::size_t padding() const { return effective_len - seq_len; }

  friend bool operator==(const PartitionSpec&, const PartitionSpec&) = default;
};

enum class ExecutionMode { Local, Distributed };
enum class Exchange { FullTensor, SegmentMeans };

/// Local execution, or distributed with full-tensor (Voltage) or Segment
/// Means (Prism) exchange.
struct ExecutionPlan {
  ExecutionMode mode = ExecutionMode::Local;
  PartitionSpec partition;
  Exchange exchange = Exchange::FullTensor;
  bool multiplicity_bias = false;

  static ExecutionPlan local(std::size_t seq_len);
  static ExecutionPlan voltage(std::size_t seq_len, std::size_t devices);
  static ExecutionPlan prism(std::size_t seq_len, std::size_t devices, std::size_t segments,
                             bool multiplicity_bias = true);
  static ExecutionPlan prism_cr(std::size_t seq_len, std::size_t devices, double cr,
                                bool multiplicity_bias = true);

  void validate() const;
  [[nodiscard]] bool distributed() const { return mode == ExecutionMode::Distributed; }
  [[nodiscard]] std::size_t devices() const { return distributed() ? partition.devices : 1; }
  /// Rows each device contributes to an all-gather (0 for Local).
  [[nodiscard]] std::size_t exchanged_rows() const;
  /// "local", "prism" or "voltage".
  [[nodiscard]] std::string mode_name() const;
  /// Human-readable label, e.g. "prism cr=9.9".
  [[nodiscard]] std::string describe() const;

  friend bool operator==(const ExecutionPlan&, const ExecutionPlan&) = default;
};

struct LayerWeights {
  std::vector<float> ln1_gamma, ln1_beta;
  Matrix w_q, w_k, w_v, w_o;
  std::vector<float> ln2_gamma, ln2_beta;
  Matrix w_mlp_in, w_mlp_out;

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct Weights {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::vector<LayerWeights> layers;
  std::vector<float> final_gamma, final_beta;
  Matrix head;

  /// Deterministic parameters from `seed`. Projections are drawn with
  /// standard deviation 1/sqrt(fan_in) in the order W_Q, W_K, W_V, W_O,
  /// W_mlp_in, W_mlp_out per layer, then the head; layer norms start at
  /// gamma = 1, beta = 0.
  static Weights random(const ModelConfig& cfg, std::uint64_t seed);

  friend bool operator==(const Weights&, const Weights&) = default;
};

/// Writes `<stem>.json` (header: config, seed, tensor table) and `<stem>.bin`
/// (little-endian float32 in tensor-table order) next to `header_path`.
void save_weights(const Weights& w, const std::filesystem::path& header_path);
Weights load_weights(const std::filesystem::path& header_path);
/// Tensor names in serialisation order.
std::vector<std::string> weight_tensor_names(const ModelConfig& cfg);

/// Random token matrix (seq_len x embed_dim, unit standard deviation).
Matrix random_tokens(const ModelConfig& cfg, std::uint64_t seed);

/// Repeats the final row until `rows` rows are present.
Matrix pad_sequence(const Matrix& x, std::size_t rows);

std::vector<Matrix> partition_input(const Matrix& x, const PartitionSpec& spec);

/// Column-wise means of `segments` equal row blocks; rows must divide evenly.
Matrix segment_means(const Matrix& x, std::size_t segments);
/// Column-wise means of consecutive row blocks of the given lengths.
Matrix segment_means(const Matrix& x, std::span<const std::size_t> segment_sizes);

/// Own partition first, then the other devices' blocks in ascending device
/// order.
Matrix augment(const Matrix& own, std::span<const Matrix> others);

/// Maps rows of an augmented key matrix to global device order, plus the
/// additive logit bias per key in that order.
struct KeyLayout {
  std::vector<std::size_t> order;
  std::vector<float> bias;
};

KeyLayout key_layout(const ExecutionPlan& plan, std::size_t device);

/// LN -> multi-head attention -> W_O -> residual. Queries come from `x_own`,
/// keys and values from `x_augmented`, whose first rows must be `x_own`.
Matrix attention_block(const Matrix& x_own, const Matrix& x_augmented, const LayerWeights& layer,
                       const ModelConfig& cfg, const ExecutionPlan& plan, std::size_t device = 0);
/// LN -> MLP(GELU) -> residual.
Matrix mlp_block(const Matrix& x, const LayerWeights& layer);

struct ForwardOutput {
  /// Final-normalised token features; for distributed runs these are the
  /// device outputs concatenated (effective_len rows, padding included).
  Matrix features;
  std::vector<float> logits;
};

/// Elements each device received in each block: [layer][device].
struct CommLog {
  std::vector<std::vector<std::size_t>> received;

  [[nodiscard]] std::size_t total_per_device(std::size_t device) const;
};

struct DistributedOutput {
  std::vector<ForwardOutput> samples;
  CommLog log;
};

/// Called by each device worker after it finishes a block.
using BlockHook = std::function<void(std::size_t device, std::size_t layer)>;

ForwardOutput forward_local(const Matrix& x, const Weights& w);
/// Local forward on the input padded the same way `spec` pads it.
ForwardOutput forward_local_padded(const Matrix& x, const Weights& w, const PartitionSpec& spec);

/// Runs one worker per device against `comm`. Each block performs exactly one
/// all-gather per device whose payload stacks the batch's per-sample blocks.
DistributedOutput forward_distributed(std::span<const Matrix> batch, const ExecutionPlan& plan,
                                      const Weights& w, Collective& comm,
                                      const BlockHook& after_block = {});
/// Single-sample convenience over an in-process zero-cost transport.
DistributedOutput forward_distributed(const Matrix& x, const ExecutionPlan& plan, const Weights& w);

/// ||a - b||_F / ||b||_F (0 when both are zero).
double output_deviation(const Matrix& a, const Matrix& b);

std::size_t argmax(std::span<const float> v);

}  // namespace prism
