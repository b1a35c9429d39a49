#include <bit>
#include <cstring>
#include <fstream>

#include "json_util.hpp"
#include "prism/errors.hpp"
#include "prism/segmodel.hpp"

namespace prism {

namespace {

using detail::json;

struct TensorRef {
  std::string name;
  std::size_t rows;
  std::size_t cols;
};

std::vector<TensorRef> tensor_table(const ModelConfig& cfg) {
  const std::size_t d = cfg.embed_dim;
  const std::size_t h = cfg.mlp_hidden();
  std::vector<TensorRef> table;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    table.push_back({p + "ln1_gamma", 1, d});
    table.push_back({p + "ln1_beta", 1, d});
    table.push_back({p + "w_q", d, d});
    table.push_back({p + "w_k", d, d});
    table.push_back({p + "w_v", d, d});
    table.push_back({p + "w_o", d, d});
    table.push_back({p + "ln2_gamma", 1, d});
    table.push_back({p + "ln2_beta", 1, d});
    table.push_back({p + "w_mlp_in", d, h});
    table.push_back({p + "w_mlp_out", h, d});
  }
  table.push_back({"final_gamma", 1, d});
  table.push_back({"final_beta", 1, d});
  table.push_back({"head", d, cfg.num_classes});
  return table;
}

// Flat views of the tensors in table order.
std::vector<std::span<float>> tensor_views(Weights& w) {
  std::vector<std::span<float>> views;
  for (auto& l : w.layers) {
    views.emplace_back(l.ln1_gamma);
    views.emplace_back(l.ln1_beta);
    views.push_back(l.w_q.data());
    views.push_back(l.w_k.data());
    views.push_back(l.w_v.data());
    views.push_back(l.w_o.data());
    views.emplace_back(l.ln2_gamma);
    views.emplace_back(l.ln2_beta);
    views.push_back(l.w_mlp_in.data());
    views.push_back(l.w_mlp_out.data());
  }
  views.emplace_back(w.final_gamma);
  views.emplace_back(w.final_beta);
  views.push_back(w.head.data());
  return views;
}

json config_to_json(const ModelConfig& c) {
  return {{"embed_dim", c.embed_dim},   {"num_heads", c.num_heads},     {"num_layers", c.num_layers},
          {"mlp_ratio", c.mlp_ratio},   {"seq_len", c.seq_len},         {"num_classes", c.num_classes},
          {"patch_dim", c.patch_dim}};
}

ModelConfig config_from_json(const json& j) {
  using namespace detail;
  ModelConfig c;
  c.embed_dim = get_count(j, "embed_dim", "config");
  c.num_heads = get_count(j, "num_heads", "config");
  c.num_layers = get_count(j, "num_layers", "config");
  c.mlp_ratio = get_number(j, "mlp_ratio", "config");
  c.seq_len = get_count(j, "seq_len", "config");
  c.num_classes = get_count(j, "num_classes", "config");
  c.patch_dim = get_count(j, "patch_dim", "config");
  c.validate();
  return c;
}

std::filesystem::path blob_path(const std::filesystem::path& header) {
  std::filesystem::path p = header;
  p.replace_extension(".bin");
  return p;
}

static_assert(std::endian::native == std::endian::little, "weight blobs are little-endian float32");

}  // namespace

std::vector<std::string> weight_tensor_names(const ModelConfig& cfg) {
  std::vector<std::string> names;
  for (auto& t : tensor_table(cfg)) names.push_back(t.name);
  return names;
}

void save_weights(const Weights& w, const std::filesystem::path& header_path) {
  w.config.validate();
  const auto table = tensor_table(w.config);
  Weights copy = w;
  const auto views = tensor_views(copy);
  if (views.size() != table.size()) throw ShapeError("save_weights: layer count does not match config");

  json tensors = json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (views[i].size() != table[i].rows * table[i].cols) {
      throw ShapeError("save_weights: tensor " + table[i].name + " has the wrong size");
    }
    tensors.push_back({{"name", table[i].name},
                       {"shape", {table[i].rows, table[i].cols}},
                       {"offset", offset}});
    offset += views[i].size();
  }
  const auto bin = blob_path(header_path);
  json header = {{"schema", 1},
                 {"config", config_to_json(w.config)},
                 {"seed", w.seed},
                 {"dtype", "float32-le"},
                 {"blob", bin.filename().string()},
                 {"tensors", tensors}};

  std::string blob;
  blob.reserve(offset * sizeof(float));
  for (const auto& v : views) {
    blob.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
  }
  detail::write_text(bin, blob);
  detail::write_text(header_path, header.dump(2) + "\n");
}

Weights load_weights(const std::filesystem::path& header_path) {
  using namespace detail;
  const json header = parse_json(read_text(header_path), header_path.string());
  check_schema(header, 1, "weights");
  Weights w;
  w.config = config_from_json(member(header, "config", "weights"));
  w.seed = member(header, "seed", "weights").get<std::uint64_t>();
  if (get_string(header, "dtype", "weights") != "float32-le") throw ParseError("weights: unsupported dtype");

  const auto table = tensor_table(w.config);
  const json& tensors = member(header, "tensors", "weights");
  if (!tensors.is_array() || tensors.size() != table.size()) {
    throw ParseError("weights: tensor table does not match config");
  }

  const std::string blob = read_text(header_path.parent_path() / get_string(header, "blob", "weights"));

  const std::size_t d = w.config.embed_dim;
  const std::size_t h = w.config.mlp_hidden();
  w.layers.resize(w.config.num_layers);
  for (auto& l : w.layers) {
    l.ln1_gamma.resize(d);
    l.ln1_beta.resize(d);
    l.ln2_gamma.resize(d);
    l.ln2_beta.resize(d);
    l.w_q = Matrix(d, d);
    l.w_k = Matrix(d, d);
    l.w_v = Matrix(d, d);
    l.w_o = Matrix(d, d);
    l.w_mlp_in = Matrix(d, h);
    l.w_mlp_out = Matrix(h, d);
  }
  w.final_gamma.resize(d);
  w.final_beta.resize(d);
  w.head = Matrix(d, w.config.num_classes);

  const auto views = tensor_views(w);
  for (std::size_t i = 0; i < table.size(); ++i) {
    const json& t = tensors[i];
    const std::string path = "weights.tensors[" + std::to_string(i) + "]";
    if (get_string(t, "name", path) != table[i].name) {
      throw ParseError(path + ": expected tensor " + table[i].name);
    }
    const std::size_t offset = get_count(t, "offset", path);
    const std::size_t bytes = views[i].size_bytes();
    if ((offset * sizeof(float)) + bytes > blob.size()) throw ParseError(path + ": blob is truncated");
    std::memcpy(views[i].data(), blob.data() + offset * sizeof(float), bytes);
  }
  return w;
}

}  // namespace prism
