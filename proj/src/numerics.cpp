#include "prism/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "prism/errors.hpp"

namespace prism {

namespace {

std::string dims(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                     std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix Matrix::from_rows(const std::vector<std::vector<float>>& rows) {
  if (rows.empty()) return {};
  const std::size_t cols = rows.front().size();
  std::vector<float> data;
  data.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw ShapeError("ragged rows in Matrix::from_rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return {rows.size(), cols, std::move(data)};
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0F;
  return m;
}

Matrix Matrix::slice_rows(std::size_t first, std::size_t count) const {
  if (first + count > rows_) throw ShapeError("row slice out of range for " + dims(*this));
  Matrix out(count, cols_);
  std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(first * cols_), count * cols_,
              out.data_.begin());
  return out;
}

Matrix Matrix::slice_cols(std::size_t first, std::size_t count) const {
  if (first + count > cols_) throw ShapeError("column slice out of range for " + dims(*this));
  Matrix out(rows_, count);
  for (std::size_t r = 0; r < rows_; ++r) {
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(r * cols_ + first), count,
                out.data_.begin() + static_cast<std::ptrdiff_t>(r * count));
  }
  return out;
}

Matrix Matrix::gather_rows(std::span<const std::size_t> order) const {
  Matrix out(order.size(), cols_);
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] >= rows_) throw ShapeError("gather index out of range for " + dims(*this));
    std::copy_n(row(order[i]).begin(), cols_, out.row(i).begin());
  }
  return out;
}

Matrix Matrix::transposed() const {
  Matrix out(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
  return out;
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Matrix vstack(std::span<const Matrix> blocks) {
  if (blocks.empty()) return {};
  const std::size_t cols = blocks.front().cols();
  std::size_t rows = 0;
  for (const auto& b : blocks) {
    if (b.cols() != cols) {
      throw ShapeError("vstack column mismatch: " + std::to_string(b.cols()) + " vs " +
                       std::to_string(cols));
    }
    rows += b.rows();
  }
  Matrix out(rows, cols);
  std::size_t at = 0;
  for (const auto& b : blocks) {
    std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(at));
    at += b.size();
  }
  return out;
}

void set_cols(Matrix& dst, std::size_t first, const Matrix& src) {
  if (src.rows() != dst.rows() || first + src.cols() > dst.cols()) {
    throw ShapeError("set_cols: cannot place " + dims(src) + " into " + dims(dst));
  }
  for (std::size_t r = 0; r < src.rows(); ++r)
    std::copy_n(src.row(r).begin(), src.cols(), dst.row(r).begin() + static_cast<std::ptrdiff_t>(first));
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + dims(a) + " * " + dims(b));
  }
  Matrix out(a.rows(), b.cols());
  std::vector<double> acc(b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) acc[j] += aik * static_cast<double>(brow[j]);
    }
    auto orow = out.row(i);
    for (std::size_t j = 0; j < b.cols(); ++j) orow[j] = static_cast<float>(acc[j]);
  }
  return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_transposed: " + dims(a) + " * (" + dims(b) + ")^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto brow = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k)
        acc += static_cast<double>(arow[k]) * static_cast<double>(brow[k]);
      out(i, j) = static_cast<float>(acc);
    }
  }
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("add: " + dims(a) + " + " + dims(b));
  }
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  return out;
}

Matrix scale(const Matrix& m, float factor) {
  Matrix out = m;
  for (auto& v : out.data()) v *= factor;
  return out;
}

namespace {

void softmax_row(std::span<const float> logits, std::span<const float> bias, std::span<float> out) {
  std::vector<double> z(logits.size());
  double max_z = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < logits.size(); ++j) {
    z[j] = static_cast<double>(logits[j]) + (bias.empty() ? 0.0 : static_cast<double>(bias[j]));
    max_z = std::max(max_z, z[j]);
  }
  double sum = 0.0;
  for (auto& v : z) {
    v = std::exp(v - max_z);
    sum += v;
  }
  for (std::size_t j = 0; j < z.size(); ++j) out[j] = static_cast<float>(z[j] / sum);
}

}  // namespace

Matrix softmax_rows(const Matrix& m, const Matrix* bias) {
  if (bias != nullptr && (bias->rows() != m.rows() || bias->cols() != m.cols())) {
    throw ShapeError("softmax_rows: bias " + dims(*bias) + " vs logits " + dims(m));
  }
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    softmax_row(m.row(r), bias != nullptr ? bias->row(r) : std::span<const float>{}, out.row(r));
  }
  return out;
}

Matrix softmax_rows(const Matrix& m, std::span<const float> column_bias) {
  if (!column_bias.empty() && column_bias.size() != m.cols()) {
    throw ShapeError("softmax_rows: column bias length " + std::to_string(column_bias.size()) +
                     " vs " + std::to_string(m.cols()) + " columns");
  }
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) softmax_row(m.row(r), column_bias, out.row(r));
  return out;
}

Matrix layer_norm(const Matrix& m, std::span<const float> gamma, std::span<const float> beta,
                  float eps) {
  if (gamma.size() != m.cols() || beta.size() != m.cols()) {
    throw ShapeError("layer_norm: parameter length does not match " + std::to_string(m.cols()) +
                     " columns");
  }
  if (!(eps > 0.0F)) throw ConfigError("layer_norm: eps must be positive");
  Matrix out(m.rows(), m.cols());
  const auto n = static_cast<double>(m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto x = m.row(r);
    auto y = out.row(r);
    double mean = 0.0;
    for (float v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (float v : x) var += (v - mean) * (v - mean);
    var /= n;
    if (var == 0.0) {
      std::copy(beta.begin(), beta.end(), y.begin());
      continue;
    }
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    for (std::size_t c = 0; c < x.size(); ++c) {
      y[c] = static_cast<float>((x[c] - mean) * inv * gamma[c] + beta[c]);
    }
  }
  return out;
}

float gelu(float x) noexcept {
  constexpr double kSqrt2OverPi = 0.7978845608028654;
  constexpr double kCubic = 0.044715;
  const double xd = x;
  return static_cast<float>(0.5 * xd * (1.0 + std::tanh(kSqrt2OverPi * (xd + kCubic * xd * xd * xd))));
}

Matrix gelu(const Matrix& m) {
  Matrix out = m;
  for (auto& v : out.data()) v = gelu(v);
  return out;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30U)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27U)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31U);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
  return (x << static_cast<unsigned>(k)) | (x >> static_cast<unsigned>(64 - k));
}

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t sm = seed;
  for (auto& s : s_) s = splitmix64(sm);
}

std::uint64_t Rng::next_u64() noexcept {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17U;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11U) * 0x1.0p-53;
}

double Rng::symmetric(double a) noexcept { return (2.0 * uniform() - 1.0) * a; }

Matrix seeded_matrix(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
  if (!(scale > 0.0)) throw ConfigError("seeded_matrix: scale must be positive");
  const double half_width = std::sqrt(3.0) * scale;
  Matrix out(rows, cols);
  for (auto& v : out.data()) v = static_cast<float>(rng.symmetric(half_width));
  return out;
}

double frobenius_norm(const Matrix& m) {
  double acc = 0.0;
  for (float v : m.data()) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

}  // namespace prism
