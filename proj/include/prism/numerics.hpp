#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace prism {

/// Dense row-major matrix of 32-bit reals.
///
/// All model tensors (tokens, weights, activations) are Matrix values. Products
/// accumulate in double precision and round once per output element, so an
/// element depends only on its own row/column inputs and their order.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0F);
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  /// Builds a matrix from nested rows; all rows must have equal length.
  static Matrix from_rows(const std::vector<std::vector<float>>& rows);
  static Matrix identity(std::size_t n);

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  [[nodiscard]] std::span<float> row(std::size_t r) noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  [[nodiscard]] std::span<const float> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  [[nodiscard]] std::span<const float> data() const noexcept { return data_; }
  [[nodiscard]] std::span<float> data() noexcept { return data_; }

  /// Rows [first, first + count).
  [[nodiscard]] Matrix slice_rows(std::size_t first, std::size_t count) const;
  /// Columns [first, first + count).
  [[nodiscard]] Matrix slice_cols(std::size_t first, std::size_t count) const;
  /// Rows in the given order (indices may repeat).
  [[nodiscard]] Matrix gather_rows(std::span<const std::size_t> order) const;
  [[nodiscard]] Matrix transposed() const;

  bool all_finite() const noexcept;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

/// Row-wise concatenation; every block must have the same column count.
Matrix vstack(std::span<const Matrix> blocks);
/// Writes `src` into `dst` columns [first, first + src.cols()).
void set_cols(Matrix& dst, std::size_t first, const Matrix& src);

Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T without materialising the transpose.
Matrix matmul_transposed(const Matrix& a, const Matrix& b);
Matrix add(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& m, float factor);

/// Numerically stable row softmax. `bias`, when given, is added to the logits
/// before normalisation and must have the shape of `m`.
Matrix softmax_rows(const Matrix& m, const Matrix* bias = nullptr);
/// Same, with one additive bias per column shared by every row.
Matrix softmax_rows(const Matrix& m, std::span<const float> column_bias);

/// Per-row layer normalisation. A zero-variance row normalises to zero, so the
/// output row equals `beta`.
Matrix layer_norm(const Matrix& m, std::span<const float> gamma, std::span<const float> beta,
                  float eps = 1e-6F);

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
float gelu(float x) noexcept;
Matrix gelu(const Matrix& m);

/// xoshiro256** seeded through splitmix64. Identical seeds give identical
/// streams on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  /// Uniform in [-a, a).
  double symmetric(double a) noexcept;

  [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

/// Entries uniform on [-sqrt(3) scale, sqrt(3) scale), i.e. zero mean and
/// standard deviation `scale`. Consumes rows*cols draws from `rng`.
Matrix seeded_matrix(std::size_t rows, std::size_t cols, double scale, Rng& rng);

/// Frobenius norm, accumulated in double.
double frobenius_norm(const Matrix& m);

}  // namespace prism
