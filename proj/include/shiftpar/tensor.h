#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace shiftpar {

// Arithmetic width of an engine instance. Values are always held in double
// storage; under F32 every op computes in float and rounds its outputs, so
// stored values are exactly representable floats.
enum class Precision { F32, F64 };

std::size_t precision_bytes(Precision p);
std::string_view to_string(Precision p);
Precision parse_precision(std::string_view text);

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array, innermost index fastest. Zero extents are allowed
// so empty cache windows and empty shards have a representation.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Precision precision = Precision::F64);
  Tensor(Shape shape, std::vector<double> data,
         Precision precision = Precision::F64);

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values,
                       Precision precision = Precision::F64);
  static Tensor vector(std::initializer_list<double> values,
                       Precision precision = Precision::F64);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data_.size(); }
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }
  Precision precision() const { return precision_; }
  std::size_t bytes() const { return numel() * precision_bytes(precision_); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  std::span<const double> row(std::size_t i) const;
  std::span<double> row(std::size_t i);

  double operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  double& operator()(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  // Rounds every element to the tensor's precision (no-op for F64).
  void round_to_precision();

 private:
  Shape shape_;
  std::vector<double> data_;
  Precision precision_ = Precision::F64;
};

// Bit-for-bit equality of shape, precision and payload.
bool bit_equal(const Tensor& a, const Tensor& b);

// max|a-b| / max(max|b|, tiny). Shapes must match.
double max_relative_diff(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);

// Multiply-add accounting: every op below that takes a counter adds
// 2 FLOPs per scalar multiply-accumulate it actually executes.
struct FlopCounter {
  std::uint64_t flops = 0;
};

// c[i][j] = sum_t a[i][t] * b[t][j], accumulated in ascending t.
Tensor matmul(const Tensor& a, const Tensor& b, FlopCounter* counter = nullptr);

Tensor softmax_rows(const Tensor& x);

// y_i = gain_i * x_i / sqrt(mean(x^2) + eps) for a vector x.
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);
// Row-wise rms_norm over a matrix.
Tensor rms_norm_rows(const Tensor& x, const Tensor& gain, double eps);

Tensor gelu(const Tensor& x);
void add_inplace(Tensor& a, const Tensor& b);

// Single-head causal attention: softmax(mask(q k^T / sqrt(d))) v.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        FlopCounter* counter = nullptr);

// Row kernel shared by every attention path. Query row i sits at absolute
// position first_position + i and attends keys [0, first_position + i].
// keys/values are row-major [tokens x head_dim] and must cover the last
// query position.
Tensor attend_rows(const Tensor& q, std::size_t first_position,
                   std::span<const double> keys,
                   std::span<const double> values, std::size_t head_dim,
                   FlopCounter* counter = nullptr);

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor transpose(const Tensor& a);

// Index of the largest element of row i; ties go to the lowest index.
std::size_t argmax_row(const Tensor& a, std::size_t i);

}  // namespace shiftpar
