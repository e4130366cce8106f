#include "shiftpar/tensor.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

#include "shiftpar/errors.h"

namespace shiftpar {

std::size_t precision_bytes(Precision p) {
  return p == Precision::F32 ? 4 : 8;
}

std::string_view to_string(Precision p) {
  return p == Precision::F32 ? "f32" : "f64";
}

Precision parse_precision(std::string_view text) {
  if (text == "f32" || text == "F32") return Precision::F32;
  if (text == "f64" || text == "F64") return Precision::F64;
  throw ConfigError("unknown precision '" + std::string(text) +
                    "' (expected f32 or f64)");
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Precision precision)
    : shape_(std::move(shape)),
      data_(shape_numel(shape_), 0.0),
      precision_(precision) {}

Tensor::Tensor(Shape shape, std::vector<double> data, Precision precision)
    : shape_(std::move(shape)), data_(std::move(data)), precision_(precision) {
  SHIFTPAR_CHECK(shape_numel(shape_) == data_.size(),
                 "tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string(shape_));
  round_to_precision();
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<double> values,
                      Precision precision) {
  return Tensor({rows, cols}, std::vector<double>(values), precision);
}

Tensor Tensor::vector(std::initializer_list<double> values,
                      Precision precision) {
  return Tensor({values.size()}, std::vector<double>(values), precision);
}

std::size_t Tensor::dim(std::size_t axis) const {
  SHIFTPAR_CHECK(axis < shape_.size(), "axis out of range for shape " +
                                           shape_string(shape_));
  return shape_[axis];
}

std::span<const double> Tensor::row(std::size_t i) const {
  const std::size_t width = numel() / std::max<std::size_t>(rows(), 1);
  return std::span<const double>(data_).subspan(i * width, width);
}

std::span<double> Tensor::row(std::size_t i) {
  const std::size_t width = numel() / std::max<std::size_t>(rows(), 1);
  return std::span<double>(data_).subspan(i * width, width);
}

void Tensor::round_to_precision() {
  if (precision_ == Precision::F32) {
    for (double& x : data_) x = static_cast<double>(static_cast<float>(x));
  }
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.precision() != b.precision()) return false;
  if (a.numel() == 0) return true;
  return std::memcmp(a.data().data(), b.data().data(),
                     a.numel() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  SHIFTPAR_CHECK(a.shape() == b.shape(), "max_abs_diff: shape mismatch " +
                                             shape_string(a.shape()) + " vs " +
                                             shape_string(b.shape()));
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  return worst;
}

double max_relative_diff(const Tensor& a, const Tensor& b) {
  double scale = 0.0;
  for (double x : b.data()) scale = std::max(scale, std::abs(x));
  return max_abs_diff(a, b) /
         std::max(scale, std::numeric_limits<double>::min());
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(),
                     [](double x) { return std::isfinite(x); });
}

namespace {

void require_matrix(const Tensor& t, const char* op) {
  SHIFTPAR_CHECK(t.rank() == 2, std::string(op) + ": expected a matrix, got " +
                                    shape_string(t.shape()));
}

void require_same_precision(const Tensor& a, const Tensor& b, const char* op) {
  SHIFTPAR_CHECK(a.precision() == b.precision(),
                 std::string(op) + ": mixed precision operands");
}

template <class T>
void matmul_kernel(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n) {
  std::vector<T> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), T(0));
    const double* arow = a + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const T av = static_cast<T>(arow[t]);
      const double* brow = b + t * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<T>(brow[j]);
    }
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<double>(acc[j]);
  }
}

template <class T>
void softmax_kernel(std::span<const double> in, std::span<double> out) {
  if (in.empty()) return;
  T mx = static_cast<T>(in[0]);
  for (double x : in) mx = std::max(mx, static_cast<T>(x));
  std::vector<T> e(in.size());
  T sum = 0;
  for (std::size_t j = 0; j < in.size(); ++j) {
    e[j] = std::exp(static_cast<T>(in[j]) - mx);
    sum += e[j];
  }
  for (std::size_t j = 0; j < in.size(); ++j) {
    out[j] = static_cast<double>(e[j] / sum);
  }
}

template <class T>
void rms_norm_kernel(std::span<const double> x, std::span<const double> gain,
                     T eps, std::span<double> y) {
  T sumsq = 0;
  for (double v : x) sumsq += static_cast<T>(v) * static_cast<T>(v);
  const T mean = sumsq / static_cast<T>(x.size());
  const T denom = std::sqrt(mean + eps);
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = static_cast<double>(static_cast<T>(gain[i]) * static_cast<T>(x[i]) /
                               denom);
  }
}

template <class T>
void attend_kernel(const Tensor& q, std::size_t first_position,
                   std::span<const double> keys, std::span<const double> values,
                   std::size_t d, Tensor& out) {
  const T sqrt_d = std::sqrt(static_cast<T>(d));
  std::vector<T> scores;
  std::vector<T> acc(d);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const std::size_t n_keys = first_position + i + 1;
    scores.assign(n_keys, T(0));
    const auto qrow = q.row(i);
    for (std::size_t j = 0; j < n_keys; ++j) {
      const double* krow = keys.data() + j * d;
      T dot = 0;
      for (std::size_t t = 0; t < d; ++t) {
        dot += static_cast<T>(qrow[t]) * static_cast<T>(krow[t]);
      }
      scores[j] = dot / sqrt_d;
    }
    T mx = scores[0];
    for (T s : scores) mx = std::max(mx, s);
    T sum = 0;
    for (T& s : scores) {
      s = std::exp(s - mx);
      sum += s;
    }
    for (T& s : scores) s = s / sum;
    std::fill(acc.begin(), acc.end(), T(0));
    for (std::size_t j = 0; j < n_keys; ++j) {
      const double* vrow = values.data() + j * d;
      for (std::size_t t = 0; t < d; ++t) {
        acc[t] += scores[j] * static_cast<T>(vrow[t]);
      }
    }
    auto orow = out.row(i);
    for (std::size_t t = 0; t < d; ++t) orow[t] = static_cast<double>(acc[t]);
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, FlopCounter* counter) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  require_same_precision(a, b, "matmul");
  SHIFTPAR_CHECK(a.cols() == b.rows(), "matmul: inner extents differ " +
                                           shape_string(a.shape()) + " x " +
                                           shape_string(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n}, a.precision());
  if (a.precision() == Precision::F32) {
    matmul_kernel<float>(a.data().data(), b.data().data(), c.data().data(), m,
                         k, n);
  } else {
    matmul_kernel<double>(a.data().data(), b.data().data(), c.data().data(), m,
                          k, n);
  }
  if (counter) counter->flops += 2ull * m * k * n;
  return c;
}

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  Tensor y(x.shape(), x.precision());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (x.precision() == Precision::F32) {
      softmax_kernel<float>(x.row(i), y.row(i));
    } else {
      softmax_kernel<double>(x.row(i), y.row(i));
    }
  }
  return y;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  SHIFTPAR_CHECK(x.rank() == 1 && gain.shape() == x.shape(),
                 "rms_norm: x and gain must be equal-length vectors");
  SHIFTPAR_CHECK(eps > 0, "rms_norm: eps must be positive");
  Tensor y(x.shape(), x.precision());
  if (x.precision() == Precision::F32) {
    rms_norm_kernel<float>(x.data(), gain.data(), static_cast<float>(eps),
                           y.data());
  } else {
    rms_norm_kernel<double>(x.data(), gain.data(), eps, y.data());
  }
  return y;
}

Tensor rms_norm_rows(const Tensor& x, const Tensor& gain, double eps) {
  require_matrix(x, "rms_norm_rows");
  SHIFTPAR_CHECK(gain.rank() == 1 && gain.dim(0) == x.cols(),
                 "rms_norm_rows: gain length must equal row width");
  SHIFTPAR_CHECK(eps > 0, "rms_norm_rows: eps must be positive");
  Tensor y(x.shape(), x.precision());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (x.precision() == Precision::F32) {
      rms_norm_kernel<float>(x.row(i), gain.data(), static_cast<float>(eps),
                             y.row(i));
    } else {
      rms_norm_kernel<double>(x.row(i), gain.data(), eps, y.row(i));
    }
  }
  return y;
}

Tensor gelu(const Tensor& x) {
  Tensor y(x.shape(), x.precision());
  const auto in = x.data();
  auto out = y.data();
  if (x.precision() == Precision::F32) {
    for (std::size_t i = 0; i < in.size(); ++i) {
      const float v = static_cast<float>(in[i]);
      out[i] = 0.5f * v * (1.0f + std::erf(v / std::sqrt(2.0f)));
    }
  } else {
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double v = in[i];
      out[i] = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    }
  }
  return y;
}

void add_inplace(Tensor& a, const Tensor& b) {
  SHIFTPAR_CHECK(a.shape() == b.shape(), "add_inplace: shape mismatch " +
                                             shape_string(a.shape()) + " vs " +
                                             shape_string(b.shape()));
  require_same_precision(a, b, "add_inplace");
  auto out = a.data();
  const auto in = b.data();
  if (a.precision() == Precision::F32) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = static_cast<float>(out[i]) + static_cast<float>(in[i]);
    }
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += in[i];
  }
}

Tensor attend_rows(const Tensor& q, std::size_t first_position,
                   std::span<const double> keys,
                   std::span<const double> values, std::size_t head_dim,
                   FlopCounter* counter) {
  require_matrix(q, "attend_rows");
  SHIFTPAR_CHECK(q.cols() == head_dim, "attend_rows: query width != head_dim");
  const std::size_t needed = (first_position + q.rows()) * head_dim;
  SHIFTPAR_CHECK(keys.size() >= needed && values.size() >= needed,
                 "attend_rows: key/value window shorter than last query");
  Tensor out({q.rows(), head_dim}, q.precision());
  if (q.precision() == Precision::F32) {
    attend_kernel<float>(q, first_position, keys, values, head_dim, out);
  } else {
    attend_kernel<double>(q, first_position, keys, values, head_dim, out);
  }
  if (counter) {
    for (std::size_t i = 0; i < q.rows(); ++i) {
      counter->flops += 4ull * head_dim * (first_position + i + 1);
    }
  }
  return out;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        FlopCounter* counter) {
  require_matrix(q, "causal_attention");
  SHIFTPAR_CHECK(q.shape() == k.shape() && q.shape() == v.shape(),
                 "causal_attention: q, k, v shapes differ");
  require_same_precision(q, k, "causal_attention");
  require_same_precision(q, v, "causal_attention");
  return attend_rows(q, 0, k.data(), v.data(), q.cols(), counter);
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  SHIFTPAR_CHECK(a.rank() >= 1 && begin <= end && end <= a.dim(0),
                 "slice_rows: range out of bounds");
  Shape shape = a.shape();
  const std::size_t width = shape_numel(shape) / std::max<std::size_t>(shape[0], 1);
  shape[0] = end - begin;
  std::vector<double> data(a.data().begin() + begin * width,
                           a.data().begin() + end * width);
  return Tensor(std::move(shape), std::move(data), a.precision());
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_matrix(a, "slice_cols");
  SHIFTPAR_CHECK(begin <= end && end <= a.cols(),
                 "slice_cols: range out of bounds");
  const std::size_t w = end - begin;
  std::vector<double> data(a.rows() * w);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    std::copy(r.begin() + begin, r.begin() + end, data.begin() + i * w);
  }
  return Tensor({a.rows(), w}, std::move(data), a.precision());
}

Tensor concat_rows(std::span<const Tensor> parts) {
  SHIFTPAR_CHECK(!parts.empty(), "concat_rows: no parts");
  Shape shape = parts[0].shape();
  SHIFTPAR_CHECK(!shape.empty(), "concat_rows: scalar parts");
  std::size_t total_rows = 0;
  for (const Tensor& p : parts) {
    SHIFTPAR_CHECK(p.rank() == shape.size() &&
                       std::equal(shape.begin() + 1, shape.end(),
                                  p.shape().begin() + 1) &&
                       p.precision() == parts[0].precision(),
                   "concat_rows: incompatible trailing shapes " +
                       shape_string(shape) + " vs " + shape_string(p.shape()));
    total_rows += p.dim(0);
  }
  shape[0] = total_rows;
  std::vector<double> data;
  data.reserve(shape_numel(shape));
  for (const Tensor& p : parts) {
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  return Tensor(std::move(shape), std::move(data), parts[0].precision());
}

Tensor concat_cols(std::span<const Tensor> parts) {
  SHIFTPAR_CHECK(!parts.empty(), "concat_cols: no parts");
  const std::size_t rows = parts[0].rows();
  std::size_t total_cols = 0;
  for (const Tensor& p : parts) {
    require_matrix(p, "concat_cols");
    SHIFTPAR_CHECK(p.rows() == rows && p.precision() == parts[0].precision(),
                   "concat_cols: row counts differ");
    total_cols += p.cols();
  }
  Tensor out({rows, total_cols}, parts[0].precision());
  for (std::size_t i = 0; i < rows; ++i) {
    auto dst = out.row(i).begin();
    for (const Tensor& p : parts) {
      const auto src = p.row(i);
      dst = std::copy(src.begin(), src.end(), dst);
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor out({a.cols(), a.rows()}, a.precision());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  }
  return out;
}

std::size_t argmax_row(const Tensor& a, std::size_t i) {
  const auto r = a.row(i);
  SHIFTPAR_CHECK(!r.empty(), "argmax_row: empty row");
  std::size_t best = 0;
  for (std::size_t j = 1; j < r.size(); ++j) {
    if (r[j] > r[best]) best = j;
  }
  return best;
}

}  // namespace shiftpar
