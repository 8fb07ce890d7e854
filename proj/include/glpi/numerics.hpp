#pragma once

// Small dense kernels shared by the model, trainer and analysis code.
// Everything is 64-bit and single-threaded; every reduction accumulates in
// ascending index order so a given input always produces the same bits.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace glpi {

// Error taxonomy. The CLI maps these onto exit codes.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : DataError {
  using DataError::DataError;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Raised when a correlation is requested for a zero-variance series.
struct DegenerateCorrelation : NumericError {
  using NumericError::NumericError;
};

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Matrix: data size does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  void resize(std::size_t rows, std::size_t cols) {
    rows_ = rows;
    cols_ = cols;
    data_.assign(rows * cols, 0.0);
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": size mismatch (" + std::to_string(a) + " vs " +
                     std::to_string(b) + ")");
  }
}

// C = A * B (or C += A * B). ikj order: every C(i,j) sums over p ascending.
inline void gemm(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false) {
  require_same_size(a.cols(), b.rows(), "gemm inner");
  if (!accumulate) c.resize(a.rows(), b.cols());
  require_same_size(c.rows(), a.rows(), "gemm rows");
  require_same_size(c.cols(), b.cols(), "gemm cols");
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* __restrict crow = c.data() + i * n;
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const double aip = a(i, p);
      const double* __restrict brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// C = A^T * B (or C += A^T * B), A stored k x m. Same ascending-p order.
inline void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false) {
  require_same_size(a.rows(), b.rows(), "gemm_tn inner");
  if (!accumulate) c.resize(a.cols(), b.cols());
  require_same_size(c.rows(), a.cols(), "gemm_tn rows");
  require_same_size(c.cols(), b.cols(), "gemm_tn cols");
  const std::size_t n = b.cols();
  for (std::size_t p = 0; p < a.rows(); ++p) {
    const double* __restrict brow = b.data() + p * n;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double api = a(p, i);
      double* __restrict crow = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

// y = W x for W (out x in), summed over the input index ascending.
inline Vector matvec(const Matrix& w, std::span<const double> x) {
  require_same_size(w.cols(), x.size(), "matvec");
  Vector y(w.rows(), 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const double* row = w.data() + i * w.cols();
    double acc = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
  return y;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size(), "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  require_same_size(x.size(), y.size(), "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline Vector softmax(std::span<const double> v) {
  if (v.empty()) throw ShapeError("softmax: empty input");
  if (!all_finite(v)) throw NumericError("softmax: non-finite entry");
  const double mx = *std::max_element(v.begin(), v.end());
  Vector out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

inline double logsumexp(std::span<const double> v) {
  if (v.empty()) throw ShapeError("logsumexp: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - mx);
  return mx + std::log(sum);
}

inline Vector log_softmax(std::span<const double> v) {
  const double lse = logsumexp(v);
  Vector out(v.begin(), v.end());
  for (double& x : out) x -= lse;
  return out;
}

// Indices of the k largest entries, descending by value, ties by ascending index.
inline std::vector<std::size_t> topk_indices(std::span<const double> v, std::size_t k) {
  if (k < 1 || k > v.size()) {
    throw UsageError("topk_indices: k=" + std::to_string(k) + " out of range for length " +
                     std::to_string(v.size()));
  }
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) {
    if (v[a] != v[b]) return v[a] > v[b];
    return a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
  idx.resize(k);
  return idx;
}

inline double mean(std::span<const double> v) {
  if (v.empty()) throw ShapeError("mean: empty input");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Population variance (divide by n).
inline double variance(std::span<const double> v) {
  const double mu = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return s / static_cast<double>(v.size());
}

inline double pearson_corr(std::span<const double> a, std::span<const double> b) {
  require_same_size(a.size(), b.size(), "pearson_corr");
  if (a.size() < 2) throw ShapeError("pearson_corr: need at least 2 samples");
  const double ma = mean(a);
  const double mb = mean(b);
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) {
    throw DegenerateCorrelation("pearson_corr: constant series has zero variance");
  }
  // The 1/L factors of the covariance and the two variances cancel.
  const double r = cov / std::sqrt(va * vb);
  return std::clamp(r, -1.0, 1.0);
}

// Number of members of a top-`fraction` subset of n items. The small epsilon
// absorbs binary rounding such as 0.07 * 100 == 7.000000000000001.
inline std::size_t fraction_count(double fraction, std::size_t n) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw UsageError("fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
  const double raw = fraction * static_cast<double>(n);
  auto c = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::min(std::max<std::size_t>(c, n == 0 ? 0 : 1), n);
}

}  // namespace glpi
