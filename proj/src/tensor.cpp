#include "diffattn/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "diffattn/error.hpp"

namespace diffattn {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                     shape_str());
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows)
    : rows_(rows.size()), cols_(rows.size() ? rows.begin()->size() : 0) {
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("ragged matrix initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string Matrix::shape_str() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + a.shape_str() + " by " + b.shape_str());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Vector vecmat(std::span<const double> v, const Matrix& m) {
  if (v.size() != m.rows()) {
    throw ShapeError("vecmat: cannot multiply 1x" + std::to_string(v.size()) + " by " +
                     m.shape_str());
  }
  Vector out(m.cols(), 0.0);
  for (std::size_t k = 0; k < m.rows(); ++k) axpy(v[k], m.row(k), out);
  return out;
}

Vector softmax(std::span<const double> v) {
  if (v.empty()) throw DomainError("softmax: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  Vector out(v.size());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    total += out[i];
  }
  for (double& x : out) x /= total;
  return out;
}

void require_same_length(std::span<const double> a, std::span<const double> b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": length mismatch " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm_sq(std::span<const double> a) { return dot(a, a); }

Vector add(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "add");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Vector sub(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "sub");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

Vector hadamard(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "hadamard");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

Vector scale(std::span<const double> a, double k) {
  Vector out(a.begin(), a.end());
  for (double& x : out) x *= k;
  return out;
}

Vector tanh_elem(std::span<const double> a) {
  Vector out(a.size());
  std::transform(a.begin(), a.end(), out.begin(), [](double x) { return std::tanh(x); });
  return out;
}

void axpy(double k, std::span<const double> x, std::span<double> y) {
  require_same_length(x, y, "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += k * x[i];
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace diffattn
