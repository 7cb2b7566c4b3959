#pragma once

// Dense row-major float64 numerics shared by every module.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace diffattn {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> flat() noexcept { return data_; }
  std::span<const double> flat() const noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  void fill(double v);

  std::string shape_str() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);

// Row vector times matrix: (1 x m.rows) * m -> length m.cols.
Vector vecmat(std::span<const double> v, const Matrix& m);

// Max-subtracted softmax.
Vector softmax(std::span<const double> v);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm_sq(std::span<const double> a);

Vector add(std::span<const double> a, std::span<const double> b);
Vector sub(std::span<const double> a, std::span<const double> b);
Vector hadamard(std::span<const double> a, std::span<const double> b);
Vector scale(std::span<const double> a, double k);
Vector tanh_elem(std::span<const double> a);

// y += k * x
void axpy(double k, std::span<const double> x, std::span<double> y);

bool all_finite(std::span<const double> v);

void require_same_length(std::span<const double> a, std::span<const double> b, const char* op);

}  // namespace diffattn
