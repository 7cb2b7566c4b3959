#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "diffattn/error.hpp"
#include "diffattn/tensor.hpp"
#include "oracles.hpp"

using namespace diffattn;

TEST_CASE("matmul by the identity returns the other operand") {
  std::mt19937_64 rng(1);
  const Matrix m = oracle::random_matrix(3, 5, rng);
  CHECK(matmul(Matrix::identity(3), m) == m);
}

TEST_CASE("matmul of a row and a column is their dot product") {
  const Matrix a{{1.0, 2.0}};
  const Matrix b{{3.0}, {4.0}};
  const Matrix c = matmul(a, b);
  REQUIRE(c.rows() == 1);
  REQUIRE(c.cols() == 1);
  CHECK(c(0, 0) == 11.0);
}

TEST_CASE("matmul agrees with the triple-loop oracle") {
  std::mt19937_64 rng(2);
  const Matrix a = oracle::random_matrix(4, 5, rng);
  const Matrix b = oracle::random_matrix(5, 3, rng);
  const Matrix got = matmul(a, b);
  const Matrix want = oracle::naive_matmul(a, b);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got.flat()[i] == doctest::Approx(want.flat()[i]).epsilon(1e-12));
}

TEST_CASE("matmul matches the oracle on random shapes up to 64x64") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> dim(1, 64);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = dim(rng), k = dim(rng), m = dim(rng);
    const Matrix a = oracle::random_matrix(n, k, rng);
    const Matrix b = oracle::random_matrix(k, m, rng);
    const Matrix got = matmul(a, b);
    const Matrix want = oracle::naive_matmul(a, b);
    double worst = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
      const double scale = std::max(std::abs(want.flat()[i]), 1.0);
      worst = std::max(worst, std::abs(got.flat()[i] - want.flat()[i]) / scale);
    }
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("matmul dimension mismatch names both shapes") {
  const Matrix a(2, 3);
  const Matrix b(4, 2);
  try {
    (void)matmul(a, b);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("4x2") != std::string::npos);
  }
}

TEST_CASE("softmax of equal logits is uniform") {
  const Vector s = softmax(Vector{0.0, 0.0, 0.0});
  for (double x : s) CHECK(x == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax stays finite for large logits") {
  const Vector s = softmax(Vector{1000.0, 0.0});
  CHECK(std::isfinite(s[0]));
  CHECK(std::isfinite(s[1]));
  CHECK(s[0] == doctest::Approx(1.0));
  CHECK(s[1] < 1e-300);
  CHECK(s[1] >= 0.0);
}

TEST_CASE("softmax matches the direct exponential formula") {
  const Vector v{1.0, 2.0, 3.0};
  const Vector got = softmax(v);
  const Vector want = oracle::direct_softmax(v);
  CHECK(oracle::max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("softmax rejects empty input") {
  CHECK_THROWS_AS(softmax(Vector{}), DomainError);
}

TEST_CASE("softmax output sums to one on random inputs") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> len(1, 300);
  std::uniform_real_distribution<double> spread(0.1, 700.0);
  for (int trial = 0; trial < 500; ++trial) {
    const Vector v = oracle::random_vector(len(rng), rng, -1.0, 1.0);
    const double k = spread(rng);
    Vector scaled(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) scaled[i] = k * v[i];
    const Vector s = softmax(scaled);
    double total = 0.0;
    for (double x : s) {
      CHECK(x >= 0.0);
      total += x;
    }
    CHECK(std::abs(total - 1.0) <= 1e-9);
  }
}

TEST_CASE("elementwise helpers") {
  CHECK(dot(Vector{1.0, 0.0}, Vector{0.0, 1.0}) == 0.0);
  CHECK(l2_norm_sq(Vector{3.0, 4.0}) == 25.0);
  CHECK(hadamard(Vector{1.0, 2.0}, Vector{3.0, 4.0}) == Vector{3.0, 8.0});
  CHECK(add(Vector{1.0, 2.0}, Vector{3.0, 4.0}) == Vector{4.0, 6.0});
  CHECK(sub(Vector{1.0, 2.0}, Vector{3.0, 5.0}) == Vector{-2.0, -3.0});
  CHECK(scale(Vector{1.0, -2.0}, 3.0) == Vector{3.0, -6.0});
  const Vector t = tanh_elem(Vector{0.0, 1.0});
  CHECK(t[0] == 0.0);
  CHECK(t[1] == std::tanh(1.0));
}

TEST_CASE("binary helpers reject length mismatch") {
  const Vector a{1.0, 2.0};
  const Vector b{1.0};
  CHECK_THROWS_AS(dot(a, b), ShapeError);
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(sub(a, b), ShapeError);
  CHECK_THROWS_AS(hadamard(a, b), ShapeError);
}

TEST_CASE("squared norm is exactly the self dot product") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const Vector v = oracle::random_vector(1 + trial % 50, rng, -10.0, 10.0);
    CHECK(l2_norm_sq(v) == dot(v, v));
  }
}

TEST_CASE("vecmat equals a one-row matmul") {
  std::mt19937_64 rng(6);
  const Vector v = oracle::random_vector(7, rng);
  const Matrix m = oracle::random_matrix(7, 4, rng);
  const Matrix want = oracle::naive_matmul(Matrix(1, 7, v), m);
  const Vector got = vecmat(v, m);
  CHECK(oracle::max_abs_diff(got, want.data()) < 1e-12);
}
