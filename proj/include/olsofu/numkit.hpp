// include/olsofu/numkit.hpp
//
// Deterministic numerical primitives: dense vectors/matrices sized for
// K <= 64, simplex projection, LU solves with a condition check, singular
// values, softmax and a seedable generator. Everything else builds on these.

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace olsofu {

using Vector = std::vector<double>;

// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  // Appends one row; the matrix must be empty or have matching width.
  void append_row(std::span<const double> values);
  void clear_rows() { data_.clear(); rows_ = 0; }

  Matrix transpose() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Vector matvec(const Matrix& a, std::span<const double> x);
Matrix matmul(const Matrix& a, const Matrix& b);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);
double l1_distance(std::span<const double> a, std::span<const double> b);
double linf_distance(std::span<const double> a, std::span<const double> b);
bool all_finite(std::span<const double> v);

// A probability vector: entries >= 0 summing to one within 1e-9. The
// constructor validates, so holding one is proof of the invariant.
class SimplexVector {
 public:
  static constexpr double kSumTolerance = 1e-9;

  explicit SimplexVector(Vector values);

  static SimplexVector uniform(std::size_t k);
  static SimplexVector one_hot(std::size_t k, std::size_t index);
  // Convex combination a*x + (1-a)*y.
  static SimplexVector mix(double a, const SimplexVector& x, const SimplexVector& y);

  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  const Vector& values() const { return values_; }
  std::span<const double> span() const { return values_; }

  friend bool operator==(const SimplexVector&, const SimplexVector&) = default;

 private:
  Vector values_;
};

bool is_on_simplex(std::span<const double> v, double tol = SimplexVector::kSumTolerance);

// Euclidean projection onto the probability simplex (sort-and-threshold).
// Inputs already on the simplex (to rounding) are returned unchanged, which
// makes the projection idempotent bit-for-bit.
SimplexVector project_simplex(std::span<const double> v);

// Largest tolerated 1-norm condition number before solve_linear refuses.
inline constexpr double kMaxConditionNumber = 1e10;

// Solves A x = b by LU with partial pivoting plus one refinement sweep.
// Throws SingularMatrix (carrying the estimated condition number) when A is
// singular or cond_1(A) exceeds kMaxConditionNumber.
Vector solve_linear(const Matrix& a, std::span<const double> b);

// 1-norm condition number ||A||_1 ||A^-1||_1; infinity when singular.
double condition_number(const Matrix& a);

// All singular values (descending) by one-sided Jacobi rotations. Values
// below 1e-14 * sigma_max are reported as exactly zero.
Vector singular_values(const Matrix& a);
double min_singular_value(const Matrix& a);

// Numerically stable softmax of z / temperature.
Vector softmax(std::span<const double> z, double temperature = 1.0);

// Index of the largest entry, ties broken toward the lowest index.
std::size_t argmax(std::span<const double> v);

// splitmix64 mixing; used to derive independent stream seeds.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

// Seedable 64-bit generator (xoshiro256**) with hand-written distributions
// so that streams do not depend on the standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t uniform_index(std::size_t n);
  bool bernoulli(double p);
  // Draws an index with the given (nonnegative, not necessarily normalized) weights.
  std::size_t categorical(std::span<const double> weights);

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t s_[4];
};

}  // namespace olsofu
