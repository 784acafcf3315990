#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dee {

/// Raised when an input violates a numeric precondition (zero norm, size mismatch, ...).
class NumericError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using DenseVector = std::vector<double>;

/// Row-major dense matrix. Small enough for everything in this library,
/// so no expression templates or BLAS.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return values_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  bool operator==(const DenseMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

/// Seeded pseudo-random source. Identical seeds give identical streams
/// within one build; the object is single-owner.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  double normal() { return normal_(engine_); }
  double uniform(double lo, double hi);
  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
bool all_finite(std::span<const double> a);

/// a.b / (|a||b|), clamped to [-1, 1].
double cosine_similarity(std::span<const double> a, std::span<const double> b);

DenseVector l2_normalize(std::span<const double> a);

DenseVector draw_standard_normal(SeededRng& rng, std::size_t n);

/// log(sum(exp(v))) with max-shift.
double log_sum_exp(std::span<const double> values);

}  // namespace dee
