#include "dee/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dee {

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows_ * cols_) {
    throw NumericError("matrix shape " + std::to_string(rows_) + "x" + std::to_string(cols_) +
                       " does not match " + std::to_string(values_.size()) + " values");
  }
}

double SeededRng::uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw NumericError("dimension mismatch: " + std::to_string(a.size()) + " vs " +
                       std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double ab = dot(a, b);
  const double na = norm2(a);
  const double nb = norm2(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("degenerate vector");
  return std::clamp(ab / (na * nb), -1.0, 1.0);
}

DenseVector l2_normalize(std::span<const double> a) {
  const double n = norm2(a);
  if (!(n > 0.0)) throw NumericError("degenerate vector");
  DenseVector out(a.begin(), a.end());
  for (double& v : out) v /= n;
  return out;
}

DenseVector draw_standard_normal(SeededRng& rng, std::size_t n) {
  DenseVector out(n);
  for (double& v : out) v = rng.normal();
  return out;
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) throw NumericError("log_sum_exp of empty sequence");
  const double m = *std::max_element(values.begin(), values.end());
  if (m == -std::numeric_limits<double>::infinity()) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace dee
