#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dee/numerics.hpp"

namespace dee {

/// Soft top-kappa selection over N distances.
///
/// Selection is posed as entropic optimal transport from N sources with
/// uniform mass 1/N onto two targets holding kappa/N and (N-kappa)/N. The
/// cost of sending distance c to the "near" target is c^2 and to the "far"
/// target (c-1)^2. A fixed number of alternating Bregman (Sinkhorn)
/// projections is run in the log domain; no convergence test is applied.
struct SoftKnnConfig {
  std::size_t kappa = 4;
  double sigma = 0.0005;
  std::size_t iterations = 400;
  double gamma_threshold = 0.3;

  /// Throws NumericError if the config is unusable for n candidates.
  void validate(std::size_t n) const;
};

/// Log-domain scaling iterates kept for reverse-mode differentiation.
/// log_p holds iterations 1..L (L rows of N), log_q holds 0..L (L+1 rows of 2).
struct SinkhornTape {
  std::size_t n = 0;
  std::size_t iterations = 0;
  double sigma = 0.0;
  std::size_t kappa = 0;
  std::vector<double> log_p;
  std::vector<double> log_q;

  bool empty() const { return iterations == 0; }
};

struct SoftKnnResult {
  DenseVector c;          ///< cosine distances, one per key
  DenseVector gamma;      ///< selection scores after thresholding
  DenseVector gamma_raw;  ///< selection scores before thresholding
  SinkhornTape tape;      ///< empty for kappa == N and for hard selection
};

/// c_n = 1 - cos(z, key_n).
DenseVector cosine_distances(std::span<const double> z, const DenseMatrix& keys);

/// N x 2 cost matrix: column 0 = c^2, column 1 = (c - 1)^2.
DenseMatrix build_cost_matrix(std::span<const double> c);

SoftKnnResult sinkhorn_forward(std::span<const double> c, const SoftKnnConfig& cfg);

/// Gradient of dot(upstream, gamma_raw) with respect to c, masked to the
/// entries that survived the threshold.
DenseVector sinkhorn_backward(const SoftKnnResult& result, std::span<const double> upstream);

/// Indices of the kappa smallest distances in ascending index order; ties go to
/// the lower index.
std::vector<std::size_t> hard_topk(std::span<const double> c, std::size_t kappa);

}  // namespace dee
