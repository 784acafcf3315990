#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dee {

struct GradcheckOptions {
  std::size_t instances = 20;
  std::uint64_t seed = 0;
  double step = 1e-5;
  /// The soft-kNN suite uses min(step, sigma * this): with h a sizeable
  /// fraction of sigma the central-difference truncation error alone is ~1e-4.
  double soft_knn_step_per_sigma = 2e-3;
  std::size_t iterations = 400;
  std::vector<double> sigmas = {0.0005, 0.01};
  double classifier_tolerance = 1e-4;
  double key_tolerance = 1e-3;
  double soft_knn_tolerance = 1e-4;
  /// Test hook: perturbs every analytic gradient by 1% so the check must fail.
  bool corrupt_backward = false;
};

struct GradcheckCase {
  std::string suite;  // "soft_knn", "classifier" or "keys"
  std::string description;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool skipped = false;
  std::string note;

  bool passed() const { return skipped || max_rel_error < tolerance; }
};

struct GradcheckSummary {
  std::vector<GradcheckCase> cases;

  bool passed() const;
  double worst(const std::string& suite) const;
  std::size_t checked(const std::string& suite) const;
};

/// max_i |a_i - f_i| / max_i max(|a_i|, |f_i|): the largest entrywise error
/// relative to the gradient's scale. Entries far below the scale sit under
/// the finite-difference resolution and cannot be judged individually.
/// Returns 0 when both gradients vanish (scale < 1e-12).
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric);

/// Central finite differences against the analytic backward passes of the
/// soft-kNN operator and the full ensemble pipeline.
GradcheckSummary run_gradcheck(const GradcheckOptions& opts);

}  // namespace dee
