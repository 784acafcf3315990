#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dee/numerics.hpp"
#include "dee/soft_knn.hpp"

namespace dee {

enum class RoutingMode { soft, hard };
enum class VoteWeighting { distance, similarity };

std::string to_string(RoutingMode m);
std::string to_string(VoteWeighting w);
RoutingMode parse_routing_mode(const std::string& s);
VoteWeighting parse_vote_weighting(const std::string& s);

/// Neighbour count used for an ensemble of the given size (16->4, 64->8,
/// 128->16, 1024->32; sizes in between take the entry of the next smaller
/// tabulated size, sizes below 16 use n/4).
std::size_t default_kappa(std::size_t n_classifiers);

struct EnsembleConfig {
  std::size_t n_classifiers = 16;
  std::size_t embed_dim = 0;
  std::size_t n_classes = 0;
  SoftKnnConfig soft_knn{};
  RoutingMode mode = RoutingMode::soft;
  VoteWeighting vote_weighting = VoteWeighting::distance;
  double tanh_scale = 250.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Keys (one unit-norm row per classifier) and the single-layer classifiers.
struct EnsembleState {
  DenseMatrix keys;                  // N x M
  std::vector<DenseMatrix> weights;  // N of K x M
  std::vector<DenseVector> biases;   // N of K

  std::size_t n_classifiers() const { return keys.rows(); }
  bool operator==(const EnsembleState&) const = default;
};

struct ForwardTrace {
  SoftKnnResult knn;
  DenseVector z;                         ///< the raw input embedding
  DenseVector z_unit;                    ///< L2-normalised copy used for key lookup
  std::vector<DenseVector> logits;       ///< per classifier, length K
  std::vector<DenseVector> activations;  ///< tanh(logit / tanh_scale)
  DenseVector selection;                 ///< gamma actually applied in the vote
  DenseVector vote_weights;              ///< w_n (distance or similarity)
  double vote_denominator = 0.0;
  DenseVector prediction;                ///< length K
};

inline constexpr double kVoteEpsilon = 1e-12;

EnsembleState init_ensemble(const EnsembleConfig& cfg);

struct ClassifierOutput {
  DenseVector logit;
  DenseVector activation;
};

ClassifierOutput classifier_forward(const EnsembleState& state, std::size_t n,
                                    std::span<const double> z, double tanh_scale);

/// sum_n gamma_n w_n yhat_n / (sum_n w_n + eps), summing w over all N.
DenseVector vote(const SoftKnnResult& knn, const std::vector<DenseVector>& activations,
                 VoteWeighting weighting);

ForwardTrace forward(const EnsembleState& state, const EnsembleConfig& cfg, std::span<const double> z);

/// Index of the largest component; ties go to the lowest index.
std::size_t argmax(std::span<const double> v);

std::size_t predict(const EnsembleState& state, const EnsembleConfig& cfg, std::span<const double> z);

}  // namespace dee
