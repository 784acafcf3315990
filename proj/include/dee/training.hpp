#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "dee/ensemble.hpp"
#include "dee/numerics.hpp"

namespace dee {

struct TrainConfig {
  double learning_rate = 0.0001;  ///< sign-step size
  double weight_decay = 0.0001;
  bool train_keys = false;
  double key_lr = 0.0005;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 60;

  void validate() const;
};

struct ClassifierGradient {
  DenseMatrix weight;  // K x M
  DenseVector bias;    // K
};

/// Gradients for the classifiers selected by at least one example (the
/// update mask) and, when key training is on, for every key.
struct GradientSet {
  std::map<std::size_t, ClassifierGradient> classifiers;
  DenseMatrix keys;  // N x M, empty unless keys are trained

  bool has_keys() const { return !keys.empty(); }
};

struct AdamState {
  DenseMatrix m;
  DenseMatrix v;
  std::uint64_t step = 0;
};

/// A labelled embedding viewed in place.
struct Example {
  std::span<const double> z;
  std::size_t label;
};

DenseVector one_hot(std::size_t label, std::size_t n_classes);

/// -y . y_hat; y must be one-hot.
double loss(std::span<const double> y, std::span<const double> y_hat);

GradientSet backward(const ForwardTrace& trace, const EnsembleState& state, const EnsembleConfig& cfg,
                     std::size_t label, bool with_keys);

/// theta <- theta - lr * sign(g) - wd * theta on every classifier present in grads.
void sign_step(EnsembleState& state, const GradientSet& grads, const TrainConfig& cfg);

/// Adam on the keys followed by re-projection of each key to unit norm.
void adam_key_step(EnsembleState& state, const GradientSet& grads, AdamState& adam, const TrainConfig& cfg);

/// One online update from a batch. Returns the mean loss before the update.
double train_batch(EnsembleState& state, AdamState& adam, std::span<const Example> batch,
                   const EnsembleConfig& ecfg, const TrainConfig& tcfg);

}  // namespace dee
