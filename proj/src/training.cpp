#include "dee/training.hpp"

#include <cmath>
#include <string>

#include "dee/parallel.hpp"

namespace dee {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw NumericError("learning_rate must be positive");
  if (!(weight_decay >= 0.0 && weight_decay < 1.0)) throw NumericError("weight_decay must lie in [0, 1)");
  if (!(key_lr > 0.0)) throw NumericError("key_lr must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw NumericError("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw NumericError("adam_eps must be positive");
  if (batch_size == 0) throw NumericError("batch_size must be positive");
}

DenseVector one_hot(std::size_t label, std::size_t n_classes) {
  if (label >= n_classes) throw NumericError("label " + std::to_string(label) + " out of range");
  DenseVector y(n_classes, 0.0);
  y[label] = 1.0;
  return y;
}

double loss(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size()) throw NumericError("loss: size mismatch");
  std::size_t ones = 0;
  for (double v : y) {
    if (v == 1.0) {
      ++ones;
    } else if (v != 0.0) {
      throw NumericError("label is not one-hot");
    }
  }
  if (ones != 1) throw NumericError("label is not one-hot");
  return -dot(y, y_hat);
}

GradientSet backward(const ForwardTrace& trace, const EnsembleState& state, const EnsembleConfig& cfg,
                     std::size_t label, bool with_keys) {
  const std::size_t n_keys = state.n_classifiers();
  if (trace.activations.size() != n_keys || trace.selection.size() != n_keys ||
      trace.z.size() != state.keys.cols()) {
    throw NumericError("backward: trace does not match ensemble state");
  }
  if (label >= cfg.n_classes) throw NumericError("label " + std::to_string(label) + " out of range");
  if (with_keys && cfg.mode != RoutingMode::soft) {
    throw NumericError("key gradients require soft routing");
  }

  const double denom = trace.vote_denominator;
  const std::size_t m = trace.z.size();
  GradientSet grads;

  // L = -yhat_y; only row `label` of each classifier receives gradient.
  for (std::size_t n = 0; n < n_keys; ++n) {
    if (!(trace.selection[n] > 0.0)) continue;
    const double a = trace.activations[n][label];
    const double coef = trace.selection[n] * trace.vote_weights[n] / denom;
    const double d_logit = -coef * (1.0 - a * a) / cfg.tanh_scale;
    ClassifierGradient g{DenseMatrix(cfg.n_classes, m), DenseVector(cfg.n_classes, 0.0)};
    auto row = g.weight.row(label);
    for (std::size_t i = 0; i < m; ++i) row[i] = d_logit * trace.z[i];
    g.bias[label] = d_logit;
    grads.classifiers.emplace(n, std::move(g));
  }

  if (!with_keys) return grads;

  const double y_label = trace.prediction[label];
  DenseVector d_gamma(n_keys);
  DenseVector d_c(n_keys);
  for (std::size_t n = 0; n < n_keys; ++n) {
    const double a = trace.activations[n][label];
    d_gamma[n] = -trace.vote_weights[n] * a / denom;
    const double d_w = -(trace.selection[n] * a - y_label) / denom;
    double dw_dc = 1.0;
    if (cfg.vote_weighting == VoteWeighting::similarity) dw_dc = (1.0 - trace.knn.c[n] > 0.0) ? -1.0 : 0.0;
    d_c[n] = d_w * dw_dc;
  }
  if (!trace.knn.tape.empty()) {
    const DenseVector via_gamma = sinkhorn_backward(trace.knn, d_gamma);
    for (std::size_t n = 0; n < n_keys; ++n) d_c[n] += via_gamma[n];
  }

  // c_n = 1 - cos(z_unit, k_n)
  grads.keys = DenseMatrix(n_keys, m);
  for (std::size_t n = 0; n < n_keys; ++n) {
    const auto key = state.keys.row(n);
    const double kn = norm2(key);
    const double cosv = 1.0 - trace.knn.c[n];
    auto out = grads.keys.row(n);
    for (std::size_t i = 0; i < m; ++i) {
      const double d_cos = trace.z_unit[i] / kn - cosv * key[i] / (kn * kn);
      out[i] = -d_c[n] * d_cos;
    }
  }
  return grads;
}

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

void sign_step(EnsembleState& state, const GradientSet& grads, const TrainConfig& cfg) {
  const double lr = cfg.learning_rate;
  const double wd = cfg.weight_decay;
  for (const auto& [n, g] : grads.classifiers) {
    auto w = state.weights[n].values();
    const auto gw = g.weight.values();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = w[i] - lr * sign(gw[i]) - wd * w[i];
    DenseVector& b = state.biases[n];
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = b[i] - lr * sign(g.bias[i]) - wd * b[i];
  }
}

void adam_key_step(EnsembleState& state, const GradientSet& grads, AdamState& adam, const TrainConfig& cfg) {
  if (!grads.has_keys()) throw NumericError("adam_key_step: no key gradients");
  DenseMatrix& keys = state.keys;
  if (grads.keys.rows() != keys.rows() || grads.keys.cols() != keys.cols()) {
    throw NumericError("adam_key_step: gradient shape mismatch");
  }
  if (adam.m.empty()) {
    adam.m = DenseMatrix(keys.rows(), keys.cols());
    adam.v = DenseMatrix(keys.rows(), keys.cols());
  }
  ++adam.step;
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(adam.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(adam.step));

  auto k = keys.values();
  auto m = adam.m.values();
  auto v = adam.v.values();
  const auto g = grads.keys.values();
  for (std::size_t i = 0; i < k.size(); ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    k[i] -= cfg.key_lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
  }
  for (std::size_t n = 0; n < keys.rows(); ++n) {
    const DenseVector unit = l2_normalize(keys.row(n));
    std::copy(unit.begin(), unit.end(), keys.row(n).begin());
  }
}

double train_batch(EnsembleState& state, AdamState& adam, std::span<const Example> batch,
                   const EnsembleConfig& ecfg, const TrainConfig& tcfg) {
  if (batch.empty()) throw NumericError("train_batch: empty batch");
  const bool with_keys = tcfg.train_keys;

  std::vector<GradientSet> per_example(batch.size());
  std::vector<double> losses(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    const Example& ex = batch[i];
    if (ex.label >= ecfg.n_classes) throw NumericError("label " + std::to_string(ex.label) + " out of range");
    const ForwardTrace trace = forward(state, ecfg, ex.z);
    losses[i] = -trace.prediction[ex.label];
    per_example[i] = backward(trace, state, ecfg, ex.label, with_keys);
  });

  // Fixed-order reduction keeps runs bit-reproducible regardless of threading.
  const double inv = 1.0 / static_cast<double>(batch.size());
  GradientSet total;
  if (with_keys) total.keys = DenseMatrix(state.keys.rows(), state.keys.cols());
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    loss_sum += losses[i];
    for (auto& [n, g] : per_example[i].classifiers) {
      auto it = total.classifiers.find(n);
      if (it == total.classifiers.end()) {
        total.classifiers.emplace(n, std::move(g));
        continue;
      }
      auto dst = it->second.weight.values();
      const auto src = g.weight.values();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
      for (std::size_t j = 0; j < g.bias.size(); ++j) it->second.bias[j] += g.bias[j];
    }
    if (with_keys) {
      auto dst = total.keys.values();
      const auto src = per_example[i].keys.values();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }
  for (auto& [n, g] : total.classifiers) {
    for (double& v : g.weight.values()) v *= inv;
    for (double& v : g.bias) v *= inv;
  }
  if (with_keys) {
    for (double& v : total.keys.values()) v *= inv;
  }

  sign_step(state, total, tcfg);
  if (with_keys) adam_key_step(state, total, adam, tcfg);
  return loss_sum * inv;
}

}  // namespace dee
