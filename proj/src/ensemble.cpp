#include "dee/ensemble.hpp"

#include <algorithm>
#include <cmath>

namespace dee {

std::string to_string(RoutingMode m) { return m == RoutingMode::soft ? "soft" : "hard"; }

std::string to_string(VoteWeighting w) {
  return w == VoteWeighting::distance ? "distance" : "similarity";
}

RoutingMode parse_routing_mode(const std::string& s) {
  if (s == "soft") return RoutingMode::soft;
  if (s == "hard") return RoutingMode::hard;
  throw std::invalid_argument("mode must be 'soft' or 'hard', got '" + s + "'");
}

VoteWeighting parse_vote_weighting(const std::string& s) {
  if (s == "distance") return VoteWeighting::distance;
  if (s == "similarity") return VoteWeighting::similarity;
  throw std::invalid_argument("vote_weighting must be 'distance' or 'similarity', got '" + s + "'");
}

std::size_t default_kappa(std::size_t n_classifiers) {
  if (n_classifiers >= 1024) return 32;
  if (n_classifiers >= 128) return 16;
  if (n_classifiers >= 64) return 8;
  if (n_classifiers >= 16) return 4;
  return std::max<std::size_t>(1, n_classifiers / 4);
}

void EnsembleConfig::validate() const {
  if (n_classifiers == 0) throw NumericError("n_classifiers must be positive");
  if (embed_dim == 0) throw NumericError("embed_dim must be positive");
  if (n_classes == 0) throw NumericError("n_classes must be positive");
  if (!(tanh_scale > 0.0)) throw NumericError("tanh_scale must be positive");
  soft_knn.validate(n_classifiers);
}

EnsembleState init_ensemble(const EnsembleConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.n_classifiers;
  const std::size_t m = cfg.embed_dim;
  const std::size_t k = cfg.n_classes;
  SeededRng rng(cfg.seed);

  EnsembleState state;
  state.keys = DenseMatrix(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    DenseVector key = draw_standard_normal(rng, m);
    key = l2_normalize(key);
    std::copy(key.begin(), key.end(), state.keys.row(i).begin());
  }

  // Fan-in scaling: W ~ N(0, 1/M).
  const double scale = 1.0 / std::sqrt(static_cast<double>(m));
  state.weights.reserve(n);
  state.biases.assign(n, DenseVector(k, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    DenseMatrix w(k, m);
    for (double& v : w.values()) v = rng.normal() * scale;
    state.weights.push_back(std::move(w));
  }
  return state;
}

ClassifierOutput classifier_forward(const EnsembleState& state, std::size_t n,
                                    std::span<const double> z, double tanh_scale) {
  if (n >= state.n_classifiers()) throw NumericError("classifier index out of range");
  const DenseMatrix& w = state.weights[n];
  if (z.size() != w.cols()) {
    throw NumericError("dimension mismatch: embedding " + std::to_string(z.size()) +
                       " vs classifier " + std::to_string(w.cols()));
  }
  ClassifierOutput out;
  out.logit.resize(w.rows());
  out.activation.resize(w.rows());
  for (std::size_t k = 0; k < w.rows(); ++k) {
    out.logit[k] = dot(w.row(k), z) + state.biases[n][k];
    out.activation[k] = std::tanh(out.logit[k] / tanh_scale);
  }
  return out;
}

namespace {

DenseVector vote_weights(std::span<const double> c, VoteWeighting weighting) {
  DenseVector w(c.size());
  for (std::size_t n = 0; n < c.size(); ++n) {
    w[n] = weighting == VoteWeighting::distance ? c[n] : std::max(0.0, 1.0 - c[n]);
  }
  return w;
}

DenseVector combine(std::span<const double> selection, std::span<const double> weights,
                    const std::vector<DenseVector>& activations, double denominator) {
  const std::size_t k = activations.empty() ? 0 : activations.front().size();
  DenseVector y(k, 0.0);
  for (std::size_t n = 0; n < activations.size(); ++n) {
    const double coef = selection[n] * weights[n];
    if (coef == 0.0) continue;
    for (std::size_t j = 0; j < k; ++j) y[j] += coef * activations[n][j];
  }
  for (double& v : y) v /= denominator;
  return y;
}

}  // namespace

DenseVector vote(const SoftKnnResult& knn, const std::vector<DenseVector>& activations,
                 VoteWeighting weighting) {
  if (knn.gamma.size() != activations.size() || knn.c.size() != activations.size()) {
    throw NumericError("vote: inconsistent classifier counts");
  }
  const DenseVector w = vote_weights(knn.c, weighting);
  double denom = kVoteEpsilon;
  for (double v : w) denom += v;
  return combine(knn.gamma, w, activations, denom);
}

ForwardTrace forward(const EnsembleState& state, const EnsembleConfig& cfg, std::span<const double> z) {
  if (z.size() != cfg.embed_dim) {
    throw NumericError("dimension mismatch: embedding " + std::to_string(z.size()) + " vs " +
                       std::to_string(cfg.embed_dim));
  }
  ForwardTrace t;
  t.z.assign(z.begin(), z.end());
  t.z_unit = l2_normalize(z);
  const DenseVector c = cosine_distances(t.z_unit, state.keys);
  const std::size_t n_keys = c.size();

  if (cfg.mode == RoutingMode::soft) {
    t.knn = sinkhorn_forward(c, cfg.soft_knn);
    t.selection = t.knn.gamma;
    t.vote_weights = vote_weights(c, cfg.vote_weighting);
    t.vote_denominator = kVoteEpsilon;
    for (double v : t.vote_weights) t.vote_denominator += v;
  } else {
    t.knn.c = c;
    t.knn.gamma_raw.assign(n_keys, 0.0);
    for (std::size_t i : hard_topk(c, cfg.soft_knn.kappa)) t.knn.gamma_raw[i] = 1.0;
    t.knn.gamma = t.knn.gamma_raw;
    t.selection = t.knn.gamma;
    t.vote_weights = vote_weights(c, VoteWeighting::similarity);
    t.vote_denominator = kVoteEpsilon;
    for (std::size_t n = 0; n < n_keys; ++n) {
      if (t.selection[n] > 0.0) t.vote_denominator += t.vote_weights[n];
    }
  }

  t.logits.resize(n_keys);
  t.activations.resize(n_keys);
  for (std::size_t n = 0; n < n_keys; ++n) {
    ClassifierOutput o = classifier_forward(state, n, z, cfg.tanh_scale);
    t.logits[n] = std::move(o.logit);
    t.activations[n] = std::move(o.activation);
  }
  t.prediction = combine(t.selection, t.vote_weights, t.activations, t.vote_denominator);
  return t;
}

std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw NumericError("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

std::size_t predict(const EnsembleState& state, const EnsembleConfig& cfg, std::span<const double> z) {
  return argmax(forward(state, cfg, z).prediction);
}

}  // namespace dee
