#include "dee/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dee/ensemble.hpp"
#include "dee/numerics.hpp"
#include "dee/soft_knn.hpp"
#include "dee/training.hpp"

namespace dee {

namespace {

std::size_t draw_between(SeededRng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.engine()() % (hi - lo + 1));
}

void corrupt(std::span<double> g) {
  for (double& v : g) v *= 1.01;
}

double central_difference(double& slot, double h, const auto& f) {
  const double saved = slot;
  slot = saved + h;
  const double up = f();
  slot = saved - h;
  const double down = f();
  slot = saved;
  return (up - down) / (2.0 * h);
}

std::string describe(std::size_t n, std::size_t kappa, double sigma, std::size_t m = 0, std::size_t k = 0) {
  std::ostringstream os;
  os << "N=" << n << " kappa=" << kappa << " sigma=" << sigma;
  if (m) os << " M=" << m << " K=" << k;
  return os.str();
}

// Finite differences of an objective of order one cannot resolve gradients
// much below this (roundoff accumulated over the unrolled iterations / h).
constexpr double kResolvableScale = 1e-7;

double gradient_scale(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (double v : a) s = std::max(s, std::abs(v));
  for (double v : b) s = std::max(s, std::abs(v));
  return s;
}

void mark_unresolvable(GradcheckCase& c, double scale) {
  if (scale >= kResolvableScale) return;
  c.skipped = true;
  c.note = "gradient below finite-difference resolution";
}

// Wide draws put c in [0.2, 1.8]; with small sigma these usually saturate, so
// every other instance places all distances within a few sigma of 0.5, where
// the initial scaling leaves the selection sensitive to c.
GradcheckCase check_soft_knn(SeededRng& rng, double sigma, bool near_tie, const GradcheckOptions& opts) {
  const std::size_t n = draw_between(rng, 3, 8);
  SoftKnnConfig cfg;
  cfg.kappa = draw_between(rng, 1, n - 1);
  cfg.sigma = sigma;
  cfg.iterations = opts.iterations;

  DenseVector c(n);
  DenseVector upstream(n);
  for (double& v : c) v = near_tie ? 0.5 + sigma * rng.uniform(-8.0, 8.0) : rng.uniform(0.2, 1.8);
  for (double& v : upstream) v = rng.uniform(-1.0, 1.0);

  const SoftKnnResult base = sinkhorn_forward(c, cfg);
  DenseVector analytic = sinkhorn_backward(base, upstream);
  if (opts.corrupt_backward) corrupt(analytic);

  // The threshold mask is frozen at the base point.
  auto objective = [&] {
    const SoftKnnResult r = sinkhorn_forward(c, cfg);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (base.gamma[i] != 0.0) s += upstream[i] * r.gamma_raw[i];
    }
    return s;
  };
  DenseVector numeric(n);
  const double h = std::min(opts.step, sigma * opts.soft_knn_step_per_sigma);
  for (std::size_t i = 0; i < n; ++i) numeric[i] = central_difference(c[i], h, objective);

  GradcheckCase out;
  out.suite = "soft_knn";
  out.description = describe(n, cfg.kappa, sigma) + (near_tie ? " near-tie" : " wide");
  out.tolerance = opts.soft_knn_tolerance;
  out.max_rel_error = max_relative_error(analytic, numeric);
  mark_unresolvable(out, gradient_scale(analytic, numeric));
  return out;
}

struct PipelineInstance {
  EnsembleConfig cfg;
  EnsembleState state;
  DenseVector z;
  std::size_t label = 0;
};

bool near_kink(const PipelineInstance& inst) {
  const ForwardTrace t = forward(inst.state, inst.cfg, inst.z);
  const double thr = inst.cfg.soft_knn.gamma_threshold;
  for (std::size_t n = 0; n < t.knn.c.size(); ++n) {
    if (std::abs(t.knn.gamma_raw[n] - thr) < 0.05) return true;
    if (inst.cfg.vote_weighting == VoteWeighting::similarity && std::abs(t.knn.c[n] - 1.0) < 1e-3) return true;
  }
  return false;
}

PipelineInstance draw_instance(SeededRng& rng, double sigma, std::size_t iterations, std::size_t index) {
  for (;;) {
    PipelineInstance inst;
    EnsembleConfig& cfg = inst.cfg;
    cfg.n_classifiers = draw_between(rng, 3, 8);
    cfg.embed_dim = draw_between(rng, 2, 16);
    cfg.n_classes = draw_between(rng, 2, 4);
    cfg.soft_knn.kappa = draw_between(rng, 1, cfg.n_classifiers - 1);
    cfg.soft_knn.sigma = sigma;
    cfg.soft_knn.iterations = iterations;
    cfg.vote_weighting = index % 2 == 0 ? VoteWeighting::distance : VoteWeighting::similarity;
    cfg.seed = rng.engine()();
    inst.state = init_ensemble(cfg);
    // Large weights push tanh out of its linear regime so the check sees curvature.
    for (auto& w : inst.state.weights) {
      for (double& v : w.values()) v = 50.0 * rng.normal();
    }
    for (auto& b : inst.state.biases) {
      for (double& v : b) v = 20.0 * rng.normal();
    }
    inst.z = draw_standard_normal(rng, cfg.embed_dim);
    inst.label = draw_between(rng, 0, cfg.n_classes - 1);
    if (!near_kink(inst)) return inst;
  }
}

double pipeline_loss(const PipelineInstance& inst) {
  return -forward(inst.state, inst.cfg, inst.z).prediction[inst.label];
}

std::pair<GradcheckCase, GradcheckCase> check_pipeline(SeededRng& rng, double sigma, std::size_t index,
                                                       const GradcheckOptions& opts) {
  PipelineInstance inst = draw_instance(rng, sigma, opts.iterations, index);
  const ForwardTrace trace = forward(inst.state, inst.cfg, inst.z);
  GradientSet grads = backward(trace, inst.state, inst.cfg, inst.label, true);

  auto objective = [&] { return pipeline_loss(inst); };
  const std::string desc = describe(inst.cfg.n_classifiers, inst.cfg.soft_knn.kappa, sigma, inst.cfg.embed_dim,
                                    inst.cfg.n_classes) +
                           " vote=" + to_string(inst.cfg.vote_weighting);

  // Classifier parameters: masked-out classifiers must have exactly zero
  // numeric gradient, masked-in ones are compared entrywise.
  DenseVector analytic;
  DenseVector numeric;
  for (std::size_t n = 0; n < inst.cfg.n_classifiers; ++n) {
    const auto it = grads.classifiers.find(n);
    auto w = inst.state.weights[n].values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      analytic.push_back(it == grads.classifiers.end() ? 0.0 : it->second.weight.values()[i]);
      numeric.push_back(central_difference(w[i], opts.step, objective));
    }
    DenseVector& b = inst.state.biases[n];
    for (std::size_t i = 0; i < b.size(); ++i) {
      analytic.push_back(it == grads.classifiers.end() ? 0.0 : it->second.bias[i]);
      numeric.push_back(central_difference(b[i], opts.step, objective));
    }
  }
  if (opts.corrupt_backward) corrupt(analytic);
  GradcheckCase classifier;
  classifier.suite = "classifier";
  classifier.description = desc;
  classifier.tolerance = opts.classifier_tolerance;
  classifier.max_rel_error = max_relative_error(analytic, numeric);
  mark_unresolvable(classifier, gradient_scale(analytic, numeric));

  DenseVector key_analytic(grads.keys.values().begin(), grads.keys.values().end());
  if (opts.corrupt_backward) corrupt(key_analytic);
  DenseVector key_numeric;
  for (double& v : inst.state.keys.values()) key_numeric.push_back(central_difference(v, opts.step, objective));
  GradcheckCase keys;
  keys.suite = "keys";
  keys.description = desc;
  keys.tolerance = opts.key_tolerance;
  keys.max_rel_error = max_relative_error(key_analytic, key_numeric);
  mark_unresolvable(keys, gradient_scale(key_analytic, key_numeric));
  return {classifier, keys};
}

}  // namespace

bool GradcheckSummary::passed() const {
  return std::all_of(cases.begin(), cases.end(), [](const GradcheckCase& c) { return c.passed(); });
}

double GradcheckSummary::worst(const std::string& suite) const {
  double w = 0.0;
  for (const auto& c : cases) {
    if (c.suite == suite && !c.skipped) w = std::max(w, c.max_rel_error);
  }
  return w;
}

std::size_t GradcheckSummary::checked(const std::string& suite) const {
  return static_cast<std::size_t>(std::count_if(
      cases.begin(), cases.end(), [&](const GradcheckCase& c) { return c.suite == suite && !c.skipped; }));
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  if (analytic.size() != numeric.size()) throw NumericError("gradient size mismatch");
  double diff = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  if (scale < 1e-12) return 0.0;
  return diff / scale;
}

GradcheckSummary run_gradcheck(const GradcheckOptions& opts) {
  GradcheckSummary summary;
  SeededRng rng(opts.seed);
  // Unresolvable draws are kept in the summary as skipped and replaced, up to
  // a bounded number of attempts, so each suite gets `instances` real checks.
  const std::size_t max_attempts = 50 * std::max<std::size_t>(opts.instances, 1);
  for (double sigma : opts.sigmas) {
    std::size_t resolved = 0;
    for (std::size_t attempt = 0; resolved < opts.instances && attempt < max_attempts; ++attempt) {
      GradcheckCase c = check_soft_knn(rng, sigma, attempt % 2 == 1, opts);
      resolved += c.skipped ? 0 : 1;
      summary.cases.push_back(std::move(c));
    }
    std::size_t classifier_done = 0;
    std::size_t keys_done = 0;
    for (std::size_t attempt = 0;
         (classifier_done < opts.instances || keys_done < opts.instances) && attempt < max_attempts; ++attempt) {
      auto [classifier, keys] = check_pipeline(rng, sigma, attempt, opts);
      classifier_done += classifier.skipped ? 0 : 1;
      keys_done += keys.skipped ? 0 : 1;
      summary.cases.push_back(std::move(classifier));
      summary.cases.push_back(std::move(keys));
    }
  }
  GradcheckCase full;
  full.suite = "soft_knn";
  full.description = "kappa == N";
  full.skipped = true;
  full.note = "selection is the constant all-ones vector; there is no transport plan to differentiate";
  summary.cases.push_back(std::move(full));
  return summary;
}

}  // namespace dee
