#include <doctest.h>

#include <cmath>

#include "dee/ensemble.hpp"

using namespace dee;

namespace {

EnsembleConfig small_config(std::size_t n = 6, std::size_t m = 8, std::size_t k = 3, std::size_t kappa = 2) {
  EnsembleConfig cfg;
  cfg.n_classifiers = n;
  cfg.embed_dim = m;
  cfg.n_classes = k;
  cfg.soft_knn.kappa = kappa;
  cfg.seed = 9;
  return cfg;
}

SoftKnnResult knn_of(DenseVector c, DenseVector gamma) {
  SoftKnnResult r;
  r.c = std::move(c);
  r.gamma = std::move(gamma);
  r.gamma_raw = r.gamma;
  return r;
}

}  // namespace

TEST_CASE("default_kappa follows the tabulated sizes") {
  CHECK(default_kappa(16) == 4);
  CHECK(default_kappa(64) == 8);
  CHECK(default_kappa(128) == 16);
  CHECK(default_kappa(1024) == 32);
  CHECK(default_kappa(4) == 1);
  CHECK(default_kappa(1) == 1);
  CHECK(default_kappa(100) == 8);
}

TEST_CASE("init_ensemble") {
  SUBCASE("unit keys") {
    const EnsembleState s = init_ensemble(small_config(20, 13, 4, 3));
    for (std::size_t n = 0; n < 20; ++n) CHECK(std::abs(norm2(s.keys.row(n)) - 1.0) < 1e-9);
    for (const auto& b : s.biases) CHECK(b == DenseVector(4, 0.0));
  }
  SUBCASE("fan-in scaling at M=512") {
    EnsembleConfig cfg = small_config(2, 512, 10, 1);
    const EnsembleState s = init_ensemble(cfg);
    const auto w = s.weights[0].values();
    double mean = 0;
    for (double v : w) mean += v;
    mean /= static_cast<double>(w.size());
    double var = 0;
    for (double v : w) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(w.size()));
    CHECK(std::abs(sd - 1 / std::sqrt(512.0)) < 0.1 / std::sqrt(512.0));
  }
  SUBCASE("determinism") {
    CHECK(init_ensemble(small_config()) == init_ensemble(small_config()));
    EnsembleConfig other = small_config();
    other.seed = 10;
    CHECK_FALSE(init_ensemble(small_config()) == init_ensemble(other));
  }
  SUBCASE("invalid configs") {
    EnsembleConfig cfg = small_config();
    cfg.soft_knn.kappa = 7;
    CHECK_THROWS_AS(init_ensemble(cfg), NumericError);
    cfg = small_config();
    cfg.tanh_scale = 0;
    CHECK_THROWS_AS(init_ensemble(cfg), NumericError);
  }
}

TEST_CASE("classifier_forward examples") {
  EnsembleState s = init_ensemble(small_config(2, 3, 2, 1));
  for (auto& w : s.weights) std::fill(w.values().begin(), w.values().end(), 0.0);
  const DenseVector z{0.3, -1.2, 4.0};
  CHECK(classifier_forward(s, 0, z, 250).activation == DenseVector{0, 0});

  // Logit equal to the scale gives tanh(1).
  s.biases[1] = {250.0, -250.0};
  const ClassifierOutput o = classifier_forward(s, 1, z, 250);
  CHECK(o.logit == DenseVector{250.0, -250.0});
  CHECK(o.activation[0] == doctest::Approx(0.76159415595576489).epsilon(1e-15));
  CHECK(o.activation[1] == doctest::Approx(-0.76159415595576489).epsilon(1e-15));

  CHECK_THROWS_AS(classifier_forward(s, 2, z, 250), NumericError);
  CHECK_THROWS_AS(classifier_forward(s, 0, DenseVector{1, 2}, 250), NumericError);
}

TEST_CASE("activations stay inside (-1, 1)") {
  EnsembleConfig cfg = small_config();
  EnsembleState s = init_ensemble(cfg);
  SeededRng rng(2);
  for (auto& w : s.weights) {
    for (double& v : w.values()) v = 30 * rng.normal();
  }
  for (int t = 0; t < 50; ++t) {
    const ForwardTrace tr = forward(s, cfg, draw_standard_normal(rng, cfg.embed_dim));
    for (const auto& a : tr.activations) {
      for (double v : a) {
        CHECK(v > -1.0);
        CHECK(v < 1.0);
      }
    }
    CHECK(all_finite(tr.prediction));
  }
}

TEST_CASE("vote examples") {
  SUBCASE("single classifier: the weight cancels") {
    const DenseVector y = vote(knn_of({0.4}, {1.0}), {{0.3, -0.2}}, VoteWeighting::distance);
    CHECK(y[0] == doctest::Approx(0.3).epsilon(1e-11));
    CHECK(y[1] == doctest::Approx(-0.2).epsilon(1e-11));
  }
  SUBCASE("full suppression") {
    const DenseVector y = vote(knn_of({0.4, 0.9}, {0, 0}), {{0.3, -0.2}, {0.5, 0.5}}, VoteWeighting::distance);
    CHECK(y == DenseVector{0, 0});
  }
  SUBCASE("distance weighting arithmetic") {
    const DenseVector y = vote(knn_of({0.5, 1.5}, {1, 0}), {{1, 0}, {0.7, 0.7}}, VoteWeighting::distance);
    CHECK(y[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(y[1] == 0.0);
  }
  SUBCASE("similarity weighting clamps at zero") {
    // w = [0.5, 0], denominator 0.5.
    const DenseVector y = vote(knn_of({0.5, 1.5}, {1, 1}), {{1, 0}, {0.7, 0.7}}, VoteWeighting::similarity);
    CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-11));
    CHECK(y[1] == 0.0);
  }
  SUBCASE("all-zero weights are guarded") {
    const DenseVector y = vote(knn_of({1.2, 1.5}, {1, 1}), {{1, 0}, {0.7, 0.7}}, VoteWeighting::similarity);
    CHECK(y == DenseVector{0, 0});
  }
  CHECK_THROWS_AS(vote(knn_of({0.5}, {1}), {{1}, {1}}, VoteWeighting::distance), NumericError);
}

TEST_CASE("forward examples") {
  SUBCASE("kappa == N with identical keys gives equal selection") {
    EnsembleConfig cfg = small_config(4, 5, 3, 4);
    EnsembleState s = init_ensemble(cfg);
    for (std::size_t n = 1; n < 4; ++n) std::copy(s.keys.row(0).begin(), s.keys.row(0).end(), s.keys.row(n).begin());
    const ForwardTrace t = forward(s, cfg, DenseVector{1, 2, 3, 4, 5});
    CHECK(t.selection == DenseVector(4, 1.0));
    for (std::size_t n = 1; n < 4; ++n) CHECK(t.vote_weights[n] == t.vote_weights[0]);
  }
  SUBCASE("hard mode with kappa=1 returns the nearest classifier's activation") {
    EnsembleConfig cfg = small_config(5, 6, 3, 1);
    cfg.mode = RoutingMode::hard;
    const EnsembleState s = init_ensemble(cfg);
    // Embedding close to key 3.
    DenseVector z(s.keys.row(3).begin(), s.keys.row(3).end());
    z[0] += 0.05;
    const ForwardTrace t = forward(s, cfg, z);
    CHECK(argmax(std::vector<double>(t.selection.begin(), t.selection.end())) == 3);
    for (std::size_t k = 0; k < 3; ++k) CHECK(t.prediction[k] == doctest::Approx(t.activations[3][k]).epsilon(1e-9));
  }
  SUBCASE("suppressed classifiers have no influence") {
    EnsembleConfig cfg = small_config(6, 8, 3, 2);
    EnsembleState s = init_ensemble(cfg);
    SeededRng rng(12);
    int checked = 0;
    for (int t = 0; t < 40; ++t) {
      const DenseVector z = draw_standard_normal(rng, 8);
      const ForwardTrace base = forward(s, cfg, z);
      EnsembleState perturbed = s;
      for (std::size_t n = 0; n < 6; ++n) {
        if (base.selection[n] != 0.0) continue;
        for (double& v : perturbed.weights[n].values()) v += rng.normal();
        for (double& v : perturbed.biases[n]) v += rng.normal();
        ++checked;
      }
      CHECK(forward(perturbed, cfg, z).prediction == base.prediction);
    }
    CHECK(checked > 0);
  }
}

TEST_CASE("routing is scale invariant") {
  EnsembleConfig cfg = small_config();
  const EnsembleState s = init_ensemble(cfg);
  SeededRng rng(5);
  for (int t = 0; t < 20; ++t) {
    const DenseVector z = draw_standard_normal(rng, 8);
    DenseVector z2 = z;
    for (double& v : z2) v *= 2;
    const ForwardTrace a = forward(s, cfg, z);
    const ForwardTrace b = forward(s, cfg, z2);
    for (std::size_t n = 0; n < 6; ++n) {
      CHECK(b.knn.c[n] == doctest::Approx(a.knn.c[n]).epsilon(1e-12));
      CHECK(b.selection[n] == doctest::Approx(a.selection[n]).epsilon(1e-6));
    }
  }
}

TEST_CASE("soft and hard selections agree on well-separated distances once converged") {
  // With the default 400 iterations the soft selection can still be short of
  // kappa members; this checks the routing semantics at convergence.
  EnsembleConfig cfg = small_config(16, 32, 3, 4);
  cfg.soft_knn.iterations = 20000;
  const EnsembleState s = init_ensemble(cfg);
  SeededRng rng(14);
  int checked = 0;
  for (int t = 0; t < 200 && checked < 20; ++t) {
    const DenseVector z = draw_standard_normal(rng, 32);
    const ForwardTrace tr = forward(s, cfg, z);
    DenseVector sorted = tr.knn.c;
    std::sort(sorted.begin(), sorted.end());
    if (sorted[4] - sorted[3] < 0.05) continue;
    std::vector<std::size_t> soft;
    for (std::size_t n = 0; n < 16; ++n) {
      if (tr.selection[n] > 0.0) soft.push_back(n);
    }
    CHECK(soft == hard_topk(tr.knn.c, 4));
    ++checked;
  }
  CHECK(checked == 20);
}

TEST_CASE("prediction bounds") {
  EnsembleConfig cfg = small_config();
  EnsembleState s = init_ensemble(cfg);
  SeededRng rng(8);
  for (auto& w : s.weights) {
    for (double& v : w.values()) v = 100 * rng.normal();
  }
  for (auto weighting : {VoteWeighting::distance, VoteWeighting::similarity}) {
    cfg.vote_weighting = weighting;
    for (int t = 0; t < 50; ++t) {
      const ForwardTrace tr = forward(s, cfg, draw_standard_normal(rng, 8));
      double max_gamma = 0;
      for (double g : tr.selection) max_gamma = std::max(max_gamma, g);
      for (double y : tr.prediction) {
        CHECK(std::abs(y) < 6.0);
        if (weighting == VoteWeighting::similarity) CHECK(std::abs(y) <= max_gamma + 1e-12);
      }
    }
  }
}

TEST_CASE("argmax ties go to the lowest index") {
  CHECK(argmax(DenseVector{0.2, 0.7, 0.7}) == 1);
  CHECK(argmax(DenseVector{0, 0, 0}) == 0);
  CHECK(argmax(DenseVector{-1, -0.5}) == 1);
  CHECK_THROWS_AS(argmax(DenseVector{}), NumericError);
}

TEST_CASE("mode and weighting names") {
  CHECK(parse_routing_mode("hard") == RoutingMode::hard);
  CHECK(to_string(RoutingMode::soft) == "soft");
  CHECK(parse_vote_weighting("similarity") == VoteWeighting::similarity);
  CHECK(to_string(VoteWeighting::distance) == "distance");
  CHECK_THROWS_AS(parse_routing_mode("medium"), std::invalid_argument);
  CHECK_THROWS_AS(parse_vote_weighting("cosine"), std::invalid_argument);
}
