#include <doctest.h>

#include <cmath>

#include "dee/training.hpp"

using namespace dee;

namespace {

EnsembleConfig config(std::size_t n, std::size_t m, std::size_t k, std::size_t kappa, std::uint64_t seed = 3) {
  EnsembleConfig cfg;
  cfg.n_classifiers = n;
  cfg.embed_dim = m;
  cfg.n_classes = k;
  cfg.soft_knn.kappa = kappa;
  cfg.seed = seed;
  return cfg;
}

GradientSet single(std::size_t n, DenseMatrix w, DenseVector b) {
  GradientSet g;
  g.classifiers.emplace(n, ClassifierGradient{std::move(w), std::move(b)});
  return g;
}

double fd(EnsembleState& s, const EnsembleConfig& cfg, const DenseVector& z, std::size_t label, double& slot) {
  const double h = 1e-5;
  const double saved = slot;
  slot = saved + h;
  const double up = -forward(s, cfg, z).prediction[label];
  slot = saved - h;
  const double down = -forward(s, cfg, z).prediction[label];
  slot = saved;
  return (up - down) / (2 * h);
}

double normwise(const DenseVector& a, const DenseVector& b) {
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return scale == 0 ? 0 : diff / scale;
}

}  // namespace

TEST_CASE("loss examples") {
  CHECK(loss(one_hot(2, 4), DenseVector{0.1, -0.2, 0.7, 0}) == doctest::Approx(-0.7).epsilon(1e-15));
  CHECK(loss(one_hot(1, 3), DenseVector{0, 0, 0}) == 0.0);
  CHECK(loss(one_hot(0, 2), DenseVector{-1, 1}) == 1.0);
  CHECK_THROWS_AS(loss(DenseVector{0.5, 0.5}, DenseVector{1, 1}), NumericError);
  CHECK_THROWS_AS(loss(DenseVector{1, 1}, DenseVector{1, 1}), NumericError);
  CHECK_THROWS_AS(loss(DenseVector{0, 0}, DenseVector{1, 1}), NumericError);
  CHECK_THROWS_AS(one_hot(3, 3), NumericError);
}

TEST_CASE("backward masks suppressed classifiers") {
  const EnsembleConfig cfg = config(8, 6, 3, 2);
  const EnsembleState s = init_ensemble(cfg);
  SeededRng rng(4);
  for (int t = 0; t < 30; ++t) {
    const DenseVector z = draw_standard_normal(rng, 6);
    const ForwardTrace tr = forward(s, cfg, z);
    const GradientSet g = backward(tr, s, cfg, 1, false);
    for (std::size_t n = 0; n < 8; ++n) CHECK((g.classifiers.count(n) == 1) == (tr.selection[n] > 0.0));
    CHECK_FALSE(g.has_keys());
  }
}

TEST_CASE("backward matches central differences on N=6, M=8, K=3, kappa=2") {
  int checked = 0;
  int resolved = 0;
  for (std::uint64_t seed = 1; seed <= 12; ++seed) {
    for (auto weighting : {VoteWeighting::distance, VoteWeighting::similarity}) {
      EnsembleConfig cfg = config(6, 8, 3, 2, seed);
      cfg.vote_weighting = weighting;
      cfg.soft_knn.sigma = 0.01;
      EnsembleState s = init_ensemble(cfg);
      SeededRng rng(seed + 100);
      // Large weights move tanh off its linear part.
      for (auto& w : s.weights) {
        for (double& v : w.values()) v = 50 * rng.normal();
      }
      const DenseVector z = draw_standard_normal(rng, 8);
      const std::size_t label = seed % 3;
      const ForwardTrace tr = forward(s, cfg, z);
      // Central differences straddling the gamma threshold or the similarity clamp are meaningless.
      bool kink = false;
      for (std::size_t n = 0; n < 6; ++n) {
        kink = kink || std::abs(tr.knn.gamma_raw[n] - cfg.soft_knn.gamma_threshold) < 0.05;
        kink = kink || (weighting == VoteWeighting::similarity && std::abs(tr.knn.c[n] - 1.0) < 1e-3);
      }
      if (kink) continue;
      ++checked;
      const GradientSet g = backward(tr, s, cfg, label, true);

      DenseVector analytic, numeric;
      for (std::size_t n = 0; n < 6; ++n) {
        const auto it = g.classifiers.find(n);
        auto w = s.weights[n].values();
        for (std::size_t i = 0; i < w.size(); ++i) {
          analytic.push_back(it == g.classifiers.end() ? 0.0 : it->second.weight.values()[i]);
          numeric.push_back(fd(s, cfg, z, label, w[i]));
        }
      }
      CHECK(normwise(analytic, numeric) < 1e-4);

      DenseVector key_a(g.keys.values().begin(), g.keys.values().end()), key_n;
      for (double& v : s.keys.values()) key_n.push_back(fd(s, cfg, z, label, v));
      double scale = 0;
      for (std::size_t i = 0; i < key_a.size(); ++i) scale = std::max({scale, std::abs(key_a[i]), std::abs(key_n[i])});
      // Similarity votes can leave the loss almost flat in the keys.
      if (scale < 1e-7) continue;
      ++resolved;
      CHECK(normwise(key_a, key_n) < 1e-3);
    }
  }
  CHECK(checked >= 12);
  CHECK(resolved >= 12);
}

TEST_CASE("key gradients need soft routing") {
  EnsembleConfig cfg = config(4, 3, 2, 1);
  cfg.mode = RoutingMode::hard;
  const EnsembleState s = init_ensemble(cfg);
  const ForwardTrace tr = forward(s, cfg, DenseVector{1, 0, 0});
  CHECK_THROWS_AS(backward(tr, s, cfg, 0, true), NumericError);
  CHECK_THROWS_AS(backward(tr, s, cfg, 2, false), NumericError);
}

TEST_CASE("sign_step examples") {
  EnsembleState s = init_ensemble(config(2, 3, 1, 1));
  TrainConfig tc;
  SUBCASE("pure sign") {
    tc.weight_decay = 0;
    std::fill(s.weights[0].values().begin(), s.weights[0].values().end(), 0.0);
    sign_step(s, single(0, DenseMatrix(1, 3, {0.3, -2, 0}), DenseVector{0}), tc);
    CHECK(s.weights[0].values()[0] == -1e-4);
    CHECK(s.weights[0].values()[1] == 1e-4);
    CHECK(s.weights[0].values()[2] == 0.0);
  }
  SUBCASE("decay only") {
    tc.weight_decay = 1e-4;
    s.weights[0] = DenseMatrix(1, 3, {1, 1, 1});
    sign_step(s, single(0, DenseMatrix(1, 3), DenseVector{0}), tc);
    CHECK(s.weights[0].values()[0] == doctest::Approx(0.9999).epsilon(1e-15));
  }
  SUBCASE("fixed step regardless of gradient size") {
    tc.weight_decay = 0;
    const DenseMatrix before = s.weights[0];
    sign_step(s, single(0, DenseMatrix(1, 3, {0.001, 1000, -1e-9}), DenseVector{0}), tc);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(std::abs(std::abs(s.weights[0].values()[i] - before.values()[i]) - 1e-4) < 1e-15);
    }
  }
  SUBCASE("unmasked classifiers and keys are untouched") {
    const EnsembleState before = s;
    sign_step(s, single(0, DenseMatrix(1, 3, {1, 1, 1}), DenseVector{1}), tc);
    CHECK(s.weights[1] == before.weights[1]);
    CHECK(s.biases[1] == before.biases[1]);
    CHECK(s.keys == before.keys);
  }
}

TEST_CASE("adam_key_step") {
  const EnsembleConfig cfg = config(5, 4, 2, 2);
  TrainConfig tc;
  tc.train_keys = true;
  SUBCASE("zero gradient leaves keys unchanged") {
    EnsembleState s = init_ensemble(cfg);
    const DenseMatrix before = s.keys;
    GradientSet g;
    g.keys = DenseMatrix(5, 4);
    AdamState adam;
    adam_key_step(s, g, adam, tc);
    // Only the re-projection onto the sphere touches the keys.
    for (std::size_t i = 0; i < 20; ++i) CHECK(std::abs(s.keys.values()[i] - before.values()[i]) < 1e-15);
    CHECK(adam.step == 1);
  }
  SUBCASE("first step moves each coordinate by about key_lr, then projects") {
    EnsembleState s = init_ensemble(cfg);
    const DenseMatrix before = s.keys;
    SeededRng rng(2);
    GradientSet g;
    g.keys = DenseMatrix(5, 4, draw_standard_normal(rng, 20));
    AdamState adam;
    adam_key_step(s, g, adam, tc);
    for (std::size_t n = 0; n < 5; ++n) {
      CHECK(std::abs(norm2(s.keys.row(n)) - 1.0) < 1e-9);
      // Undo the projection: the pre-projection row is before - lr * sign(g).
      DenseVector pre(4);
      for (std::size_t i = 0; i < 4; ++i) {
        const double gi = g.keys(n, i);
        pre[i] = before(n, i) - tc.key_lr * (gi > 0 ? 1.0 : -1.0) * std::abs(gi) / (std::abs(gi) + tc.adam_eps);
      }
      const DenseVector expect = l2_normalize(pre);
      for (std::size_t i = 0; i < 4; ++i) CHECK(s.keys(n, i) == doctest::Approx(expect[i]).epsilon(1e-12));
    }
  }
  SUBCASE("keys stay on the sphere over many steps") {
    EnsembleState s = init_ensemble(cfg);
    SeededRng rng(3);
    AdamState adam;
    for (int t = 0; t < 100; ++t) {
      GradientSet g;
      g.keys = DenseMatrix(5, 4, draw_standard_normal(rng, 20));
      adam_key_step(s, g, adam, tc);
    }
    for (std::size_t n = 0; n < 5; ++n) CHECK(std::abs(norm2(s.keys.row(n)) - 1.0) < 1e-9);
    CHECK(all_finite(adam.m.values()));
    CHECK(all_finite(adam.v.values()));
  }
}

TEST_CASE("train_batch") {
  const EnsembleConfig cfg = config(4, 8, 2, 2);
  TrainConfig tc;
  SeededRng rng(7);
  std::vector<DenseVector> zs;
  std::vector<std::size_t> labels;
  for (int i = 0; i < 6; ++i) {
    zs.push_back(draw_standard_normal(rng, 8));
    labels.push_back(i % 2);
  }
  auto examples = [&](bool twice) {
    std::vector<Example> b;
    for (int rep = 0; rep < (twice ? 2 : 1); ++rep) {
      for (std::size_t i = 0; i < zs.size(); ++i) b.push_back({zs[i], labels[i]});
    }
    return b;
  };

  SUBCASE("batch of one is a plain step") {
    EnsembleState a = init_ensemble(cfg);
    EnsembleState b = a;
    AdamState adam;
    const std::vector<Example> one{{zs[0], labels[0]}};
    const double l = train_batch(a, adam, one, cfg, tc);
    const ForwardTrace tr = forward(b, cfg, zs[0]);
    CHECK(l == loss(one_hot(labels[0], 2), tr.prediction));
    sign_step(b, backward(tr, b, cfg, labels[0], false), tc);
    CHECK(a == b);
  }
  SUBCASE("duplicating the batch does not change the update") {
    EnsembleState a = init_ensemble(cfg);
    EnsembleState b = a;
    AdamState adam_a, adam_b;
    const double la = train_batch(a, adam_a, examples(false), cfg, tc);
    const double lb = train_batch(b, adam_b, examples(true), cfg, tc);
    CHECK(a == b);
    CHECK(la == doctest::Approx(lb).epsilon(1e-14));
  }
  SUBCASE("masking exactness") {
    EnsembleState s = init_ensemble(cfg);
    std::vector<bool> used(4, false);
    for (const auto& z : zs) {
      const ForwardTrace tr = forward(s, cfg, z);
      for (std::size_t n = 0; n < 4; ++n) used[n] = used[n] || tr.selection[n] > 0.0;
    }
    const EnsembleState before = s;
    AdamState adam;
    train_batch(s, adam, examples(false), cfg, tc);
    for (std::size_t n = 0; n < 4; ++n) {
      if (used[n]) continue;
      CHECK(s.weights[n] == before.weights[n]);
      CHECK(s.biases[n] == before.biases[n]);
    }
    CHECK(s.keys == before.keys);
  }
  SUBCASE("fixed step with wd = 0") {
    TrainConfig no_decay = tc;
    no_decay.weight_decay = 0;
    EnsembleState s = init_ensemble(cfg);
    const EnsembleState before = s;
    AdamState adam;
    train_batch(s, adam, examples(false), cfg, no_decay);
    for (std::size_t n = 0; n < 4; ++n) {
      const auto w0 = before.weights[n].values();
      const auto w1 = s.weights[n].values();
      for (std::size_t i = 0; i < w0.size(); ++i) {
        const double moved = std::abs(w1[i] - w0[i]);
        CHECK((moved == 0.0 || std::abs(moved - 1e-4) < 1e-15));
      }
    }
  }
  SUBCASE("determinism across thread counts") {
    EnsembleState a = init_ensemble(cfg);
    EnsembleState b = a;
    AdamState adam_a, adam_b;
    TrainConfig keys = tc;
    keys.train_keys = true;
    for (int t = 0; t < 5; ++t) {
      train_batch(a, adam_a, examples(false), cfg, keys);
      train_batch(b, adam_b, examples(false), cfg, keys);
    }
    CHECK(a == b);
  }
  SUBCASE("empty batch and bad labels") {
    EnsembleState s = init_ensemble(cfg);
    AdamState adam;
    CHECK_THROWS_AS(train_batch(s, adam, std::vector<Example>{}, cfg, tc), NumericError);
    const std::vector<Example> bad{{zs[0], 2}};
    CHECK_THROWS_AS(train_batch(s, adam, bad, cfg, tc), NumericError);
  }
}

TEST_CASE("loss decreases on a separable two-class toy set") {
  const EnsembleConfig cfg = config(4, 8, 2, 2, 11);
  TrainConfig tc;
  tc.learning_rate = 1e-2;
  SeededRng rng(19);
  const DenseVector c0 = draw_standard_normal(rng, 8);
  DenseVector c1 = c0;
  for (double& v : c1) v = -v;
  std::vector<DenseVector> zs;
  std::vector<std::size_t> labels;
  for (int i = 0; i < 200; ++i) {
    DenseVector z = i % 2 ? c1 : c0;
    for (double& v : z) v += 0.1 * rng.normal();
    zs.push_back(z);
    labels.push_back(i % 2);
  }
  EnsembleState s = init_ensemble(cfg);
  AdamState adam;
  auto mean_loss = [&] {
    double l = 0;
    for (std::size_t i = 0; i < zs.size(); ++i) l += loss(one_hot(labels[i], 2), forward(s, cfg, zs[i]).prediction);
    return l / static_cast<double>(zs.size());
  };
  const double initial = mean_loss();
  for (int b = 0; b < 50; ++b) {
    std::vector<Example> batch;
    for (int j = 0; j < 4; ++j) {
      const std::size_t i = (b * 4 + j) % zs.size();
      batch.push_back({zs[i], labels[i]});
    }
    train_batch(s, adam, batch, cfg, tc);
  }
  CHECK(mean_loss() < initial);
}

TEST_CASE("TrainConfig validation") {
  TrainConfig tc;
  CHECK_NOTHROW(tc.validate());
  tc.learning_rate = 0;
  CHECK_THROWS_AS(tc.validate(), NumericError);
  tc = TrainConfig{};
  tc.weight_decay = 1;
  CHECK_THROWS_AS(tc.validate(), NumericError);
  tc = TrainConfig{};
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), NumericError);
}
