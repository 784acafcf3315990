#include "dee/soft_knn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>

namespace dee {

namespace {

constexpr std::size_t kTargets = 2;

// Kernel in log form: log G = -E / sigma.
std::vector<double> log_kernel(std::span<const double> c, double sigma) {
  std::vector<double> lg(c.size() * kTargets);
  for (std::size_t n = 0; n < c.size(); ++n) {
    lg[n * kTargets + 0] = -(c[n] * c[n]) / sigma;
    lg[n * kTargets + 1] = -((c[n] - 1.0) * (c[n] - 1.0)) / sigma;
  }
  return lg;
}

double lse2(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace

void SoftKnnConfig::validate(std::size_t n) const {
  if (n == 0) throw NumericError("soft knn needs at least one candidate");
  if (kappa < 1 || kappa > n) {
    throw NumericError("kappa " + std::to_string(kappa) + " outside [1, " + std::to_string(n) + "]");
  }
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw NumericError("sigma must be positive");
  if (iterations < 1) throw NumericError("iterations must be >= 1");
  if (!(gamma_threshold >= 0.0 && gamma_threshold < 1.0)) {
    throw NumericError("gamma_threshold must lie in [0, 1)");
  }
}

DenseVector cosine_distances(std::span<const double> z, const DenseMatrix& keys) {
  if (keys.cols() != z.size()) {
    throw NumericError("dimension mismatch: embedding " + std::to_string(z.size()) + " vs keys " +
                       std::to_string(keys.cols()));
  }
  DenseVector c(keys.rows());
  for (std::size_t n = 0; n < keys.rows(); ++n) c[n] = 1.0 - cosine_similarity(z, keys.row(n));
  return c;
}

DenseMatrix build_cost_matrix(std::span<const double> c) {
  DenseMatrix e(c.size(), kTargets);
  for (std::size_t n = 0; n < c.size(); ++n) {
    e(n, 0) = c[n] * c[n];
    e(n, 1) = (c[n] - 1.0) * (c[n] - 1.0);
  }
  return e;
}

SoftKnnResult sinkhorn_forward(std::span<const double> c, const SoftKnnConfig& cfg) {
  const std::size_t n_keys = c.size();
  cfg.validate(n_keys);
  if (!all_finite(c)) throw NumericError("non-finite distance");

  SoftKnnResult out;
  out.c.assign(c.begin(), c.end());

  if (cfg.kappa == n_keys) {
    out.gamma_raw.assign(n_keys, 1.0);
    out.gamma = out.gamma_raw;
    return out;
  }

  const double nn = static_cast<double>(n_keys);
  const double log_mu = -std::log(nn);
  const std::array<double, kTargets> log_nu = {std::log(cfg.kappa / nn),
                                               std::log((nn - cfg.kappa) / nn)};
  const std::vector<double> lg = log_kernel(c, cfg.sigma);
  const std::size_t iters = cfg.iterations;

  SinkhornTape& tape = out.tape;
  tape.n = n_keys;
  tape.iterations = iters;
  tape.sigma = cfg.sigma;
  tape.kappa = cfg.kappa;
  tape.log_p.resize(iters * n_keys);
  tape.log_q.resize((iters + 1) * kTargets);
  tape.log_q[0] = tape.log_q[1] = std::log(0.5);

  std::vector<double> col(n_keys);
  for (std::size_t l = 1; l <= iters; ++l) {
    const double* q_prev = &tape.log_q[(l - 1) * kTargets];
    double* p = &tape.log_p[(l - 1) * n_keys];
    for (std::size_t n = 0; n < n_keys; ++n) {
      p[n] = log_mu - lse2(lg[n * kTargets] + q_prev[0], lg[n * kTargets + 1] + q_prev[1]);
    }
    double* q = &tape.log_q[l * kTargets];
    for (std::size_t j = 0; j < kTargets; ++j) {
      for (std::size_t n = 0; n < n_keys; ++n) col[n] = lg[n * kTargets + j] + p[n];
      q[j] = log_nu[j] - log_sum_exp(col);
    }
  }

  const double* p_last = &tape.log_p[(iters - 1) * n_keys];
  const double q0_last = tape.log_q[iters * kTargets];
  out.gamma_raw.resize(n_keys);
  out.gamma.resize(n_keys);
  for (std::size_t n = 0; n < n_keys; ++n) {
    out.gamma_raw[n] = nn * std::exp(p_last[n] + lg[n * kTargets] + q0_last);
    out.gamma[n] = out.gamma_raw[n] >= cfg.gamma_threshold ? out.gamma_raw[n] : 0.0;
  }
  return out;
}

DenseVector sinkhorn_backward(const SoftKnnResult& result, std::span<const double> upstream) {
  const SinkhornTape& tape = result.tape;
  if (tape.empty()) throw NumericError("sinkhorn_backward: result carries no tape");
  const std::size_t n_keys = tape.n;
  if (upstream.size() != n_keys) throw NumericError("sinkhorn_backward: upstream size mismatch");

  const double nn = static_cast<double>(n_keys);
  const double log_mu = -std::log(nn);
  const std::array<double, kTargets> log_nu = {std::log(tape.kappa / nn),
                                               std::log((nn - tape.kappa) / nn)};
  const std::vector<double> lg = log_kernel(result.c, tape.sigma);
  const std::size_t iters = tape.iterations;

  std::vector<double> adj_lg(n_keys * kTargets, 0.0);
  std::vector<double> adj_p(n_keys, 0.0);
  std::array<double, kTargets> adj_q = {0.0, 0.0};

  // gamma_raw_n = N exp(log_p_n + log G_n0 + log q_0), with the threshold mask.
  for (std::size_t n = 0; n < n_keys; ++n) {
    if (result.gamma[n] == 0.0) continue;
    const double g = upstream[n] * result.gamma_raw[n];
    adj_p[n] += g;
    adj_lg[n * kTargets] += g;
    adj_q[0] += g;
  }

  for (std::size_t l = iters; l >= 1; --l) {
    const double* p = &tape.log_p[(l - 1) * n_keys];
    const double* q = &tape.log_q[l * kTargets];
    const double* q_prev = &tape.log_q[(l - 1) * kTargets];

    // q_j = log nu_j - LSE_n(lg_nj + p_n)
    for (std::size_t j = 0; j < kTargets; ++j) {
      const double a = adj_q[j];
      if (a == 0.0) continue;
      for (std::size_t n = 0; n < n_keys; ++n) {
        const double w = std::exp(lg[n * kTargets + j] + p[n] + q[j] - log_nu[j]);
        adj_p[n] -= a * w;
        adj_lg[n * kTargets + j] -= a * w;
      }
    }

    // p_n = log mu - LSE_j(lg_nj + q_prev_j)
    adj_q = {0.0, 0.0};
    for (std::size_t n = 0; n < n_keys; ++n) {
      const double b = adj_p[n];
      if (b == 0.0) continue;
      for (std::size_t j = 0; j < kTargets; ++j) {
        const double w = std::exp(lg[n * kTargets + j] + q_prev[j] + p[n] - log_mu);
        adj_q[j] -= b * w;
        adj_lg[n * kTargets + j] -= b * w;
      }
      adj_p[n] = 0.0;
    }
  }

  DenseVector grad(n_keys);
  for (std::size_t n = 0; n < n_keys; ++n) {
    const double cn = result.c[n];
    grad[n] = adj_lg[n * kTargets] * (-2.0 * cn / tape.sigma) +
              adj_lg[n * kTargets + 1] * (-2.0 * (cn - 1.0) / tape.sigma);
  }
  return grad;
}

std::vector<std::size_t> hard_topk(std::span<const double> c, std::size_t kappa) {
  if (kappa > c.size()) {
    throw NumericError("kappa " + std::to_string(kappa) + " exceeds " + std::to_string(c.size()));
  }
  std::vector<std::size_t> idx(c.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return c[a] < c[b]; });
  idx.resize(kappa);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace dee
