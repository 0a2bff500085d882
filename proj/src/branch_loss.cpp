#include <algorithm>
#include <atomic>
#include <cmath>

#include "stn/episodic.hpp"
#include "stn/error.hpp"

namespace stn {

namespace {

std::atomic<std::size_t> g_clamped{0};

// Cross-entropy over a distance matrix; fills dL/dD. Rows whose true-class
// probability was clamped contribute no gradient.
double distance_cross_entropy(const Matrix& d, std::span<const std::size_t> labels, Matrix& grad_d) {
  const std::size_t q = d.rows(), n = d.cols();
  Matrix probs(q, n);
  for (std::size_t i = 0; i < q; ++i) {
    const Vector p = branch_probabilities(d.row(i));
    std::copy(p.begin(), p.end(), probs.row(i).begin());
  }
  const double loss = branch_loss(probs, labels);
  grad_d = Matrix(q, n);
  const double inv_q = 1.0 / static_cast<double>(q);
  for (std::size_t i = 0; i < q; ++i) {
    if (probs(i, labels[i]) < kProbabilityClamp) continue;
    for (std::size_t k = 0; k < n; ++k) grad_d(i, k) = ((k == labels[i] ? 1.0 : 0.0) - probs(i, k)) * inv_q;
  }
  return loss;
}

void check_batch(const Episode& ep, std::size_t outputs) {
  if (outputs != ep.support.size() + ep.query.size())
    fail(ErrorKind::LengthMismatch, "loss expects support followed by query embeddings");
}

}  // namespace

Vector branch_probabilities(std::span<const double> distances) {
  Vector p(distances.size());
  if (p.empty()) return p;
  const double lo = *std::min_element(distances.begin(), distances.end());
  double sum = 0.0;
  for (std::size_t n = 0; n < p.size(); ++n) {
    p[n] = std::exp(-(distances[n] - lo));
    sum += p[n];
  }
  for (double& v : p) v /= sum;
  return p;
}

double branch_loss(const Matrix& probabilities, std::span<const std::size_t> labels) {
  if (labels.size() != probabilities.rows())
    fail(ErrorKind::LengthMismatch, "one label per probability row required");
  if (labels.empty()) return 0.0;
  double loss = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= probabilities.cols()) fail(ErrorKind::LengthMismatch, "label out of range");
    double p = probabilities(i, labels[i]);
    if (!(p >= kProbabilityClamp)) {
      g_clamped.fetch_add(1, std::memory_order_relaxed);
      p = kProbabilityClamp;
    }
    loss -= std::log(p);
  }
  return loss / static_cast<double>(labels.size());
}

std::size_t probability_clamp_count() noexcept { return g_clamped.load(std::memory_order_relaxed); }
void reset_probability_clamp_count() noexcept { g_clamped.store(0, std::memory_order_relaxed); }

std::vector<Image> episode_batch(const Episode& episode) {
  std::vector<Image> batch = episode.support;
  batch.insert(batch.end(), episode.query.begin(), episode.query.end());
  return batch;
}

EmbeddingLoss global_branch_loss(const Episode& episode) {
  return [&episode](std::span<const DualEmbedding> out, std::span<DualEmbedding> adj) {
    check_batch(episode, out.size());
    const std::size_t n_way = episode.n_way, k_shot = episode.k_shot;
    const std::size_t n_support = n_way * k_shot, q = episode.query.size();
    const std::size_t c = out.front().global.size();

    std::vector<Vector> protos(n_way, Vector(c, 0.0));
    for (std::size_t s = 0; s < n_support; ++s)
      for (std::size_t j = 0; j < c; ++j) protos[episode.support_labels[s]][j] += out[s].global[j];
    for (Vector& p : protos)
      for (double& v : p) v /= static_cast<double>(k_shot);

    Matrix d(q, n_way);
    for (std::size_t i = 0; i < q; ++i)
      for (std::size_t n = 0; n < n_way; ++n) d(i, n) = euclidean_sq(out[n_support + i].global, protos[n]);
    Matrix gd;
    const double loss = distance_cross_entropy(d, episode.query_labels, gd);

    std::vector<Vector> proto_adj(n_way, Vector(c, 0.0));
    for (std::size_t i = 0; i < q; ++i) {
      const Vector& x = out[n_support + i].global;
      Vector& gx = adj[n_support + i].global;
      for (std::size_t n = 0; n < n_way; ++n) {
        const double w = 2.0 * gd(i, n);
        if (w == 0.0) continue;
        for (std::size_t j = 0; j < c; ++j) {
          const double g = w * (x[j] - protos[n][j]);
          gx[j] += g;
          proto_adj[n][j] -= g;
        }
      }
    }
    for (std::size_t s = 0; s < n_support; ++s)
      for (std::size_t j = 0; j < c; ++j)
        adj[s].global[j] += proto_adj[episode.support_labels[s]][j] / static_cast<double>(k_shot);
    return loss;
  };
}

EmbeddingLoss local_branch_loss(const Episode& episode, double epsilon_scale) {
  return [&episode, epsilon_scale](std::span<const DualEmbedding> out, std::span<DualEmbedding> adj) {
    check_batch(episode, out.size());
    const std::size_t n_way = episode.n_way, k_shot = episode.k_shot;
    const std::size_t n_support = n_way * k_shot, q = episode.query.size();
    const std::size_t m = out.front().local.rows(), c = out.front().local.cols();

    // Support shots are class-major, so class n owns rows [n·K·M, (n+1)·K·M).
    std::vector<Matrix> pooled(n_way, Matrix(k_shot * m, c));
    std::vector<std::size_t> filled(n_way, 0);
    std::vector<std::pair<std::size_t, std::size_t>> shot_slot(n_support);
    for (std::size_t s = 0; s < n_support; ++s) {
      const std::size_t n = episode.support_labels[s];
      shot_slot[s] = {n, filled[n]};
      const auto src = out[s].local.data();
      std::copy(src.begin(), src.end(), pooled[n].data().begin() + static_cast<std::ptrdiff_t>(filled[n] * m * c));
      ++filled[n];
    }

    std::vector<GaussianFactor> supports, queries;
    supports.reserve(n_way);
    queries.reserve(q);
    for (std::size_t n = 0; n < n_way; ++n) supports.push_back(factorize(fit_gaussian(pooled[n], epsilon_scale)));
    for (std::size_t i = 0; i < q; ++i)
      queries.push_back(factorize(fit_gaussian(out[n_support + i].local, epsilon_scale)));

    const Matrix d = kl_distance_matrix(queries, supports);
    Matrix gd;
    const double loss = distance_cross_entropy(d, episode.query_labels, gd);
    if (!std::isfinite(loss)) return loss;

    std::vector<GaussianAdjoint> gq, gs;
    kl_distance_matrix_backward(queries, supports, gd, gq, gs);
    for (std::size_t i = 0; i < q; ++i) {
      const Matrix dx = fit_gaussian_backward(out[n_support + i].local, queries[i].stats, epsilon_scale,
                                              gq[i].sigma, gq[i].mu);
      auto dst = adj[n_support + i].local.data();
      const auto src = dx.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
    std::vector<Matrix> pooled_adj(n_way);
    for (std::size_t n = 0; n < n_way; ++n)
      pooled_adj[n] = fit_gaussian_backward(pooled[n], supports[n].stats, epsilon_scale, gs[n].sigma, gs[n].mu);
    for (std::size_t s = 0; s < n_support; ++s) {
      const auto [n, slot] = shot_slot[s];
      auto dst = adj[s].local.data();
      const double* src = pooled_adj[n].row(slot * m).data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
    return loss;
  };
}

}  // namespace stn
