#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "stn/episodic.hpp"

namespace stn::test {

// 2-way 1-shot episode on the same-texture pair with a tiny encoder. The pair
// keeps both branch losses away from saturation, so the gradients are not
// vanishingly small.
struct ToyProblem {
  EncoderParams params;
  Episode episode;
  std::vector<Image> batch;
};

inline ToyProblem toy_problem() {
  const SyntheticDataset syn = gen_synthetic({10, 4, 32, 3});
  EncoderConfig cfg;
  cfg.embed_dim = 8;
  cfg.depth = 1;
  cfg.heads = 2;
  ToyProblem toy;
  toy.params = init_params(cfg, 5);
  Dataset pair;
  pair.image_size = 32;
  pair.channels = 3;
  pair.classes = {syn.dataset.classes[syn.same_texture.first], syn.dataset.classes[syn.same_texture.second]};
  std::mt19937_64 rng(1);
  toy.episode = sample_episode(pair, 2, 1, 2, rng);
  toy.batch = episode_batch(toy.episode);
  return toy;
}

struct CoordCheck {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel = 0.0;
};

// Five-point central differences on `coords` parameter entries drawn uniformly
// over the flattened parameter vector. Relative error is
// |a-b| / max(|a|, |b|, floor); the floor only matters for entries whose
// gradient vanishes by symmetry (key biases under the softmax).
inline std::vector<CoordCheck> check_gradient(EncoderParams params, const EmbeddingLoss& loss,
                                              const std::vector<Image>& batch, std::size_t coords,
                                              std::uint64_t seed, double h = 1e-3, double floor = 1e-10) {
  const GradResult g = grad(params, loss, batch);
  std::vector<std::pair<std::string, Matrix*>> tensors;
  params.visit([&](const std::string& n, Matrix& m) { tensors.emplace_back(n, &m); });
  std::vector<const Matrix*> grads;
  g.grad.visit([&](const std::string&, const Matrix& m) { grads.push_back(&m); });
  std::size_t total = 0;
  for (const auto& t : tensors) total += t.second->size();

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  std::vector<CoordCheck> out;
  for (std::size_t c = 0; c < coords; ++c) {
    std::size_t flat = pick(rng), t = 0;
    while (flat >= tensors[t].second->size()) flat -= tensors[t++].second->size();
    double& x = tensors[t].second->data()[flat];
    const double x0 = x;
    auto f = [&](double step) {
      x = x0 + step;
      return grad(params, loss, batch).loss;
    };
    const double numeric = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
    x = x0;
    CoordCheck r{tensors[t].first, flat, grads[t]->data()[flat], numeric, 0.0};
    r.rel = std::abs(r.analytic - r.numeric) / std::max({std::abs(r.analytic), std::abs(r.numeric), floor});
    out.push_back(r);
  }
  return out;
}

inline double worst_rel(const std::vector<CoordCheck>& checks) {
  double w = 0.0;
  for (const auto& c : checks) w = std::max(w, c.rel);
  return w;
}

}  // namespace stn::test
