#include "stn/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "stn/error.hpp"

namespace stn {

namespace {

constexpr double kVarianceFloor = 1e-12;

void require_same_length(std::size_t a, std::size_t b) {
  if (a != b)
    fail(ErrorKind::LengthMismatch,
         "branch vectors have lengths " + std::to_string(a) + " and " + std::to_string(b));
}

}  // namespace

std::string_view to_string(FusionMode mode) noexcept {
  return mode == FusionMode::Manual ? "manual" : "adaptive";
}

FusionMode parse_fusion_mode(std::string_view name) {
  if (name == "manual") return FusionMode::Manual;
  if (name == "adaptive") return FusionMode::Adaptive;
  fail(ErrorKind::InvalidConfig, "unknown fusion mode '" + std::string(name) + "'");
}

void FusionConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    fail(ErrorKind::InvalidConfig, "alpha " + std::to_string(alpha) + " is outside [0,1]");
}

double default_alpha(std::size_t k_shot) noexcept { return k_shot <= 1 ? 0.7 : 0.6; }

Vector l2_normalize(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  const double n = std::sqrt(s);
  Vector out(v.begin(), v.end());
  if (n > 1e-12)
    for (double& x : out) x /= n;
  return out;
}

Vector fuse_manual(std::span<const double> d_kl, std::span<const double> d_ed,
                   const FusionConfig& config) {
  require_same_length(d_kl.size(), d_ed.size());
  config.validate();
  const Vector kl = config.normalize ? l2_normalize(d_kl) : Vector(d_kl.begin(), d_kl.end());
  const Vector ed = config.normalize ? l2_normalize(d_ed) : Vector(d_ed.begin(), d_ed.end());
  Vector out(kl.size());
  for (std::size_t n = 0; n < out.size(); ++n)
    out[n] = -config.alpha * kl[n] - (1.0 - config.alpha) * ed[n];
  return out;
}

Vector fuse_adaptive(std::span<const double> d_kl, std::span<const double> d_ed,
                     const AdaptiveFusionParams& params) {
  require_same_length(d_kl.size(), d_ed.size());
  const double s0 = std::sqrt(std::max(params.running_var[0], kVarianceFloor));
  const double s1 = std::sqrt(std::max(params.running_var[1], kVarianceFloor));
  Vector out(d_kl.size());
  for (std::size_t n = 0; n < out.size(); ++n)
    out[n] = -params.omega[0] * (d_kl[n] - params.running_mean[0]) / s0 -
             params.omega[1] * (d_ed[n] - params.running_mean[1]) / s1;
  return out;
}

double fuse_adaptive_train(const Matrix& d_kl, const Matrix& d_ed, std::span<const std::size_t> labels,
                           AdaptiveFusionParams& params, double grad_omega[2]) {
  if (d_kl.rows() != d_ed.rows() || d_kl.cols() != d_ed.cols())
    fail(ErrorKind::LengthMismatch, "branch distance matrices differ in shape");
  if (labels.size() != d_kl.rows()) fail(ErrorKind::LengthMismatch, "one label per query required");
  const std::size_t q = d_kl.rows(), n = d_kl.cols();

  double mean[2] = {0.0, 0.0}, var[2] = {0.0, 0.0};
  const Matrix* branch[2] = {&d_kl, &d_ed};
  for (int b = 0; b < 2; ++b) {
    for (double v : branch[b]->data()) mean[b] += v;
    mean[b] /= static_cast<double>(branch[b]->size());
    for (double v : branch[b]->data()) var[b] += (v - mean[b]) * (v - mean[b]);
    var[b] = std::max(var[b] / static_cast<double>(branch[b]->size()), kVarianceFloor);
  }

  grad_omega[0] = grad_omega[1] = 0.0;
  double loss = 0.0;
  Vector z0(n), z1(n), logits(n);
  for (std::size_t i = 0; i < q; ++i) {
    double mx = -INFINITY;
    for (std::size_t k = 0; k < n; ++k) {
      z0[k] = (d_kl(i, k) - mean[0]) / std::sqrt(var[0]);
      z1[k] = (d_ed(i, k) - mean[1]) / std::sqrt(var[1]);
      logits[k] = -params.omega[0] * z0[k] - params.omega[1] * z1[k];
      mx = std::max(mx, logits[k]);
    }
    double sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) sum += std::exp(logits[k] - mx);
    const double log_z = mx + std::log(sum);
    loss -= logits[labels[i]] - log_z;
    for (std::size_t k = 0; k < n; ++k) {
      const double g = std::exp(logits[k] - log_z) - (k == labels[i] ? 1.0 : 0.0);
      grad_omega[0] -= g * z0[k];
      grad_omega[1] -= g * z1[k];
    }
  }
  loss /= static_cast<double>(q);
  grad_omega[0] /= static_cast<double>(q);
  grad_omega[1] /= static_cast<double>(q);

  for (int b = 0; b < 2; ++b) {
    params.running_mean[b] = (1.0 - params.momentum) * params.running_mean[b] + params.momentum * mean[b];
    params.running_var[b] = (1.0 - params.momentum) * params.running_var[b] + params.momentum * var[b];
  }
  return loss;
}

std::size_t classify(std::span<const double> similarity) {
  if (similarity.empty()) fail(ErrorKind::LengthMismatch, "classify needs at least one class");
  std::size_t best = 0;
  for (std::size_t n = 0; n < similarity.size(); ++n) {
    if (!std::isfinite(similarity[n]))
      fail(ErrorKind::NonFiniteInput, "similarity " + std::to_string(n) + " is not finite");
    if (similarity[n] > similarity[best]) best = n;
  }
  return best;
}

}  // namespace stn
