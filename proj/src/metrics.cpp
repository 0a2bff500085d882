#include "stn/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "stn/error.hpp"

namespace stn {

namespace {

void require_same_dim(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    fail(ErrorKind::DimensionMismatch,
         std::string(what) + ": dimensions " + std::to_string(a) + " and " + std::to_string(b));
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

// Symmetrized inverse of an SPD matrix from its Cholesky factor.
Matrix spd_inverse_factored(const Matrix& lower) {
  Matrix inv = spd_solve_factored(lower, Matrix::identity(lower.rows()));
  for (std::size_t i = 0; i < inv.rows(); ++i)
    for (std::size_t j = i + 1; j < inv.cols(); ++j) {
      const double v = 0.5 * (inv(i, j) + inv(j, i));
      inv(i, j) = v;
      inv(j, i) = v;
    }
  return inv;
}

}  // namespace

bool is_global(MetricKind kind) noexcept {
  return kind == MetricKind::Dot || kind == MetricKind::Abs || kind == MetricKind::Cos ||
         kind == MetricKind::Sqr;
}

std::string_view to_string(MetricKind kind) noexcept {
  switch (kind) {
    case MetricKind::Dot: return "dot";
    case MetricKind::Abs: return "abs";
    case MetricKind::Cos: return "cos";
    case MetricKind::Sqr: return "sqr";
    case MetricKind::Wass: return "wass";
    case MetricKind::Covar: return "covar";
    case MetricKind::Kl: return "kl";
  }
  return "?";
}

MetricKind parse_metric_kind(std::string_view name) {
  for (MetricKind k : {MetricKind::Dot, MetricKind::Abs, MetricKind::Cos, MetricKind::Sqr,
                       MetricKind::Wass, MetricKind::Covar, MetricKind::Kl})
    if (to_string(k) == name) return k;
  fail(ErrorKind::InvalidConfig, "unknown metric kind '" + std::string(name) + "'");
}

GlobalPrototype prototype_global(std::span<const Vector> class_embeddings) {
  if (class_embeddings.empty()) fail(ErrorKind::DimensionMismatch, "prototype of an empty class");
  const std::size_t c = class_embeddings.front().size();
  GlobalPrototype p{Vector(c, 0.0)};
  for (const Vector& v : class_embeddings) {
    require_same_dim(v.size(), c, "prototype_global");
    for (std::size_t j = 0; j < c; ++j) p.vector[j] += v[j];
  }
  for (double& v : p.vector) v /= static_cast<double>(class_embeddings.size());
  return p;
}

double euclidean_sq(std::span<const double> q, std::span<const double> s) {
  require_same_dim(q.size(), s.size(), "euclidean_sq");
  double d = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) d += (q[i] - s[i]) * (q[i] - s[i]);
  return d;
}

double global_metric(MetricKind kind, std::span<const double> q, std::span<const double> s) {
  require_same_dim(q.size(), s.size(), "global_metric");
  switch (kind) {
    case MetricKind::Sqr: return euclidean_sq(q, s);
    case MetricKind::Abs: {
      double d = 0.0;
      for (std::size_t i = 0; i < q.size(); ++i) d += std::abs(q[i] - s[i]);
      return d;
    }
    case MetricKind::Dot: return -dot(q, s);
    case MetricKind::Cos: {
      const double nq = norm(q), ns = norm(s);
      if (nq == 0.0 || ns == 0.0) fail(ErrorKind::ZeroVector, "cosine of a zero vector");
      return 1.0 - dot(q, s) / (nq * ns);
    }
    default: break;
  }
  fail(ErrorKind::InvalidConfig, "'" + std::string(to_string(kind)) + "' is not a global metric");
}

GaussianFactor factorize(GaussianStats stats) {
  GaussianFactor f;
  f.chol = cholesky(stats.sigma);
  f.log_det = log_det_from_cholesky(f.chol);
  f.stats = std::move(stats);
  return f;
}

double kl_gaussian(const GaussianFactor& q, const GaussianFactor& s) {
  const std::size_t c = q.stats.dim();
  require_same_dim(c, s.stats.dim(), "kl_gaussian");
  // tr(Σ_S⁻¹Σ_Q) = ‖L_S⁻¹ L_Q‖²_F and the Mahalanobis term = ‖L_S⁻¹ Δμ‖².
  const Matrix w = solve_lower(s.chol, q.chol);
  double tr = 0.0;
  for (double v : w.data()) tr += v * v;
  Vector diff(c);
  for (std::size_t j = 0; j < c; ++j) diff[j] = s.stats.mu[j] - q.stats.mu[j];
  const Vector z = solve_lower(s.chol, diff);
  const double maha = dot(z, z);
  return 0.5 * (tr + (s.log_det - q.log_det) + maha - static_cast<double>(c));
}

double kl_gaussian(const GaussianStats& q, const GaussianStats& s) {
  require_same_dim(q.dim(), s.dim(), "kl_gaussian");
  return kl_gaussian(factorize(q), factorize(s));
}

double wasserstein2_sq(const GaussianStats& q, const GaussianStats& s, const Matrix& sigma_s_sqrt) {
  require_same_dim(q.dim(), s.dim(), "wasserstein2_sq");
  const Matrix inner = matmul(matmul(sigma_s_sqrt, q.sigma), sigma_s_sqrt);
  Matrix sym(inner.rows(), inner.cols());
  for (std::size_t i = 0; i < inner.rows(); ++i)
    for (std::size_t j = 0; j < inner.cols(); ++j) sym(i, j) = 0.5 * (inner(i, j) + inner(j, i));
  // trace of the principal square root = Σ √λ; tiny negative λ are rounding.
  double root_trace = 0.0;
  for (double lambda : symmetric_eigen(sym).values) root_trace += std::sqrt(std::max(lambda, 0.0));
  const double mean_term = euclidean_sq(q.mu, s.mu);
  return std::max(0.0, mean_term + trace(q.sigma) + trace(s.sigma) - 2.0 * root_trace);
}

double wasserstein2_sq(const GaussianStats& q, const GaussianStats& s) {
  require_same_dim(q.dim(), s.dim(), "wasserstein2_sq");
  cholesky(q.sigma);
  return wasserstein2_sq(q, s, spd_sqrt(s.sigma));
}

double covar_metric(const Matrix& query_locals, const GaussianStats& s) {
  const std::size_t c = s.dim();
  require_same_dim(query_locals.cols(), c, "covar_metric");
  if (query_locals.rows() == 0) fail(ErrorKind::DimensionMismatch, "covar_metric with no locals");
  double total = 0.0;
  Vector unit(c);
  for (std::size_t i = 0; i < query_locals.rows(); ++i) {
    const auto q = query_locals.row(i);
    const double n = norm(q);
    if (n == 0.0) fail(ErrorKind::ZeroVector, "local feature " + std::to_string(i) + " is zero");
    for (std::size_t j = 0; j < c; ++j) unit[j] = q[j] / n;
    total += dot(unit, matvec(s.sigma, unit));
  }
  return -total / static_cast<double>(query_locals.rows());
}

ClassSummary summarize_class(std::span<const DualEmbedding> shots, double epsilon_scale,
                             bool with_sqrt) {
  if (shots.empty()) fail(ErrorKind::DimensionMismatch, "class with no support shots");
  std::vector<Vector> globals;
  globals.reserve(shots.size());
  const std::size_t m = shots.front().local.rows(), c = shots.front().local.cols();
  Matrix pooled(shots.size() * m, c);
  for (std::size_t k = 0; k < shots.size(); ++k) {
    globals.push_back(shots[k].global);
    if (shots[k].local.rows() != m || shots[k].local.cols() != c)
      fail(ErrorKind::DimensionMismatch, "support shots have different local shapes");
    std::copy(shots[k].local.data().begin(), shots[k].local.data().end(),
              pooled.data().begin() + static_cast<std::ptrdiff_t>(k * m * c));
  }
  ClassSummary s;
  s.prototype = prototype_global(globals);
  s.gaussian = factorize(fit_gaussian(pooled, epsilon_scale));
  if (with_sqrt) s.sigma_sqrt = spd_sqrt(s.gaussian.stats.sigma);
  return s;
}

Vector class_distance_vector(MetricKind kind, const DualEmbedding& query,
                             std::span<const ClassSummary> supports, double epsilon_scale) {
  if (supports.size() < 2) fail(ErrorKind::InsufficientData, "need at least two support classes");
  Vector out(supports.size());
  std::optional<GaussianFactor> qf;
  if (kind == MetricKind::Kl || kind == MetricKind::Wass)
    qf = factorize(fit_gaussian(query.local, epsilon_scale));
  for (std::size_t n = 0; n < supports.size(); ++n) {
    try {
      const ClassSummary& s = supports[n];
      switch (kind) {
        case MetricKind::Kl: out[n] = kl_gaussian(*qf, s.gaussian); break;
        case MetricKind::Wass:
          out[n] = s.sigma_sqrt ? wasserstein2_sq(qf->stats, s.gaussian.stats, *s.sigma_sqrt)
                                : wasserstein2_sq(qf->stats, s.gaussian.stats);
          break;
        case MetricKind::Covar: out[n] = covar_metric(query.local, s.gaussian.stats); break;
        default: out[n] = global_metric(kind, query.global, s.prototype.vector); break;
      }
    } catch (Error& e) {
      e.at_class(n);
      throw;
    }
  }
  return out;
}

Matrix kl_distance_matrix(std::span<const GaussianFactor> queries,
                          std::span<const GaussianFactor> supports) {
  Matrix d(queries.size(), supports.size());
  for (std::size_t i = 0; i < queries.size(); ++i)
    for (std::size_t n = 0; n < supports.size(); ++n) d(i, n) = kl_gaussian(queries[i], supports[n]);
  return d;
}

void kl_distance_matrix_backward(std::span<const GaussianFactor> queries,
                                 std::span<const GaussianFactor> supports, const Matrix& grad_d,
                                 std::vector<GaussianAdjoint>& query_grads,
                                 std::vector<GaussianAdjoint>& support_grads) {
  const std::size_t nq = queries.size(), ns = supports.size();
  if (grad_d.rows() != nq || grad_d.cols() != ns)
    fail(ErrorKind::DimensionMismatch, "kl backward: gradient shape does not match pairs");
  if (nq == 0 || ns == 0) return;
  const std::size_t c = queries.front().stats.dim();

  std::vector<Matrix> s_inv(ns);
  for (std::size_t n = 0; n < ns; ++n) s_inv[n] = spd_inverse_factored(supports[n].chol);

  query_grads.assign(nq, GaussianAdjoint{Matrix(c, c), Vector(c, 0.0)});
  support_grads.assign(ns, GaussianAdjoint{Matrix(c, c), Vector(c, 0.0)});
  // Per support class: Σ_i w·(Σ_Q + ΔμΔμᵀ), sandwiched by Σ_S⁻¹ afterwards.
  std::vector<Matrix> s_accum(ns, Matrix(c, c));
  Vector w_sum(ns, 0.0);

  Vector diff(c);
  for (std::size_t i = 0; i < nq; ++i) {
    const GaussianFactor& q = queries[i];
    const Matrix q_inv = spd_inverse_factored(q.chol);
    double w_row = 0.0;
    GaussianAdjoint& gq = query_grads[i];
    for (std::size_t n = 0; n < ns; ++n) {
      const double w = grad_d(i, n);
      if (w == 0.0) continue;
      w_row += w;
      w_sum[n] += w;
      const GaussianFactor& s = supports[n];
      for (std::size_t j = 0; j < c; ++j) diff[j] = s.stats.mu[j] - q.stats.mu[j];
      const Vector sd = matvec(s_inv[n], diff);
      for (std::size_t j = 0; j < c; ++j) {
        gq.mu[j] -= w * sd[j];
        support_grads[n].mu[j] += w * sd[j];
      }
      auto gqs = gq.sigma.data();
      auto si = s_inv[n].data();
      for (std::size_t k = 0; k < gqs.size(); ++k) gqs[k] += 0.5 * w * si[k];
      Matrix& acc = s_accum[n];
      for (std::size_t a = 0; a < c; ++a) {
        double* arow = acc.row(a).data();
        const double* qrow = q.stats.sigma.row(a).data();
        const double wa = w * diff[a];
        for (std::size_t b = 0; b < c; ++b) arow[b] += w * qrow[b] + wa * diff[b];
      }
    }
    if (w_row != 0.0) {
      auto gqs = gq.sigma.data();
      auto qi = q_inv.data();
      for (std::size_t k = 0; k < gqs.size(); ++k) gqs[k] -= 0.5 * w_row * qi[k];
    }
  }

  for (std::size_t n = 0; n < ns; ++n) {
    const Matrix sandwich = matmul(matmul(s_inv[n], s_accum[n]), s_inv[n]);
    auto g = support_grads[n].sigma.data();
    auto si = s_inv[n].data();
    auto sw = sandwich.data();
    for (std::size_t k = 0; k < g.size(); ++k) g[k] = 0.5 * (w_sum[n] * si[k] - sw[k]);
  }
}

}  // namespace stn
