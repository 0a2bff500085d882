#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stn/encoder.hpp"
#include "stn/numerics.hpp"

namespace stn {

/// Every kind is oriented as a distance: smaller means more similar.
enum class MetricKind { Dot, Abs, Cos, Sqr, Wass, Covar, Kl };

bool is_global(MetricKind kind) noexcept;
std::string_view to_string(MetricKind kind) noexcept;
/// Accepts dot|abs|cos|sqr|wass|covar|kl; throws InvalidConfig otherwise.
MetricKind parse_metric_kind(std::string_view name);

struct GlobalPrototype {
  Vector vector;
};

/// Mean of the K class embeddings of one support class.
GlobalPrototype prototype_global(std::span<const Vector> class_embeddings);

double euclidean_sq(std::span<const double> q, std::span<const double> s);
inline double euclidean_sq(const GlobalPrototype& q, const GlobalPrototype& s) {
  return euclidean_sq(q.vector, s.vector);
}

/// dot → −⟨q,s⟩, abs → Σ|qᵢ−sᵢ|, cos → 1 − cosine, sqr → ‖q−s‖².
double global_metric(MetricKind kind, std::span<const double> q, std::span<const double> s);

/// A Gaussian together with its Cholesky factor, so repeated divergences
/// against the same distribution factor it once.
struct GaussianFactor {
  GaussianStats stats;
  Matrix chol;
  double log_det = 0.0;
};
GaussianFactor factorize(GaussianStats stats);

/// KL(Q‖S) = ½(tr(Σ_S⁻¹Σ_Q) + ln(detΣ_S/detΣ_Q) + (μ_S−μ_Q)ᵀΣ_S⁻¹(μ_S−μ_Q) − c),
/// evaluated with triangular solves only.
double kl_gaussian(const GaussianStats& q, const GaussianStats& s);
double kl_gaussian(const GaussianFactor& q, const GaussianFactor& s);

/// Squared 2-Wasserstein distance between Gaussians.
double wasserstein2_sq(const GaussianStats& q, const GaussianStats& s);
/// Variant reusing a precomputed Σ_S^{1/2}.
double wasserstein2_sq(const GaussianStats& q, const GaussianStats& s, const Matrix& sigma_s_sqrt);

/// −(1/M)·Σᵢ q̂ᵢᵀ Σ_S q̂ᵢ over unit-normalized query locals q̂ᵢ.
double covar_metric(const Matrix& query_locals, const GaussianStats& s);

/// Everything a metric needs about one support class.
struct ClassSummary {
  GlobalPrototype prototype;
  GaussianFactor gaussian;  // fit to all K·M pooled support locals
  std::optional<Matrix> sigma_sqrt;
};

/// Builds the summary of one class from its K support embeddings. The
/// matrix square root is only computed when `with_sqrt` is set.
ClassSummary summarize_class(std::span<const DualEmbedding> shots, double epsilon_scale,
                             bool with_sqrt = false);

/// Distance from one query to each of N ≥ 2 support classes. Errors carry
/// the offending class index.
Vector class_distance_vector(MetricKind kind, const DualEmbedding& query,
                             std::span<const ClassSummary> supports, double epsilon_scale);

/// Pairwise KL(Q_i‖S_n) over factored Gaussians, Q×N.
Matrix kl_distance_matrix(std::span<const GaussianFactor> queries,
                          std::span<const GaussianFactor> supports);

struct GaussianAdjoint {
  Matrix sigma;
  Vector mu;
};

/// Adjoint of kl_distance_matrix: given dL/dD (Q×N), returns dL/dΣ and dL/dμ
/// for every query and support Gaussian.
void kl_distance_matrix_backward(std::span<const GaussianFactor> queries,
                                 std::span<const GaussianFactor> supports, const Matrix& grad_d,
                                 std::vector<GaussianAdjoint>& query_grads,
                                 std::vector<GaussianAdjoint>& support_grads);

}  // namespace stn
