#pragma once

#include <cstddef>
#include <span>
#include <string_view>

#include "stn/numerics.hpp"

namespace stn {

enum class FusionMode { Manual, Adaptive };

std::string_view to_string(FusionMode mode) noexcept;
FusionMode parse_fusion_mode(std::string_view name);

struct FusionConfig {
  double alpha = 0.7;  // weight of the local (KL) branch
  bool normalize = true;
  FusionMode mode = FusionMode::Manual;

  /// Throws InvalidConfig unless alpha ∈ [0,1].
  void validate() const;
};

/// Default fusion weight for a K-shot episode: 0.7 for 1-shot, 0.6 otherwise.
double default_alpha(std::size_t k_shot) noexcept;

/// Learned two-weight fusion head with per-branch standardization in front.
/// Index 0 is the local (KL) branch, index 1 the global (Euclidean) branch.
struct AdaptiveFusionParams {
  double omega[2] = {0.5, 0.5};
  double running_mean[2] = {0.0, 0.0};
  double running_var[2] = {1.0, 1.0};
  double momentum = 0.1;
};

/// v/‖v‖, or v unchanged when ‖v‖ ≤ 1e-12.
Vector l2_normalize(std::span<const double> v);

/// −α·d_kl − (1−α)·d_ed, each input first L2-normalized when config.normalize.
Vector fuse_manual(std::span<const double> d_kl, std::span<const double> d_ed,
                   const FusionConfig& config);

/// Inference path: standardize each branch with the running statistics, then
/// −ω₁·d̃_kl − ω₂·d̃_ed.
Vector fuse_adaptive(std::span<const double> d_kl, std::span<const double> d_ed,
                     const AdaptiveFusionParams& params);

/// Training step over a batch of queries (rows of the two Q×N matrices):
/// standardizes with batch statistics, evaluates mean softmax cross-entropy
/// of the fused similarities, fills dL/dω, and folds the batch statistics
/// into the running ones. Returns the loss.
double fuse_adaptive_train(const Matrix& d_kl, const Matrix& d_ed, std::span<const std::size_t> labels,
                           AdaptiveFusionParams& params, double grad_omega[2]);

/// argmax, lowest index on ties. Throws NonFiniteInput.
std::size_t classify(std::span<const double> similarity);

}  // namespace stn
