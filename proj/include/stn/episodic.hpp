#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stn/dataset.hpp"
#include "stn/encoder.hpp"
#include "stn/fusion.hpp"
#include "stn/metrics.hpp"

namespace stn {

struct RunConfig {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t t_query = 15;
  std::size_t epochs = 30;
  std::size_t episodes_per_epoch = 50;
  double lr = 1e-5;
  double lr_min = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.05;
  std::uint64_t seed = 0;
  FusionConfig fusion;
  EncoderConfig encoder;
  double epsilon_scale = 1e-2;
  // Both branches train one parameter set (parameter-sharing ablation).
  bool share_params = false;
  // Fixed validation episodes scored after every epoch.
  std::size_t val_episodes = 20;

  /// Throws InvalidConfig.
  void validate() const;
};

nlohmann::json to_json(const EncoderConfig& config);
nlohmann::json to_json(const FusionConfig& config);
nlohmann::json to_json(const RunConfig& config);
/// Missing keys keep their defaults; unknown keys and bad values throw InvalidConfig.
EncoderConfig encoder_config_from_json(const nlohmann::json& j);
FusionConfig fusion_config_from_json(const nlohmann::json& j);
RunConfig run_config_from_json(const nlohmann::json& j);

// ---- branch losses ----

/// Softmax of the negated distances, max-shifted.
Vector branch_probabilities(std::span<const double> distances);

inline constexpr double kProbabilityClamp = 1e-30;

/// Mean −ln p[label] over the rows of `probabilities`. True-class
/// probabilities below 1e-30 are clamped and counted.
double branch_loss(const Matrix& probabilities, std::span<const std::size_t> labels);
/// Number of clamped probabilities since process start (or the last reset).
std::size_t probability_clamp_count() noexcept;
void reset_probability_clamp_count() noexcept;

/// Support images (class-major) followed by query images.
std::vector<Image> episode_batch(const Episode& episode);

/// Cross-entropy over squared Euclidean distances from query class tokens to
/// class prototypes. Consumes the outputs of encoding episode_batch.
EmbeddingLoss global_branch_loss(const Episode& episode);
/// Cross-entropy over KL(query Gaussian ‖ class Gaussian) where each query
/// Gaussian is fit to its M patch tokens and each class Gaussian to the
/// pooled K·M support patch tokens.
EmbeddingLoss local_branch_loss(const Episode& episode, double epsilon_scale);

// ---- training ----

struct StepRecord {
  std::size_t epoch = 0;
  std::size_t episode = 0;
  double lr = 0.0;
  double loss_global = 0.0;
  double loss_local = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss_global = 0.0;
  double mean_loss_local = 0.0;
  double val_accuracy = 0.0;  // NaN without a validation split
  bool best = false;
};

struct TrainingLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::size_t clamped_probabilities = 0;

  /// epoch,episode,lr,loss_global,loss_local
  std::string steps_csv() const;
  /// epoch,mean_loss_global,mean_loss_local,val_accuracy,best
  std::string epochs_csv() const;
};

struct TrainOptions {
  // Where an episode producing a non-finite loss is written before aborting.
  std::filesystem::path replay_path = "nonfinite_episode.stnt";
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  EncoderParams global;
  EncoderParams local;
  TrainingLog log;
};

/// Episodic meta-training on the train split; the val split (if present)
/// selects the best epoch by fused accuracy. Throws NonFiniteLoss after
/// writing the offending episode to options.replay_path.
TrainResult meta_train(const RunConfig& run, const Dataset& dataset, const TrainOptions& options = {});

/// AdamW over one parameter set.
class AdamW {
 public:
  AdamW(const EncoderParams& shape, const RunConfig& run);
  void step(EncoderParams& params, const EncoderParams& grad, double lr);

 private:
  EncoderParams m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
};

/// Cosine decay from run.lr at step 0 towards run.lr_min at `total` steps.
double cosine_lr(const RunConfig& run, std::size_t step, std::size_t total);

// ---- evaluation ----

struct EvalSpec {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t t_query = 15;
  std::size_t tasks = 200;
  // Task i draws from derive_seed(seed, first_task + i).
  std::size_t first_task = 0;
  std::uint64_t seed = 0;
  double epsilon_scale = 1e-2;
  std::vector<MetricKind> global_kinds{MetricKind::Sqr};
  std::vector<MetricKind> local_kinds{MetricKind::Kl};
};

/// Per-task distance matrices (queries × classes) for every requested kind.
struct TaskScores {
  std::vector<std::size_t> labels;
  std::vector<std::pair<MetricKind, Matrix>> distances;

  const Matrix& at(MetricKind kind) const;
};

/// Encodes one episode with both encoders and scores every query.
TaskScores score_episode(const EncoderParams& global, const EncoderParams& local, const Episode& episode,
                         double epsilon_scale, std::span<const MetricKind> global_kinds,
                         std::span<const MetricKind> local_kinds);
inline TaskScores score_episode(const EncoderParams& global, const EncoderParams& local, const Episode& episode,
                                double epsilon_scale, std::initializer_list<MetricKind> global_kinds,
                                std::initializer_list<MetricKind> local_kinds) {
  return score_episode(global, local, episode, epsilon_scale, std::span(global_kinds.begin(), global_kinds.size()),
                       std::span(local_kinds.begin(), local_kinds.size()));
}

/// Samples `spec.tasks` episodes and scores them with both encoders.
/// Parallel over tasks, deterministic.
std::vector<TaskScores> score_tasks(const EncoderParams& global, const EncoderParams& local,
                                    const Dataset& dataset, const EvalSpec& spec);

/// Similarity over N classes from one query's local and global distance rows.
using Fuser = std::function<Vector(std::span<const double> d_local, std::span<const double> d_global)>;

Fuser manual_fuser(const FusionConfig& config);
Fuser adaptive_fuser(const AdaptiveFusionParams& params);

struct EvalReport {
  std::vector<double> task_accuracies;
  double mean = 0.0;
  double ci95 = 0.0;
  nlohmann::json config;
};

/// mean and 1.96·std/√t (sample std; zero for a single task).
EvalReport summarize_accuracies(std::vector<double> task_accuracies, nlohmann::json config = {});

/// Per-task accuracy of argmax(similarity(task, query row)).
EvalReport evaluate_with(std::span<const TaskScores> tasks,
                         const std::function<Vector(const TaskScores&, std::size_t query)>& similarity,
                         nlohmann::json config = {});

/// Fused accuracy for a local/global kind pair.
EvalReport evaluate_scores(std::span<const TaskScores> tasks, MetricKind local_kind,
                           MetricKind global_kind, const Fuser& fuser, nlohmann::json config = {});

/// Fused KL/Euclidean evaluation with run.fusion (manual mode).
EvalReport evaluate(const EncoderParams& global, const EncoderParams& local, const Dataset& dataset,
                    const RunConfig& run, std::size_t tasks);

struct AdaptiveFitOptions {
  std::size_t tasks = 100;
  std::size_t passes = 5;
  double lr = 1e-2;
  std::uint64_t seed = 0;
};

/// Trains ω of the adaptive head on train-split scores with both encoders
/// frozen, Adam on the mean per-task cross-entropy.
AdaptiveFusionParams fit_adaptive_fusion(const EncoderParams& global, const EncoderParams& local,
                                         const Dataset& train, const RunConfig& run,
                                         const AdaptiveFitOptions& options = {});

/// task_id,n_way,k_shot,accuracy
std::string eval_csv(const EvalReport& report, std::size_t n_way, std::size_t k_shot);
/// {mean, ci95, tasks, config}
nlohmann::json eval_summary(const EvalReport& report);

// ---- files ----

/// Writes params to `path` and {"encoder", "run"} to `path` + ".json".
void save_checkpoint(const std::filesystem::path& path, const EncoderParams& params, const RunConfig& run);

struct Checkpoint {
  EncoderParams params;
  RunConfig run;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save_episode(const std::filesystem::path& path, const Episode& episode);
Episode load_episode(const std::filesystem::path& path);

/// Formats doubles with round-trip precision.
std::string format_double(double v);

}  // namespace stn
