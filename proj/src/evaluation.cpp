#include <cmath>
#include <exception>
#include <sstream>

#include "stn/episodic.hpp"
#include "stn/error.hpp"
#include "stn/kernels.hpp"

namespace stn {

using json = nlohmann::json;

const Matrix& TaskScores::at(MetricKind kind) const {
  for (const auto& [k, m] : distances)
    if (k == kind) return m;
  fail(ErrorKind::InvalidConfig, "task was not scored with metric '" + std::string(to_string(kind)) + "'");
}

TaskScores score_episode(const EncoderParams& global, const EncoderParams& local, const Episode& episode,
                         double epsilon_scale, std::span<const MetricKind> global_kinds,
                         std::span<const MetricKind> local_kinds) {
  const std::vector<Image> batch = episode_batch(episode);
  const std::size_t n_support = episode.support.size(), q = episode.query.size(), n_way = episode.n_way;

  TaskScores out;
  out.labels = episode.query_labels;
  auto summaries = [&](const std::vector<DualEmbedding>& emb, bool with_sqrt) {
    std::vector<ClassSummary> s;
    for (std::size_t n = 0; n < n_way; ++n)
      s.push_back(summarize_class(std::span(emb).subspan(n * episode.k_shot, episode.k_shot), epsilon_scale,
                                  with_sqrt));
    return s;
  };
  auto score = [&](const std::vector<DualEmbedding>& emb, const std::vector<ClassSummary>& s, MetricKind kind) {
    Matrix d(q, n_way);
    for (std::size_t i = 0; i < q; ++i) {
      const Vector row = class_distance_vector(kind, emb[n_support + i], s, epsilon_scale);
      std::copy(row.begin(), row.end(), d.row(i).begin());
    }
    out.distances.emplace_back(kind, std::move(d));
  };

  if (!global_kinds.empty()) {
    const auto emb = encode_batch(global, batch);
    const auto s = summaries(emb, false);
    for (MetricKind kind : global_kinds) score(emb, s, kind);
  }
  if (!local_kinds.empty()) {
    const auto emb = encode_batch(local, batch);
    bool wass = false;
    for (MetricKind kind : local_kinds) wass = wass || kind == MetricKind::Wass;
    const auto s = summaries(emb, wass);
    for (MetricKind kind : local_kinds) score(emb, s, kind);
  }
  return out;
}

std::vector<TaskScores> score_tasks(const EncoderParams& global, const EncoderParams& local, const Dataset& dataset,
                                    const EvalSpec& spec) {
  if (spec.n_way < 2) fail(ErrorKind::InvalidConfig, "evaluation needs at least 2 classes per task");
  for (MetricKind k : spec.global_kinds)
    if (!is_global(k)) fail(ErrorKind::InvalidConfig, "'" + std::string(to_string(k)) + "' is not a global metric");
  for (MetricKind k : spec.local_kinds)
    if (is_global(k)) fail(ErrorKind::InvalidConfig, "'" + std::string(to_string(k)) + "' is not a local metric");
  // Fail early and serially on an impossible episode shape.
  {
    std::mt19937_64 probe(0);
    if (spec.tasks > 0) sample_episode(dataset, spec.n_way, spec.k_shot, spec.t_query, probe);
  }

  std::vector<TaskScores> out(spec.tasks);
  std::vector<std::exception_ptr> errors(spec.tasks);
#pragma omp parallel for schedule(dynamic) num_threads(kernels::max_threads())
  for (std::ptrdiff_t ti = 0; ti < static_cast<std::ptrdiff_t>(spec.tasks); ++ti) {
    const auto t = static_cast<std::size_t>(ti);
    try {
      std::mt19937_64 rng(derive_seed(spec.seed, spec.first_task + t));
      const Episode ep = sample_episode(dataset, spec.n_way, spec.k_shot, spec.t_query, rng);
      out[t] = score_episode(global, local, ep, spec.epsilon_scale, spec.global_kinds, spec.local_kinds);
    } catch (...) {
      errors[t] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

Fuser manual_fuser(const FusionConfig& config) {
  config.validate();
  return [config](std::span<const double> d_local, std::span<const double> d_global) {
    return fuse_manual(d_local, d_global, config);
  };
}

Fuser adaptive_fuser(const AdaptiveFusionParams& params) {
  return [params](std::span<const double> d_local, std::span<const double> d_global) {
    return fuse_adaptive(d_local, d_global, params);
  };
}

EvalReport summarize_accuracies(std::vector<double> task_accuracies, json config) {
  EvalReport r;
  r.task_accuracies = std::move(task_accuracies);
  r.config = std::move(config);
  const std::size_t t = r.task_accuracies.size();
  if (t == 0) return r;
  double sum = 0.0;
  for (double a : r.task_accuracies) sum += a;
  r.mean = sum / static_cast<double>(t);
  if (t > 1) {
    double ss = 0.0;
    for (double a : r.task_accuracies) ss += (a - r.mean) * (a - r.mean);
    r.ci95 = 1.96 * std::sqrt(ss / static_cast<double>(t - 1)) / std::sqrt(static_cast<double>(t));
  }
  return r;
}

EvalReport evaluate_with(std::span<const TaskScores> tasks,
                         const std::function<Vector(const TaskScores&, std::size_t)>& similarity, json config) {
  std::vector<double> acc;
  acc.reserve(tasks.size());
  for (const TaskScores& task : tasks) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < task.labels.size(); ++i)
      if (classify(similarity(task, i)) == task.labels[i]) ++correct;
    acc.push_back(task.labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(task.labels.size()));
  }
  return summarize_accuracies(std::move(acc), std::move(config));
}

EvalReport evaluate_scores(std::span<const TaskScores> tasks, MetricKind local_kind, MetricKind global_kind,
                           const Fuser& fuser, json config) {
  return evaluate_with(
      tasks,
      [&](const TaskScores& task, std::size_t i) {
        return fuser(task.at(local_kind).row(i), task.at(global_kind).row(i));
      },
      std::move(config));
}

EvalReport evaluate(const EncoderParams& global, const EncoderParams& local, const Dataset& dataset,
                    const RunConfig& run, std::size_t tasks) {
  run.validate();
  EvalSpec spec;
  spec.n_way = run.n_way;
  spec.k_shot = run.k_shot;
  spec.t_query = run.t_query;
  spec.tasks = tasks;
  spec.seed = run.seed;
  spec.epsilon_scale = run.epsilon_scale;
  const auto scores = score_tasks(global, local, dataset, spec);
  json config = to_json(run);
  config["tasks"] = tasks;
  return evaluate_scores(scores, MetricKind::Kl, MetricKind::Sqr, manual_fuser(run.fusion), std::move(config));
}

AdaptiveFusionParams fit_adaptive_fusion(const EncoderParams& global, const EncoderParams& local, const Dataset& train,
                                         const RunConfig& run, const AdaptiveFitOptions& options) {
  EvalSpec spec;
  spec.n_way = run.n_way;
  spec.k_shot = run.k_shot;
  spec.t_query = run.t_query;
  spec.tasks = options.tasks;
  spec.seed = derive_seed(options.seed, 5);
  spec.epsilon_scale = run.epsilon_scale;
  const auto scores = score_tasks(global, local, train, spec);

  AdaptiveFusionParams params;
  double m[2] = {0.0, 0.0}, v[2] = {0.0, 0.0};
  std::size_t t = 0;
  for (std::size_t pass = 0; pass < options.passes; ++pass)
    for (const TaskScores& task : scores) {
      double g[2];
      fuse_adaptive_train(task.at(MetricKind::Kl), task.at(MetricKind::Sqr), task.labels, params, g);
      ++t;
      for (int b = 0; b < 2; ++b) {
        m[b] = 0.9 * m[b] + 0.1 * g[b];
        v[b] = 0.999 * v[b] + 0.001 * g[b] * g[b];
        const double mh = m[b] / (1.0 - std::pow(0.9, static_cast<double>(t)));
        const double vh = v[b] / (1.0 - std::pow(0.999, static_cast<double>(t)));
        params.omega[b] -= options.lr * mh / (std::sqrt(vh) + 1e-8);
      }
    }
  return params;
}

std::string eval_csv(const EvalReport& report, std::size_t n_way, std::size_t k_shot) {
  std::ostringstream out;
  out << "task_id,n_way,k_shot,accuracy\n";
  for (std::size_t t = 0; t < report.task_accuracies.size(); ++t)
    out << t << ',' << n_way << ',' << k_shot << ',' << format_double(report.task_accuracies[t]) << '\n';
  return out.str();
}

json eval_summary(const EvalReport& report) {
  return {{"mean", report.mean},
          {"ci95", report.ci95},
          {"tasks", report.task_accuracies.size()},
          {"config", report.config}};
}

}  // namespace stn
