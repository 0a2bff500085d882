#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "stn/episodic.hpp"
#include "stn/error.hpp"

namespace stn {

namespace {

std::vector<Matrix*> tensors_of(EncoderParams& p) {
  std::vector<Matrix*> out;
  p.visit([&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

std::vector<const Matrix*> tensors_of(const EncoderParams& p) {
  std::vector<const Matrix*> out;
  p.visit([&](const std::string&, const Matrix& m) { out.push_back(&m); });
  return out;
}

EncoderParams add(const EncoderParams& a, const EncoderParams& b) {
  EncoderParams out = a;
  auto dst = tensors_of(out);
  auto src = tensors_of(b);
  for (std::size_t t = 0; t < dst.size(); ++t) {
    auto d = dst[t]->data();
    auto s = src[t]->data();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] += s[k];
  }
  return out;
}

double fused_accuracy(const EncoderParams& global, const EncoderParams& local, std::span<const Episode> episodes,
                      const RunConfig& run) {
  if (episodes.empty()) return std::numeric_limits<double>::quiet_NaN();
  const Fuser fuser = manual_fuser(run.fusion);
  double sum = 0.0;
  for (const Episode& ep : episodes) {
    const TaskScores scores = score_episode(global, local, ep, run.epsilon_scale, {MetricKind::Sqr}, {MetricKind::Kl});
    sum += evaluate_scores(std::span(&scores, 1), MetricKind::Kl, MetricKind::Sqr, fuser).mean;
  }
  return sum / static_cast<double>(episodes.size());
}

}  // namespace

AdamW::AdamW(const EncoderParams& shape, const RunConfig& run)
    : m_(zeros_like(shape)),
      v_(zeros_like(shape)),
      beta1_(run.beta1),
      beta2_(run.beta2),
      eps_(run.adam_eps),
      weight_decay_(run.weight_decay) {}

void AdamW::step(EncoderParams& params, const EncoderParams& grad, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  auto p = tensors_of(params);
  auto g = tensors_of(grad);
  auto m = tensors_of(m_);
  auto v = tensors_of(v_);
  for (std::size_t t = 0; t < p.size(); ++t) {
    auto pd = p[t]->data();
    auto gd = g[t]->data();
    auto md = m[t]->data();
    auto vd = v[t]->data();
    for (std::size_t k = 0; k < pd.size(); ++k) {
      pd[k] *= 1.0 - lr * weight_decay_;
      md[k] = beta1_ * md[k] + (1.0 - beta1_) * gd[k];
      vd[k] = beta2_ * vd[k] + (1.0 - beta2_) * gd[k] * gd[k];
      pd[k] -= lr * (md[k] / bc1) / (std::sqrt(vd[k] / bc2) + eps_);
    }
  }
}

double cosine_lr(const RunConfig& run, std::size_t step, std::size_t total) {
  if (total == 0) return run.lr;
  const double progress = static_cast<double>(step) / static_cast<double>(total);
  return run.lr_min + 0.5 * (run.lr - run.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

std::string TrainingLog::steps_csv() const {
  std::ostringstream out;
  out << "epoch,episode,lr,loss_global,loss_local\n";
  for (const StepRecord& s : steps)
    out << s.epoch << ',' << s.episode << ',' << format_double(s.lr) << ',' << format_double(s.loss_global) << ','
        << format_double(s.loss_local) << '\n';
  return out.str();
}

std::string TrainingLog::epochs_csv() const {
  std::ostringstream out;
  out << "epoch,mean_loss_global,mean_loss_local,val_accuracy,best\n";
  for (const EpochRecord& e : epochs)
    out << e.epoch << ',' << format_double(e.mean_loss_global) << ',' << format_double(e.mean_loss_local) << ','
        << (std::isnan(e.val_accuracy) ? std::string("nan") : format_double(e.val_accuracy)) << ','
        << (e.best ? 1 : 0) << '\n';
  return out.str();
}

TrainResult meta_train(const RunConfig& run, const Dataset& dataset, const TrainOptions& options) {
  run.validate();
  const Dataset train = dataset.subset(Split::Train);
  const Dataset val = dataset.subset(Split::Val);

  TrainResult result;
  result.global = init_params(run.encoder, derive_seed(run.seed, 1));
  result.local = run.share_params ? result.global : init_params(run.encoder, derive_seed(run.seed, 2));
  if (run.epochs == 0 || run.episodes_per_epoch == 0) return result;

  std::vector<Episode> val_episodes;
  if (val.classes.size() >= run.n_way) {
    std::mt19937_64 val_rng(derive_seed(run.seed, 4));
    for (std::size_t i = 0; i < run.val_episodes; ++i)
      val_episodes.push_back(sample_episode(val, run.n_way, run.k_shot, run.t_query, val_rng));
  }

  EncoderParams& global = result.global;
  EncoderParams& local = result.local;
  AdamW opt_global(global, run), opt_local(local, run);
  std::mt19937_64 rng(derive_seed(run.seed, 3));
  const std::size_t total = run.epochs * run.episodes_per_epoch;
  const std::size_t clamped_before = probability_clamp_count();
  EncoderParams best_global = global, best_local = local;
  double best_acc = -std::numeric_limits<double>::infinity();
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < run.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t e = 0; e < run.episodes_per_epoch; ++e, ++step) {
      const Episode ep = sample_episode(train, run.n_way, run.k_shot, run.t_query, rng);
      const std::vector<Image> batch = episode_batch(ep);
      const double lr = cosine_lr(run, step, total);
      GradResult g_global, g_local;
      try {
        g_global = grad(global, global_branch_loss(ep), batch);
        g_local = grad(run.share_params ? global : local, local_branch_loss(ep, run.epsilon_scale), batch);
      } catch (const Error& err) {
        if (err.kind() != ErrorKind::NonFiniteLoss) throw;
        save_episode(options.replay_path, ep);
        fail(ErrorKind::NonFiniteLoss, std::string(err.what()) + " at epoch " + std::to_string(epoch) +
                                           ", episode " + std::to_string(e) + "; episode saved to " +
                                           options.replay_path.string());
      }
      if (run.share_params) {
        opt_global.step(global, add(g_global.grad, g_local.grad), lr);
        local = global;
      } else {
        opt_global.step(global, g_global.grad, lr);
        opt_local.step(local, g_local.grad, lr);
      }
      result.log.steps.push_back({epoch, e, lr, g_global.loss, g_local.loss});
      rec.mean_loss_global += g_global.loss;
      rec.mean_loss_local += g_local.loss;
    }
    rec.mean_loss_global /= static_cast<double>(run.episodes_per_epoch);
    rec.mean_loss_local /= static_cast<double>(run.episodes_per_epoch);
    rec.val_accuracy = fused_accuracy(global, local, val_episodes, run);
    // Without a validation split the latest epoch is kept.
    if (val_episodes.empty() || rec.val_accuracy > best_acc) {
      best_acc = rec.val_accuracy;
      best_global = global;
      best_local = local;
      rec.best = true;
    }
    result.log.epochs.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }
  result.global = std::move(best_global);
  result.local = std::move(best_local);
  result.log.clamped_probabilities = probability_clamp_count() - clamped_before;
  return result;
}

}  // namespace stn
