// Command-line front end: data generation, training, evaluation and the
// ablation drivers. Exit codes: 1 usage, 2 data/format, 3 numerical.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "stn/dataset.hpp"
#include "stn/episodic.hpp"
#include "stn/error.hpp"
#include "stn/kernels.hpp"
#include "stn/tensor_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace stn;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidConfig:
    case ErrorKind::InvalidSpec:
      return 1;
    case ErrorKind::FormatError:
    case ErrorKind::ChecksumMismatch:
    case ErrorKind::InsufficientData:
    case ErrorKind::DimensionMismatch:
    case ErrorKind::LengthMismatch:
      return 2;
    default:
      return 3;
  }
}

fs::path manifest_path(const fs::path& data) {
  return fs::is_directory(data) ? data / "manifest.json" : data;
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

bool parse_on_off(const std::string& v) {
  if (v == "on") return true;
  if (v == "off") return false;
  throw UsageError("expected on|off, got '" + v + "'");
}

std::vector<double> parse_grid(const std::string& spec) {
  std::vector<double> parts;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ':')) {
    try {
      std::size_t used = 0;
      parts.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("bad grid '" + spec + "', expected start:stop:step");
    }
  }
  if (parts.size() != 3 || !(parts[2] > 0.0) || parts[1] < parts[0])
    throw UsageError("bad grid '" + spec + "', expected start:stop:step with step > 0");
  std::vector<double> grid;
  const auto count = static_cast<std::size_t>(std::floor((parts[1] - parts[0]) / parts[2] + 1e-9)) + 1;
  for (std::size_t i = 0; i < count; ++i) {
    // Round to the step's resolution so 0.1·3 prints as 0.3.
    const double v = parts[0] + static_cast<double>(i) * parts[2];
    grid.push_back(std::round(v * 1e9) / 1e9);
  }
  return grid;
}

std::vector<MetricKind> parse_kinds(const std::string& list, bool global) {
  std::vector<MetricKind> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const MetricKind k = parse_metric_kind(item);
    if (is_global(k) != global)
      throw UsageError("'" + item + "' is not a " + (global ? "global" : "local") + " metric");
    out.push_back(k);
  }
  if (out.empty()) throw UsageError("empty metric list");
  return out;
}

// Flags shared by every evaluation-style subcommand.
struct EvalFlags {
  std::string data, ckpt_global, ckpt_local, out;
  double alpha = -1.0;
  std::size_t tasks = 200, n = 5, k = 1, t = 15;
  std::uint64_t seed = 0;
  double epsilon_scale = 1e-2;
  std::string normalize = "on";

  void add(CLI::App* cmd, bool with_normalize = true) {
    cmd->add_option("--data", data, "Dataset manifest (or its directory)")->required();
    cmd->add_option("--ckpt-global", ckpt_global, "Global-branch checkpoint")->required();
    cmd->add_option("--ckpt-local", ckpt_local, "Local-branch checkpoint")->required();
    cmd->add_option("--out", out, "Output directory")->required();
    cmd->add_option("--alpha", alpha, "Fusion weight of the local branch (auto: 0.7 for 1-shot, 0.6 otherwise)")
        ->default_str("auto");
    cmd->add_option("--tasks", tasks, "Evaluation tasks")->capture_default_str();
    cmd->add_option("--n", n, "Classes per task")->capture_default_str();
    cmd->add_option("--k", k, "Support shots per class")->capture_default_str();
    cmd->add_option("--t", t, "Queries per class")->capture_default_str();
    cmd->add_option("--seed", seed, "Task sampling seed")->capture_default_str();
    cmd->add_option("--epsilon-scale", epsilon_scale, "Covariance shrinkage scale")->capture_default_str();
    if (with_normalize)
      cmd->add_option("--normalize", normalize, "L2-normalize branch distances before fusion (on|off)")
          ->capture_default_str();
  }

  double resolved_alpha() const { return alpha < 0.0 ? default_alpha(k) : alpha; }

  EvalSpec spec() const {
    EvalSpec s;
    s.n_way = n;
    s.k_shot = k;
    s.t_query = t;
    s.tasks = tasks;
    s.seed = seed;
    s.epsilon_scale = epsilon_scale;
    return s;
  }

  json to_json() const {
    return {{"data", data},   {"ckpt_global", ckpt_global}, {"ckpt_local", ckpt_local}, {"alpha", resolved_alpha()},
            {"tasks", tasks}, {"n_way", n},                 {"k_shot", k},               {"t_query", t},
            {"seed", seed},   {"epsilon_scale", epsilon_scale}, {"normalize", normalize}};
  }
};

struct Loaded {
  Dataset test;
  Dataset train;
  EncoderParams global, local;
};

Loaded load_eval_inputs(const EvalFlags& f) {
  if (f.n < 2 || f.k < 1 || f.t < 1) throw UsageError("need --n ≥ 2, --k ≥ 1, --t ≥ 1");
  const Dataset ds = load_dataset(manifest_path(f.data));
  Loaded l;
  l.test = ds.subset(Split::Test);
  l.train = ds.subset(Split::Train);
  if (l.test.classes.empty()) fail(ErrorKind::InsufficientData, "dataset has no test split");
  l.global = load_checkpoint(f.ckpt_global).params;
  l.local = load_checkpoint(f.ckpt_local).params;
  return l;
}

void write_report(const fs::path& dir, const std::string& stem, const EvalReport& r, std::size_t n, std::size_t k) {
  write_file_atomic(dir / (stem + ".csv"), eval_csv(r, n, k));
  write_json(dir / (stem + ".json"), eval_summary(r));
}

int cmd_gen_synthetic(const std::string& out, const SyntheticSpec& spec) {
  const SyntheticDataset syn = gen_synthetic(spec);
  const auto& cls = syn.dataset.classes;
  const json extra{{"synthetic",
                    {{"classes", spec.classes},
                     {"per_class", spec.per_class},
                     {"image_size", spec.image_size},
                     {"seed", spec.seed},
                     {"same_global", {cls[syn.same_global.first].label, cls[syn.same_global.second].label}},
                     {"same_texture", {cls[syn.same_texture.first].label, cls[syn.same_texture.second].label}}}}};
  save_dataset(out, syn.dataset, extra.dump());
  std::cout << (fs::path(out) / "manifest.json").string() << "\n";
  return 0;
}

int main_impl(int argc, char** argv) {
  CLI::App app{"Dual-branch transformer few-shot classifier"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  // gen-synthetic
  SyntheticSpec syn_spec;
  std::string syn_out;
  auto* gen = app.add_subcommand("gen-synthetic", "Generate the procedural confusable-pairs dataset");
  gen->add_option("--out", syn_out, "Output directory")->required();
  gen->add_option("--classes", syn_spec.classes, "Class count (≥ 10)")->capture_default_str();
  gen->add_option("--per-class", syn_spec.per_class, "Images per class")->capture_default_str();
  gen->add_option("--image-size", syn_spec.image_size, "Image side in pixels")->capture_default_str();
  gen->add_option("--seed", syn_spec.seed, "Generator seed")->capture_default_str();

  // train
  std::string train_data, train_config, train_out;
  RunConfig run_defaults;
  std::optional<std::uint64_t> t_seed;
  std::optional<std::size_t> t_epochs, t_episodes, t_n, t_k, t_t;
  bool t_share = false;
  auto* train = app.add_subcommand("train", "Meta-train both branches");
  train->add_option("--data", train_data, "Dataset manifest (or its directory)")->required();
  train->add_option("--config", train_config, "Run config JSON; flags below override it");
  train->add_option("--out", train_out, "Output directory")->required();
  train->add_option("--seed", t_seed, "Run seed")->default_str(std::to_string(run_defaults.seed));
  train->add_option("--epochs", t_epochs, "Epochs")->default_str(std::to_string(run_defaults.epochs));
  train->add_option("--episodes-per-epoch", t_episodes, "Episodes per epoch")
      ->default_str(std::to_string(run_defaults.episodes_per_epoch));
  train->add_option("--n", t_n, "Classes per episode")->default_str(std::to_string(run_defaults.n_way));
  train->add_option("--k", t_k, "Support shots per class")->default_str(std::to_string(run_defaults.k_shot));
  train->add_option("--t", t_t, "Queries per class")->default_str(std::to_string(run_defaults.t_query));
  train->add_flag("--share-params", t_share, "Both branches train one shared parameter set");

  // eval
  EvalFlags ev;
  auto* eval = app.add_subcommand("eval", "Fused evaluation with confidence interval");
  ev.add(eval);

  // sweep-alpha
  EvalFlags sw;
  std::string grid = "0.1:0.9:0.1";
  auto* sweep = app.add_subcommand("sweep-alpha", "Fused accuracy across a grid of fusion weights");
  sw.add(sweep);
  sweep->add_option("--grid", grid, "start:stop:step")->capture_default_str();

  // ablate-metrics
  EvalFlags am;
  std::string global_kinds = "dot,abs,cos,sqr", local_kinds = "wass,covar,kl", shots = "1,5";
  auto* ablm = app.add_subcommand("ablate-metrics", "Cross table of global × local metrics");
  am.add(ablm);
  ablm->add_option("--global-kinds", global_kinds, "Comma list of dot|abs|cos|sqr")->capture_default_str();
  ablm->add_option("--local-kinds", local_kinds, "Comma list of wass|covar|kl")->capture_default_str();
  ablm->add_option("--shots", shots, "Comma list of support shot counts (overrides --k)")->capture_default_str();

  // ablate-fusion
  EvalFlags af;
  std::string fusion_mode = "manual";
  std::size_t adaptive_tasks = 100;
  auto* ablf = app.add_subcommand("ablate-fusion", "Manual vs adaptive fusion, normalization on/off");
  af.add(ablf);
  ablf->add_option("--mode", fusion_mode, "manual|adaptive")->capture_default_str();
  ablf->add_option("--adaptive-tasks", adaptive_tasks, "Train-split tasks used to fit the adaptive head")
      ->capture_default_str();

  // export-attention
  std::string att_ckpt, att_image, att_out;
  auto* att = app.add_subcommand("export-attention", "Write every attention map for one image");
  att->add_option("--ckpt", att_ckpt, "Encoder checkpoint")->required();
  att->add_option("--image", att_image, "Image tensor file (H×W×C)")->required();
  att->add_option("--out", att_out, "Output tensor file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (*gen) return cmd_gen_synthetic(syn_out, syn_spec);

  if (*train) {
    RunConfig run;
    json cfg = json::object();
    if (!train_config.empty()) {
      const auto bytes = read_file(train_config);
      try {
        cfg = json::parse(bytes.begin(), bytes.end());
      } catch (const json::exception& e) {
        fail(ErrorKind::InvalidConfig, train_config + ": " + e.what());
      }
    }
    if (t_seed) cfg["seed"] = *t_seed;
    if (t_epochs) cfg["epochs"] = *t_epochs;
    if (t_episodes) cfg["episodes_per_epoch"] = *t_episodes;
    if (t_n) cfg["n_way"] = *t_n;
    if (t_k) cfg["k_shot"] = *t_k;
    if (t_t) cfg["t_query"] = *t_t;
    if (t_share) cfg["share_params"] = true;
    run = run_config_from_json(cfg);
    const Dataset ds = load_dataset(manifest_path(train_data));
    const fs::path out = train_out;
    fs::create_directories(out);
    TrainOptions opts;
    opts.replay_path = out / "nonfinite_episode.stnt";
    opts.on_epoch = [&](const EpochRecord& e) {
      std::fprintf(stderr, "epoch %zu/%zu  loss_global %.4f  loss_local %.4f  val %.4f%s\n", e.epoch + 1, run.epochs,
                   e.mean_loss_global, e.mean_loss_local, e.val_accuracy, e.best ? "  *" : "");
    };
    const TrainResult res = meta_train(run, ds, opts);
    save_checkpoint(out / "global.stnt", res.global, run);
    save_checkpoint(out / "local.stnt", res.local, run);
    write_file_atomic(out / "training_log.csv", res.log.steps_csv());
    write_file_atomic(out / "epochs.csv", res.log.epochs_csv());
    write_json(out / "run.json", {{"config", to_json(run)},
                                  {"data", train_data},
                                  {"clamped_probabilities", res.log.clamped_probabilities}});
    if (res.log.clamped_probabilities > 0)
      std::fprintf(stderr, "warning: %zu true-class probabilities clamped at 1e-30\n", res.log.clamped_probabilities);
    return 0;
  }

  if (*eval) {
    const Loaded in = load_eval_inputs(ev);
    FusionConfig fusion{ev.resolved_alpha(), parse_on_off(ev.normalize), FusionMode::Manual};
    const auto scores = score_tasks(in.global, in.local, in.test, ev.spec());
    const EvalReport r = evaluate_scores(scores, MetricKind::Kl, MetricKind::Sqr, manual_fuser(fusion), ev.to_json());
    fs::create_directories(ev.out);
    write_report(ev.out, "eval", r, ev.n, ev.k);
    std::cout << eval_summary(r).dump(2) << "\n";
    return 0;
  }

  if (*sweep) {
    const std::vector<double> alphas = parse_grid(grid);
    for (double a : alphas)
      if (a < 0.0 || a > 1.0) throw UsageError("grid value " + format_double(a) + " is outside [0,1]");
    const Loaded in = load_eval_inputs(sw);
    const bool normalize = parse_on_off(sw.normalize);
    const auto scores = score_tasks(in.global, in.local, in.test, sw.spec());
    json cfg = sw.to_json();
    cfg.erase("alpha");
    cfg["grid"] = grid;
    json rows = json::array();
    std::ostringstream csv;
    csv << "alpha,mean,ci95\n";
    for (double a : alphas) {
      const FusionConfig fusion{a, normalize, FusionMode::Manual};
      const EvalReport r = evaluate_scores(scores, MetricKind::Kl, MetricKind::Sqr, manual_fuser(fusion));
      csv << format_double(a) << ',' << format_double(r.mean) << ',' << format_double(r.ci95) << '\n';
      rows.push_back({{"alpha", a}, {"mean", r.mean}, {"ci95", r.ci95}});
    }
    fs::create_directories(sw.out);
    write_file_atomic(fs::path(sw.out) / "sweep_alpha.csv", csv.str());
    write_json(fs::path(sw.out) / "sweep_alpha.json", {{"rows", rows}, {"config", cfg}});
    std::cout << csv.str();
    return 0;
  }

  if (*ablm) {
    const auto gk = parse_kinds(global_kinds, true);
    const auto lk = parse_kinds(local_kinds, false);
    std::vector<std::size_t> shot_list;
    {
      std::stringstream ss(shots);
      std::string item;
      while (std::getline(ss, item, ',')) {
        try {
          shot_list.push_back(std::stoul(item));
        } catch (const std::exception&) {
          throw UsageError("bad --shots entry '" + item + "'");
        }
        if (shot_list.back() < 1) throw UsageError("--shots entries must be ≥ 1");
      }
    }
    const Loaded in = load_eval_inputs(am);
    const bool normalize = parse_on_off(am.normalize);
    json rows = json::array();
    std::ostringstream csv;
    csv << "k_shot,global_kind,local_kind,alpha,mean,ci95\n";
    for (std::size_t k : shot_list) {
      EvalSpec spec = am.spec();
      spec.k_shot = k;
      spec.global_kinds = gk;
      spec.local_kinds = lk;
      const auto scores = score_tasks(in.global, in.local, in.test, spec);
      const double alpha = am.alpha < 0.0 ? default_alpha(k) : am.alpha;
      for (MetricKind g : gk)
        for (MetricKind l : lk) {
          const FusionConfig fusion{alpha, normalize, FusionMode::Manual};
          const EvalReport r = evaluate_scores(scores, l, g, manual_fuser(fusion));
          csv << k << ',' << to_string(g) << ',' << to_string(l) << ',' << format_double(alpha) << ','
              << format_double(r.mean) << ',' << format_double(r.ci95) << '\n';
          rows.push_back({{"k_shot", k},
                          {"global_kind", std::string(to_string(g))},
                          {"local_kind", std::string(to_string(l))},
                          {"alpha", alpha},
                          {"mean", r.mean},
                          {"ci95", r.ci95}});
        }
    }
    json cfg = am.to_json();
    cfg.erase("k_shot");
    cfg["alpha"] = am.alpha < 0.0 ? json("default") : json(am.alpha);
    cfg["shots"] = shots;
    cfg["global_kinds"] = global_kinds;
    cfg["local_kinds"] = local_kinds;
    fs::create_directories(am.out);
    write_file_atomic(fs::path(am.out) / "ablate_metrics.csv", csv.str());
    write_json(fs::path(am.out) / "ablate_metrics.json", {{"rows", rows}, {"config", cfg}});
    std::cout << csv.str();
    return 0;
  }

  if (*ablf) {
    const FusionMode mode = parse_fusion_mode(fusion_mode);
    const Loaded in = load_eval_inputs(af);
    const bool normalize = parse_on_off(af.normalize);
    const auto scores = score_tasks(in.global, in.local, in.test, af.spec());
    json cfg = af.to_json();
    cfg["mode"] = fusion_mode;
    Fuser fuser;
    if (mode == FusionMode::Adaptive) {
      if (in.train.classes.size() < af.n) fail(ErrorKind::InsufficientData, "adaptive fusion needs a train split");
      RunConfig run;
      run.n_way = af.n;
      run.k_shot = af.k;
      run.t_query = af.t;
      run.epsilon_scale = af.epsilon_scale;
      AdaptiveFitOptions opts;
      opts.tasks = adaptive_tasks;
      opts.seed = af.seed;
      const AdaptiveFusionParams head = fit_adaptive_fusion(in.global, in.local, in.train, run, opts);
      fuser = adaptive_fuser(head);
      cfg["adaptive_tasks"] = adaptive_tasks;
      cfg["omega"] = {head.omega[0], head.omega[1]};
      cfg["running_mean"] = {head.running_mean[0], head.running_mean[1]};
      cfg["running_var"] = {head.running_var[0], head.running_var[1]};
      cfg.erase("alpha");
      cfg.erase("normalize");
    } else {
      fuser = manual_fuser({af.resolved_alpha(), normalize, FusionMode::Manual});
    }
    const EvalReport r = evaluate_scores(scores, MetricKind::Kl, MetricKind::Sqr, fuser, cfg);
    fs::create_directories(af.out);
    write_report(af.out, "ablate_fusion", r, af.n, af.k);
    std::cout << eval_summary(r).dump(2) << "\n";
    return 0;
  }

  if (*att) {
    const Checkpoint ck = load_checkpoint(att_ckpt);
    const TensorMap image = load_tensors(att_image);
    if (image.size() != 1) fail(ErrorKind::FormatError, att_image + ": expected one image tensor");
    const Encoding enc = encode(ck.params, tensor_to_image(image.front()));
    TensorMap out;
    for (std::size_t l = 0; l < enc.attention.depth; ++l)
      for (std::size_t h = 0; h < enc.attention.heads; ++h) {
        const Matrix& m = enc.attention.at(l, h);
        out.push_back({"attention.layer" + std::to_string(l) + ".head" + std::to_string(h), DType::F64,
                       {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())},
                       m.storage()});
      }
    save_tensors(att_out, out);
    std::cout << att_out << "\n";
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return main_impl(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.kind()) << "]: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error [FormatError]: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
