#include <charconv>
#include <cmath>
#include <set>

#include "stn/episodic.hpp"
#include "stn/error.hpp"
#include "stn/tensor_io.hpp"

namespace stn {

namespace {

using json = nlohmann::json;

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* what) {
  if (!j.is_object()) fail(ErrorKind::InvalidConfig, std::string(what) + " must be a JSON object");
  const std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& item : j.items())
    if (!allowed.contains(item.key()))
      fail(ErrorKind::InvalidConfig, std::string("unknown ") + what + " key '" + item.key() + "'");
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidConfig, std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

void RunConfig::validate() const {
  if (n_way < 2) fail(ErrorKind::InvalidConfig, "n_way must be at least 2");
  if (k_shot < 1) fail(ErrorKind::InvalidConfig, "k_shot must be at least 1");
  if (t_query < 1) fail(ErrorKind::InvalidConfig, "t_query must be at least 1");
  if (!(lr > 0.0) || !(lr_min >= 0.0) || lr_min > lr)
    fail(ErrorKind::InvalidConfig, "need 0 ≤ lr_min ≤ lr and lr > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    fail(ErrorKind::InvalidConfig, "Adam betas must lie in [0,1)");
  if (!(adam_eps > 0.0)) fail(ErrorKind::InvalidConfig, "adam_eps must be positive");
  if (!(weight_decay >= 0.0)) fail(ErrorKind::InvalidConfig, "weight_decay must be non-negative");
  if (!(epsilon_scale >= 0.0)) fail(ErrorKind::InvalidConfig, "epsilon_scale must be non-negative");
  fusion.validate();
  encoder.validate();
}

json to_json(const EncoderConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"channels", c.channels},
          {"embed_dim", c.embed_dim},   {"depth", c.depth},           {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio}};
}

json to_json(const FusionConfig& c) {
  return {{"alpha", c.alpha}, {"normalize", c.normalize}, {"mode", std::string(to_string(c.mode))}};
}

json to_json(const RunConfig& r) {
  return {{"n_way", r.n_way},
          {"k_shot", r.k_shot},
          {"t_query", r.t_query},
          {"epochs", r.epochs},
          {"episodes_per_epoch", r.episodes_per_epoch},
          {"lr", r.lr},
          {"lr_min", r.lr_min},
          {"beta1", r.beta1},
          {"beta2", r.beta2},
          {"adam_eps", r.adam_eps},
          {"weight_decay", r.weight_decay},
          {"seed", r.seed},
          {"fusion", to_json(r.fusion)},
          {"encoder", to_json(r.encoder)},
          {"epsilon_scale", r.epsilon_scale},
          {"share_params", r.share_params},
          {"val_episodes", r.val_episodes}};
}

EncoderConfig encoder_config_from_json(const json& j) {
  reject_unknown(j, {"image_size", "patch_size", "channels", "embed_dim", "depth", "heads", "mlp_ratio"},
                 "encoder");
  EncoderConfig c;
  read(j, "image_size", c.image_size);
  read(j, "patch_size", c.patch_size);
  read(j, "channels", c.channels);
  read(j, "embed_dim", c.embed_dim);
  read(j, "depth", c.depth);
  read(j, "heads", c.heads);
  read(j, "mlp_ratio", c.mlp_ratio);
  c.validate();
  return c;
}

FusionConfig fusion_config_from_json(const json& j) {
  reject_unknown(j, {"alpha", "normalize", "mode"}, "fusion");
  FusionConfig c;
  read(j, "alpha", c.alpha);
  read(j, "normalize", c.normalize);
  if (j.contains("mode")) {
    std::string mode;
    read(j, "mode", mode);
    c.mode = parse_fusion_mode(mode);
  }
  c.validate();
  return c;
}

RunConfig run_config_from_json(const json& j) {
  reject_unknown(j,
                 {"n_way", "k_shot", "t_query", "epochs", "episodes_per_epoch", "lr", "lr_min", "beta1", "beta2",
                  "adam_eps", "weight_decay", "seed", "fusion", "encoder", "epsilon_scale", "share_params",
                  "val_episodes"},
                 "run");
  RunConfig r;
  read(j, "n_way", r.n_way);
  read(j, "k_shot", r.k_shot);
  read(j, "t_query", r.t_query);
  read(j, "epochs", r.epochs);
  read(j, "episodes_per_epoch", r.episodes_per_epoch);
  read(j, "lr", r.lr);
  read(j, "lr_min", r.lr_min);
  read(j, "beta1", r.beta1);
  read(j, "beta2", r.beta2);
  read(j, "adam_eps", r.adam_eps);
  read(j, "weight_decay", r.weight_decay);
  read(j, "seed", r.seed);
  read(j, "epsilon_scale", r.epsilon_scale);
  read(j, "share_params", r.share_params);
  read(j, "val_episodes", r.val_episodes);
  // A config without an explicit fusion block gets the K-dependent default α.
  if (j.contains("fusion")) {
    r.fusion = fusion_config_from_json(j.at("fusion"));
  } else {
    r.fusion.alpha = default_alpha(r.k_shot);
  }
  if (j.contains("encoder")) r.encoder = encoder_config_from_json(j.at("encoder"));
  r.validate();
  return r;
}

void save_checkpoint(const std::filesystem::path& path, const EncoderParams& params, const RunConfig& run) {
  save_tensors(path, params_to_tensors(params));
  std::filesystem::path sidecar = path;
  sidecar += ".json";
  const json header{{"encoder", to_json(params.config)}, {"run", to_json(run)}};
  write_file_atomic(sidecar, header.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::filesystem::path sidecar = path;
  sidecar += ".json";
  const auto bytes = read_file(sidecar);
  json header;
  try {
    header = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    fail(ErrorKind::FormatError, sidecar.string() + ": " + e.what());
  }
  if (!header.is_object() || !header.contains("encoder"))
    fail(ErrorKind::FormatError, sidecar.string() + ": missing \"encoder\"");
  Checkpoint ck;
  try {
    const EncoderConfig config = encoder_config_from_json(header.at("encoder"));
    if (header.contains("run")) ck.run = run_config_from_json(header.at("run"));
    ck.run.encoder = config;
    ck.params = params_from_tensors(config, load_tensors(path));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::InvalidConfig) fail(ErrorKind::FormatError, sidecar.string() + ": " + e.what());
    throw;
  }
  return ck;
}

void save_episode(const std::filesystem::path& path, const Episode& ep) {
  TensorMap tensors;
  auto index_tensor = [](std::string name, const std::vector<std::size_t>& v) {
    Tensor t{std::move(name), DType::F64, {static_cast<std::uint32_t>(v.size())}, {}};
    for (std::size_t x : v) t.values.push_back(static_cast<double>(x));
    return t;
  };
  tensors.push_back(index_tensor("shape", {ep.n_way, ep.k_shot, ep.t_query}));
  tensors.push_back(index_tensor("class_map", ep.class_map));
  tensors.push_back(index_tensor("support_labels", ep.support_labels));
  tensors.push_back(index_tensor("query_labels", ep.query_labels));
  for (std::size_t i = 0; i < ep.support.size(); ++i)
    tensors.push_back(image_to_tensor(ep.support[i], "support." + std::to_string(i), DType::F64));
  for (std::size_t i = 0; i < ep.query.size(); ++i)
    tensors.push_back(image_to_tensor(ep.query[i], "query." + std::to_string(i), DType::F64));
  save_tensors(path, tensors);
}

Episode load_episode(const std::filesystem::path& path) {
  const TensorMap tensors = load_tensors(path);
  auto indices = [&](const char* name) {
    std::vector<std::size_t> out;
    for (double v : require_tensor(tensors, name).values) {
      if (!(v >= 0.0) || v != std::floor(v)) fail(ErrorKind::FormatError, std::string("bad index in ") + name);
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  };
  const auto shape = indices("shape");
  if (shape.size() != 3) fail(ErrorKind::FormatError, "episode shape must have 3 entries");
  Episode ep;
  ep.n_way = shape[0];
  ep.k_shot = shape[1];
  ep.t_query = shape[2];
  ep.class_map = indices("class_map");
  ep.support_labels = indices("support_labels");
  ep.query_labels = indices("query_labels");
  if (ep.support_labels.size() != ep.n_way * ep.k_shot || ep.query_labels.size() != ep.n_way * ep.t_query)
    fail(ErrorKind::FormatError, "episode label counts do not match its shape");
  for (std::size_t i = 0; i < ep.support_labels.size(); ++i)
    ep.support.push_back(tensor_to_image(require_tensor(tensors, "support." + std::to_string(i))));
  for (std::size_t i = 0; i < ep.query_labels.size(); ++i)
    ep.query.push_back(tensor_to_image(require_tensor(tensors, "query." + std::to_string(i))));
  return ep;
}

}  // namespace stn
