#include "stn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <json.hpp>

#include "stn/error.hpp"
#include "stn/kernels.hpp"
#include "stn/tensor_io.hpp"

namespace stn {

namespace {

using json = nlohmann::json;

// Generator knobs. Colors live well inside [0,1] so texture and noise rarely
// clip; the pair offsets set how far apart the confusable classes sit.
// Per-image jitter keeps one-shot tasks from being trivially separable, and
// the illumination ramp (zero-mean across the image) spreads patch means
// without moving the image mean.
struct Style {
  double color_lo = 0.3, color_hi = 0.7;
  double contrast_lo = 0.04, contrast_hi = 0.2;
  double pair_contrast_low = 0.05, pair_contrast_high = 0.16;
  double pair_color_offset = 0.2;
  double freq_lo = 4.0, freq_hi = 10.0;  // cycles per image width
  double color_jitter = 0.05;
  double contrast_jitter = 0.3;  // log-normal
  double freq_jitter = 0.15;     // log-normal
  double ramp = 0.3;             // per-channel slope across the image
  double brightness_jitter = 0.03;
  double pixel_noise = 0.02;
};
constexpr Style kStyle{};

struct Texture {
  double contrast = 0.1;
  double freq[2] = {5.0, 7.0};
  double angle[2] = {0.0, 1.0};
  double mix = 0.5;
};

struct Signature {
  double color[3] = {0.5, 0.5, 0.5};
  Texture texture;
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Texture random_texture(std::mt19937_64& rng, double contrast) {
  Texture t;
  t.contrast = contrast;
  for (int k = 0; k < 2; ++k) {
    t.freq[k] = uniform(rng, kStyle.freq_lo, kStyle.freq_hi);
    t.angle[k] = uniform(rng, 0.0, std::numbers::pi);
  }
  t.mix = uniform(rng, 0.3, 0.7);
  return t;
}

Signature random_signature(std::mt19937_64& rng) {
  Signature s;
  for (double& c : s.color) c = uniform(rng, kStyle.color_lo, kStyle.color_hi);
  s.texture = random_texture(rng, uniform(rng, kStyle.contrast_lo, kStyle.contrast_hi));
  return s;
}

Image render(const Signature& sig, std::size_t size, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double brightness = kStyle.brightness_jitter * normal(rng);
  const double phase[2] = {uniform(rng, 0.0, 2.0 * std::numbers::pi),
                           uniform(rng, 0.0, 2.0 * std::numbers::pi)};
  Texture t = sig.texture;
  double color[3];
  for (int ch = 0; ch < 3; ++ch) color[ch] = sig.color[ch] + kStyle.color_jitter * normal(rng);
  t.contrast *= std::exp(kStyle.contrast_jitter * normal(rng));
  for (double& f : t.freq) f *= std::exp(kStyle.freq_jitter * normal(rng));
  double ramp[3];
  for (double& r : ramp) r = kStyle.ramp * normal(rng);
  const double ramp_angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  // Unit-variance mixture of the two gratings.
  const double wa = t.mix / std::sqrt(t.mix * t.mix + (1 - t.mix) * (1 - t.mix));
  const double wb = (1 - t.mix) / std::sqrt(t.mix * t.mix + (1 - t.mix) * (1 - t.mix));
  Image img{size, size, 3, std::vector<double>(size * size * 3)};
  const double inv = 2.0 * std::numbers::pi / static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      const double g0 = std::sin(t.freq[0] * inv * (fx * std::cos(t.angle[0]) + fy * std::sin(t.angle[0])) + phase[0]);
      const double g1 = std::sin(t.freq[1] * inv * (fx * std::cos(t.angle[1]) + fy * std::sin(t.angle[1])) + phase[1]);
      const double tex = t.contrast * std::numbers::sqrt2 * (wa * g0 + wb * g1);
      const double u = ((fx + 0.5) / static_cast<double>(size) - 0.5) * std::cos(ramp_angle) +
                       ((fy + 0.5) / static_cast<double>(size) - 0.5) * std::sin(ramp_angle);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = color[ch] + ramp[ch] * u + brightness + tex + kStyle.pixel_noise * normal(rng);
        img.at(y, x, ch) = std::clamp(v, 0.0, 1.0);
      }
    }
  return img;
}

// Signatures for one split laid out as alternating confusable pairs.
std::vector<Signature> split_signatures(std::size_t n, std::mt19937_64& rng) {
  std::vector<Signature> sigs;
  for (std::size_t j = 0; j < n; j += 2) {
    Signature base = random_signature(rng);
    if (j + 1 >= n) {
      sigs.push_back(base);
      break;
    }
    Signature other = base;
    if ((j / 2) % 2 == 0) {
      // Same color, textures far apart in energy.
      base.texture.contrast = kStyle.pair_contrast_low;
      other.texture = random_texture(rng, kStyle.pair_contrast_high);
      if (uniform(rng, 0.0, 1.0) < 0.5) std::swap(base.texture, other.texture);
    } else {
      // Same texture, shifted color.
      double dir[3], len = 0.0;
      std::normal_distribution<double> normal(0.0, 1.0);
      for (double& d : dir) {
        d = normal(rng);
        len += d * d;
      }
      len = std::sqrt(len);
      for (int ch = 0; ch < 3; ++ch) {
        const double shifted = base.color[ch] + kStyle.pair_color_offset * std::sqrt(3.0) * dir[ch] / len;
        other.color[ch] = std::clamp(shifted, 0.15, 0.85);
      }
    }
    sigs.push_back(base);
    sigs.push_back(other);
  }
  return sigs;
}

std::string class_label(std::size_t i) {
  std::string s = std::to_string(i);
  return "class_" + std::string(s.size() < 3 ? 3 - s.size() : 0, '0') + s;
}

}  // namespace

std::string_view to_string(Split split) noexcept {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  fail(ErrorKind::FormatError, "unknown split '" + std::string(name) + "'");
}

Dataset Dataset::subset(Split split) const {
  Dataset d;
  d.image_size = image_size;
  d.channels = channels;
  for (const ClassData& c : classes)
    if (c.split == split) d.classes.push_back(c);
  return d;
}

std::size_t Dataset::item_count() const {
  std::size_t n = 0;
  for (const ClassData& c : classes) n += c.images.size();
  return n;
}

std::optional<std::size_t> Dataset::find_class(std::string_view label) const {
  for (std::size_t i = 0; i < classes.size(); ++i)
    if (classes[i].label == label) return i;
  return std::nullopt;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

SyntheticDataset gen_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 10)
    fail(ErrorKind::InvalidSpec, "need at least 10 classes, got " + std::to_string(spec.classes));
  if (spec.per_class < 2) fail(ErrorKind::InvalidSpec, "need at least 2 images per class");
  if (spec.image_size < 4) fail(ErrorKind::InvalidSpec, "image_size too small");

  const std::size_t n_test = 5;
  const std::size_t n_val = spec.classes >= 15 ? 5 : 0;
  const std::size_t n_train = spec.classes - n_test - n_val;

  std::mt19937_64 rng(derive_seed(spec.seed, 0));
  std::vector<Signature> sigs;
  std::vector<Split> splits;
  for (auto [split, n] : {std::pair{Split::Train, n_train}, {Split::Val, n_val}, {Split::Test, n_test}}) {
    for (const Signature& s : split_signatures(n, rng)) {
      sigs.push_back(s);
      splits.push_back(split);
    }
  }

  SyntheticDataset out;
  out.dataset.image_size = spec.image_size;
  out.dataset.channels = 3;
  out.dataset.classes.resize(sigs.size());
#pragma omp parallel for schedule(dynamic) num_threads(kernels::max_threads())
  for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(sigs.size()); ++ci) {
    const auto i = static_cast<std::size_t>(ci);
    std::mt19937_64 class_rng(derive_seed(spec.seed, 1000 + i));
    ClassData& c = out.dataset.classes[i];
    c.label = class_label(i);
    c.split = splits[i];
    for (std::size_t k = 0; k < spec.per_class; ++k) c.images.push_back(render(sigs[i], spec.image_size, class_rng));
  }
  const std::size_t test_begin = n_train + n_val;
  out.same_global = {test_begin, test_begin + 1};
  out.same_texture = {test_begin + 2, test_begin + 3};
  return out;
}

Episode sample_episode(const Dataset& dataset, std::size_t n_way, std::size_t k_shot,
                       std::size_t t_query, std::mt19937_64& rng) {
  if (n_way < 1 || k_shot < 1 || t_query < 1)
    fail(ErrorKind::InvalidConfig, "episodes need N, K, T ≥ 1");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < dataset.classes.size(); ++i)
    if (dataset.classes[i].images.size() >= k_shot + t_query) eligible.push_back(i);
  if (eligible.size() < n_way)
    fail(ErrorKind::InsufficientData, std::to_string(eligible.size()) + " classes have " +
                                          std::to_string(k_shot + t_query) + " images, need " +
                                          std::to_string(n_way));

  // Partial Fisher–Yates draws without replacement.
  auto draw = [&rng](std::vector<std::size_t>& pool, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(count);
  };

  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.t_query = t_query;
  draw(eligible, n_way);
  ep.class_map = eligible;
  std::vector<std::vector<std::size_t>> picks(n_way);
  for (std::size_t n = 0; n < n_way; ++n) {
    auto& idx = picks[n];
    idx.resize(dataset.classes[ep.class_map[n]].images.size());
    std::iota(idx.begin(), idx.end(), 0);
    draw(idx, k_shot + t_query);
  }
  for (std::size_t n = 0; n < n_way; ++n) {
    const auto& images = dataset.classes[ep.class_map[n]].images;
    for (std::size_t k = 0; k < k_shot; ++k) {
      ep.support.push_back(images[picks[n][k]]);
      ep.support_labels.push_back(n);
    }
  }
  for (std::size_t n = 0; n < n_way; ++n) {
    const auto& images = dataset.classes[ep.class_map[n]].images;
    for (std::size_t t = 0; t < t_query; ++t) {
      ep.query.push_back(images[picks[n][k_shot + t]]);
      ep.query_labels.push_back(n);
    }
  }
  return ep;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset, const std::string& extra_json) {
  json manifest = json::parse(extra_json);
  manifest["image_size"] = dataset.image_size;
  manifest["channels"] = dataset.channels;
  manifest["classes"] = json::array();
  for (const ClassData& c : dataset.classes) {
    json entry{{"label", c.label}, {"split", std::string(to_string(c.split))}, {"image_blobs", json::array()}};
    for (std::size_t k = 0; k < c.images.size(); ++k) {
      std::string idx = std::to_string(k);
      idx = std::string(idx.size() < 4 ? 4 - idx.size() : 0, '0') + idx;
      const std::string rel = "blobs/" + c.label + "/" + idx + ".stnt";
      save_tensors(dir / rel, {image_to_tensor(c.images[k], "image")});
      entry["image_blobs"].push_back(rel);
    }
    manifest["classes"].push_back(std::move(entry));
  }
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
  json manifest;
  {
    std::ifstream in(manifest_path);
    if (!in) fail(ErrorKind::FormatError, "cannot open manifest '" + manifest_path.string() + "'");
    try {
      manifest = json::parse(in);
    } catch (const json::exception& e) {
      fail(ErrorKind::FormatError, "manifest '" + manifest_path.string() + "': " + e.what());
    }
  }
  const std::filesystem::path root = manifest_path.parent_path();
  Dataset d;
  try {
    d.image_size = manifest.at("image_size").get<std::size_t>();
    d.channels = manifest.at("channels").get<std::size_t>();
    for (const json& entry : manifest.at("classes")) {
      ClassData c;
      c.label = entry.at("label").get<std::string>();
      c.split = parse_split(entry.at("split").get<std::string>());
      for (const json& blob : entry.at("image_blobs")) {
        const std::string rel = blob.get<std::string>();
        const std::filesystem::path p = root / rel;
        if (!std::filesystem::exists(p))
          fail(ErrorKind::FormatError, "missing image blob '" + rel + "' for class '" + c.label + "'");
        TensorMap tensors;
        try {
          tensors = load_tensors(p);
        } catch (const Error& e) {
          throw Error(e.kind(), "image blob '" + rel + "': " + e.what());
        }
        if (tensors.size() != 1) fail(ErrorKind::FormatError, "image blob '" + rel + "' must hold one tensor");
        Image img = tensor_to_image(tensors.front());
        if (img.height != d.image_size || img.width != d.image_size || img.channels != d.channels)
          fail(ErrorKind::FormatError, "image blob '" + rel + "' has the wrong shape");
        c.images.push_back(std::move(img));
      }
      d.classes.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::FormatError, "manifest '" + manifest_path.string() + "': " + e.what());
  }
  return d;
}

}  // namespace stn
