#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "stn/encoder.hpp"

namespace stn {

enum class Split { Train, Val, Test };

std::string_view to_string(Split split) noexcept;
Split parse_split(std::string_view name);

struct ClassData {
  std::string label;
  Split split = Split::Train;
  std::vector<Image> images;
};

/// Images grouped by class. Splits are class-disjoint: every class belongs to
/// exactly one split.
struct Dataset {
  std::vector<ClassData> classes;
  std::size_t image_size = 0;
  std::size_t channels = 0;

  /// Classes of one split, in their original order.
  Dataset subset(Split split) const;
  std::size_t item_count() const;
  std::optional<std::size_t> find_class(std::string_view label) const;
};

struct SyntheticSpec {
  std::size_t classes = 20;
  std::size_t per_class = 60;
  std::size_t image_size = 32;
  std::uint64_t seed = 0;
};

/// Indices into Dataset::classes.
struct ClassPair {
  std::size_t first = 0;
  std::size_t second = 0;
};

struct SyntheticDataset {
  Dataset dataset;
  /// Same color signature, different texture (global features alone confuse them).
  ClassPair same_global;
  /// Same texture, different color signature (local features alone confuse them).
  ClassPair same_texture;
};

/// Procedural classes, each a (color, texture) signature. Every split is laid
/// out as alternating confusable pairs: classes 0–1 of a split share color,
/// 2–3 share texture, and so on. The designated pairs are the first two of
/// the test split. Deterministic for a fixed seed. Needs at least 10 classes.
SyntheticDataset gen_synthetic(const SyntheticSpec& spec);

struct Episode {
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::size_t t_query = 0;
  std::vector<Image> support;  // class-major, n_way × k_shot
  std::vector<std::size_t> support_labels;
  std::vector<Image> query;    // class-major, n_way × t_query
  std::vector<std::size_t> query_labels;
  std::vector<std::size_t> class_map;  // episode label → Dataset::classes index
};

/// N distinct classes, then K+T distinct images per class split K/T.
/// Throws InsufficientData when fewer than N classes have K+T images.
Episode sample_episode(const Dataset& dataset, std::size_t n_way, std::size_t k_shot,
                       std::size_t t_query, std::mt19937_64& rng);

/// Independent stream seed for (seed, stream), via SplitMix64.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept;

/// Writes manifest.json plus one tensor-container blob per image under `dir`.
/// `extra` is merged into the manifest's top-level object.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset,
                  const std::string& extra_json = "{}");
/// Blob paths are resolved relative to the manifest's directory. Throws
/// FormatError naming the blob when one is missing or malformed.
Dataset load_dataset(const std::filesystem::path& manifest);

}  // namespace stn
