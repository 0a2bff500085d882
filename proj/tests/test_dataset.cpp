#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "stn/dataset.hpp"
#include "stn/error.hpp"
#include "stn/tensor_io.hpp"

using namespace stn;
namespace fs = std::filesystem;

namespace {

const SyntheticDataset& shared_synthetic() {
  static const SyntheticDataset syn = gen_synthetic({});
  return syn;
}

Image mean_image(const ClassData& c) {
  Image m = c.images.front();
  std::fill(m.pixels.begin(), m.pixels.end(), 0.0);
  for (const Image& img : c.images)
    for (std::size_t k = 0; k < m.pixels.size(); ++k) m.pixels[k] += img.pixels[k];
  for (double& v : m.pixels) v /= static_cast<double>(c.images.size());
  return m;
}

// Mean absolute per-pixel difference of the class mean images ([0,1] range).
double mean_image_gap(const ClassData& a, const ClassData& b) {
  const Image ma = mean_image(a), mb = mean_image(b);
  double s = 0.0;
  for (std::size_t k = 0; k < ma.pixels.size(); ++k) s += std::abs(ma.pixels[k] - mb.pixels[k]);
  return s / static_cast<double>(ma.pixels.size());
}

// Within-patch variance averaged over patches, channels and images.
double patch_second_moment(const ClassData& c, std::size_t patch) {
  double total = 0.0;
  std::size_t count = 0;
  for (const Image& img : c.images)
    for (std::size_t py = 0; py < img.height / patch; ++py)
      for (std::size_t px = 0; px < img.width / patch; ++px)
        for (std::size_t ch = 0; ch < img.channels; ++ch) {
          double s = 0.0, s2 = 0.0;
          for (std::size_t y = 0; y < patch; ++y)
            for (std::size_t x = 0; x < patch; ++x) {
              const double v = img.at(py * patch + y, px * patch + x, ch);
              s += v;
              s2 += v * v;
            }
          const double n = static_cast<double>(patch * patch);
          total += s2 / n - (s / n) * (s / n);
          ++count;
        }
  return total / static_cast<double>(count);
}

double relative_gap(double a, double b) { return std::abs(a - b) / std::min(a, b); }

}  // namespace

TEST(GenSynthetic, DeterministicPerSeed) {
  const SyntheticSpec spec{12, 5, 16, 3};
  const SyntheticDataset a = gen_synthetic(spec), b = gen_synthetic(spec);
  ASSERT_EQ(a.dataset.classes.size(), b.dataset.classes.size());
  for (std::size_t i = 0; i < a.dataset.classes.size(); ++i) {
    EXPECT_EQ(a.dataset.classes[i].label, b.dataset.classes[i].label);
    for (std::size_t k = 0; k < 5; ++k)
      EXPECT_EQ(a.dataset.classes[i].images[k].pixels, b.dataset.classes[i].images[k].pixels);
  }
  const SyntheticDataset c = gen_synthetic({12, 5, 16, 4});
  EXPECT_NE(a.dataset.classes[0].images[0].pixels, c.dataset.classes[0].images[0].pixels);
}

TEST(GenSynthetic, SplitsAndRanges) {
  const Dataset& ds = shared_synthetic().dataset;
  EXPECT_EQ(ds.classes.size(), 20u);
  EXPECT_EQ(ds.subset(Split::Train).classes.size(), 10u);
  EXPECT_EQ(ds.subset(Split::Val).classes.size(), 5u);
  EXPECT_EQ(ds.subset(Split::Test).classes.size(), 5u);
  EXPECT_EQ(ds.item_count(), 20u * 60u);
  std::set<std::string> labels;
  for (const ClassData& c : ds.classes) {
    labels.insert(c.label);
    for (const Image& img : c.images)
      for (double v : img.pixels) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
      }
  }
  EXPECT_EQ(labels.size(), 20u);
  EXPECT_EQ(gen_synthetic({10, 20, 32, 0}).dataset.subset(Split::Val).classes.size(), 0u);
  EXPECT_THROW(gen_synthetic({9, 20, 32, 0}), Error);
}

TEST(GenSynthetic, ConfusablePairMoments) {
  const SyntheticDataset& syn = shared_synthetic();
  const auto& cls = syn.dataset.classes;
  const ClassData &a0 = cls[syn.same_global.first], &a1 = cls[syn.same_global.second];
  const ClassData &b0 = cls[syn.same_texture.first], &b1 = cls[syn.same_texture.second];
  EXPECT_EQ(a0.split, Split::Test);
  EXPECT_EQ(b1.split, Split::Test);
  // Pair A: global statistics agree, texture energy does not.
  EXPECT_LT(mean_image_gap(a0, a1), 0.05);
  EXPECT_GT(relative_gap(patch_second_moment(a0, 8), patch_second_moment(a1, 8)), 0.5);
  // Pair B: the reverse.
  EXPECT_GE(mean_image_gap(b0, b1), 0.05);
  EXPECT_LE(relative_gap(patch_second_moment(b0, 8), patch_second_moment(b1, 8)), 0.5);
}

TEST(SampleEpisode, CountsAndDisjointness) {
  const Dataset train = shared_synthetic().dataset.subset(Split::Train);
  std::mt19937_64 rng(1);
  const Episode ep = sample_episode(train, 5, 1, 15, rng);
  EXPECT_EQ(ep.support.size(), 5u);
  EXPECT_EQ(ep.query.size(), 75u);
  EXPECT_EQ(ep.class_map.size(), 5u);
}

TEST(SampleEpisode, FuzzInvariants) {
  const Dataset& ds = shared_synthetic().dataset;
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> nd(2, 8), kd(1, 5), td(1, 10);
  for (int rep = 0; rep < 10000; ++rep) {
    const std::size_t n = nd(rng), k = kd(rng), t = td(rng);
    const Episode ep = sample_episode(ds, n, k, t, rng);
    ASSERT_EQ(ep.support.size(), n * k);
    ASSERT_EQ(ep.query.size(), n * t);
    ASSERT_EQ(std::set<std::size_t>(ep.class_map.begin(), ep.class_map.end()).size(), n);
    std::vector<std::size_t> per_s(n), per_q(n);
    for (std::size_t l : ep.support_labels) ++per_s[l];
    for (std::size_t l : ep.query_labels) ++per_q[l];
    for (std::size_t c = 0; c < n; ++c) {
      ASSERT_EQ(per_s[c], k);
      ASSERT_EQ(per_q[c], t);
    }
    if (rep % 100 == 0) {
      // Support and query never share an image.
      for (std::size_t c = 0; c < n; ++c) {
        std::set<std::vector<double>> support_pixels;
        for (std::size_t s = 0; s < n * k; ++s)
          if (ep.support_labels[s] == c) support_pixels.insert(ep.support[s].pixels);
        for (std::size_t q = 0; q < n * t; ++q) {
          if (ep.query_labels[q] == c) {
            ASSERT_FALSE(support_pixels.contains(ep.query[q].pixels));
          }
        }
      }
    }
  }
}

TEST(SampleEpisode, DeterministicForFixedState) {
  const Dataset& ds = shared_synthetic().dataset;
  std::mt19937_64 a(9), b(9);
  const Episode x = sample_episode(ds, 5, 2, 3, a), y = sample_episode(ds, 5, 2, 3, b);
  EXPECT_EQ(x.class_map, y.class_map);
  for (std::size_t i = 0; i < x.query.size(); ++i) EXPECT_EQ(x.query[i].pixels, y.query[i].pixels);
  EXPECT_EQ(a(), b());
}

TEST(SampleEpisode, UniformClassFrequency) {
  const Dataset& ds = shared_synthetic().dataset;
  std::mt19937_64 rng(3);
  const int episodes = 10000;
  std::vector<int> hits(20);
  for (int e = 0; e < episodes; ++e)
    for (std::size_t c : sample_episode(ds, 5, 1, 1, rng).class_map) ++hits[c];
  const double p = 5.0 / 20.0, mean = episodes * p, sd = std::sqrt(episodes * p * (1 - p));
  for (int h : hits) EXPECT_LT(std::abs(h - mean), 3.0 * sd);
}

TEST(SampleEpisode, InsufficientData) {
  const Dataset test = shared_synthetic().dataset.subset(Split::Test);
  std::mt19937_64 rng(4);
  try {
    sample_episode(test, 6, 1, 1, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InsufficientData);
  }
  EXPECT_THROW(sample_episode(test, 5, 30, 31, rng), Error);
}

TEST(Manifest, RoundTripIsBitExact) {
  const fs::path dir = fs::temp_directory_path() / "stn_manifest_roundtrip";
  fs::remove_all(dir);
  const SyntheticDataset syn = gen_synthetic({10, 3, 8, 5});
  save_dataset(dir, syn.dataset, R"({"note": "x"})");
  const Dataset back = load_dataset(dir / "manifest.json");
  ASSERT_EQ(back.classes.size(), syn.dataset.classes.size());
  EXPECT_EQ(back.image_size, 8u);
  for (std::size_t i = 0; i < back.classes.size(); ++i) {
    EXPECT_EQ(back.classes[i].label, syn.dataset.classes[i].label);
    EXPECT_EQ(back.classes[i].split, syn.dataset.classes[i].split);
    for (std::size_t k = 0; k < 3; ++k) {
      // Blobs are f32; the round trip is exact at that precision and stable thereafter.
      const auto& orig = syn.dataset.classes[i].images[k].pixels;
      const auto& got = back.classes[i].images[k].pixels;
      for (std::size_t p = 0; p < orig.size(); ++p) ASSERT_EQ(got[p], static_cast<double>(static_cast<float>(orig[p])));
    }
  }
  save_dataset(dir / "again", back);
  const Dataset twice = load_dataset(dir / "again" / "manifest.json");
  for (std::size_t i = 0; i < back.classes.size(); ++i)
    for (std::size_t k = 0; k < 3; ++k) ASSERT_EQ(twice.classes[i].images[k].pixels, back.classes[i].images[k].pixels);
  fs::remove_all(dir);
}

TEST(Manifest, MissingBlobIsNamed) {
  const fs::path dir = fs::temp_directory_path() / "stn_manifest_missing";
  fs::remove_all(dir);
  save_dataset(dir, gen_synthetic({10, 2, 8, 6}).dataset);
  fs::remove(dir / "blobs" / "class_003" / "0001.stnt");
  try {
    load_dataset(dir / "manifest.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::FormatError);
    EXPECT_NE(std::string(e.what()).find("blobs/class_003/0001.stnt"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(Manifest, MalformedJson) {
  const fs::path dir = fs::temp_directory_path() / "stn_manifest_bad";
  fs::create_directories(dir);
  write_file_atomic(dir / "manifest.json", R"({"classes": [{"label": 3}]})");
  EXPECT_THROW(load_dataset(dir / "manifest.json"), Error);
  write_file_atomic(dir / "manifest.json", "{not json");
  EXPECT_THROW(load_dataset(dir / "manifest.json"), Error);
  EXPECT_THROW(load_dataset(dir / "nope.json"), Error);
  fs::remove_all(dir);
}

TEST(DeriveSeed, DistinctStreams) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 4; ++s)
    for (std::uint64_t k = 0; k < 100; ++k) seen.insert(derive_seed(s, k));
  EXPECT_EQ(seen.size(), 400u);
  EXPECT_EQ(derive_seed(7, 3), derive_seed(7, 3));
}
