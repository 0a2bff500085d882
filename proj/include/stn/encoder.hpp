#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stn/numerics.hpp"

namespace stn {

/// Shape of the compact vision transformer shared by both branches.
struct EncoderConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t embed_dim = 64;
  std::size_t depth = 2;
  std::size_t heads = 4;
  double mlp_ratio = 2.0;

  std::size_t grid() const noexcept { return image_size / patch_size; }
  std::size_t num_patches() const noexcept { return grid() * grid(); }
  std::size_t tokens() const noexcept { return num_patches() + 1; }
  std::size_t patch_dim() const noexcept { return patch_size * patch_size * channels; }
  std::size_t head_dim() const noexcept { return embed_dim / heads; }
  std::size_t hidden_dim() const noexcept;

  /// Throws InvalidConfig on divisibility or range violations.
  void validate() const;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// H×W×C image, row-major with channels innermost, pixel values in [0,1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> pixels;

  double& at(std::size_t y, std::size_t x, std::size_t ch) {
    return pixels[(y * width + x) * channels + ch];
  }
  double at(std::size_t y, std::size_t x, std::size_t ch) const {
    return pixels[(y * width + x) * channels + ch];
  }
};

// Per-channel standardization applied to [0,1] pixels before patchifying.
inline constexpr double kPixelMean = 0.5;
inline constexpr double kPixelStd = 0.25;

struct BlockParams {
  Matrix norm1_w, norm1_b;  // 1×c
  Matrix qkv_w, qkv_b;      // c×3c, 1×3c
  Matrix proj_w, proj_b;    // c×c, 1×c
  Matrix norm2_w, norm2_b;  // 1×c
  Matrix fc1_w, fc1_b;      // c×h, 1×h
  Matrix fc2_w, fc2_b;      // h×c, 1×c

  friend bool operator==(const BlockParams&, const BlockParams&) = default;
};

/// Learnable weights of one branch. Linear layers are stored in×out so that
/// y = x·W + b for row vectors x.
struct EncoderParams {
  EncoderConfig config;
  Matrix patch_w, patch_b;  // patch_dim×c, 1×c
  Matrix cls_token;         // 1×c
  Matrix pos_embed;         // (M+1)×c
  std::vector<BlockParams> blocks;
  Matrix norm_w, norm_b;    // 1×c

  /// Calls f(name, matrix) for every tensor in a fixed order.
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t parameter_count() const;

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("patch_embed.weight"), self.patch_w);
    f(std::string("patch_embed.bias"), self.patch_b);
    f(std::string("cls_token"), self.cls_token);
    f(std::string("pos_embed"), self.pos_embed);
    for (std::size_t l = 0; l < self.blocks.size(); ++l) {
      auto& b = self.blocks[l];
      const std::string p = "blocks." + std::to_string(l) + ".";
      f(p + "norm1.weight", b.norm1_w);
      f(p + "norm1.bias", b.norm1_b);
      f(p + "attn.qkv.weight", b.qkv_w);
      f(p + "attn.qkv.bias", b.qkv_b);
      f(p + "attn.proj.weight", b.proj_w);
      f(p + "attn.proj.bias", b.proj_b);
      f(p + "norm2.weight", b.norm2_w);
      f(p + "norm2.bias", b.norm2_b);
      f(p + "mlp.fc1.weight", b.fc1_w);
      f(p + "mlp.fc1.bias", b.fc1_b);
      f(p + "mlp.fc2.weight", b.fc2_w);
      f(p + "mlp.fc2.bias", b.fc2_b);
    }
    f(std::string("norm.weight"), self.norm_w);
    f(std::string("norm.bias"), self.norm_b);
  }
};

/// Weights drawn from a normal truncated at ±2σ with σ = 0.02 (class token and
/// positional embeddings included); biases zero; layer-norm gains one.
EncoderParams init_params(const EncoderConfig& config, std::uint64_t seed);

/// Same shapes as `params`, every entry zero.
EncoderParams zeros_like(const EncoderParams& params);

/// One global feature (class token) and M local features (patch tokens).
struct DualEmbedding {
  Vector global;
  Matrix local;  // M×c, one row per patch
};

/// Softmax attention weights, (M+1)×(M+1) per layer and head.
struct AttentionRecord {
  std::size_t depth = 0;
  std::size_t heads = 0;
  std::vector<Matrix> maps;  // index layer*heads + head

  const Matrix& at(std::size_t layer, std::size_t head) const { return maps[layer * heads + head]; }
};

struct Encoding {
  DualEmbedding embedding;
  AttentionRecord attention;
};

Encoding encode(const EncoderParams& params, const Image& image);

/// Parallel over images; identical to calling encode on each image.
std::vector<DualEmbedding> encode_batch(const EncoderParams& params, std::span<const Image> images);
/// Single-threaded reference for encode_batch.
std::vector<DualEmbedding> encode_batch_serial(const EncoderParams& params,
                                               std::span<const Image> images);

/// Scalar loss over a batch of encoder outputs. Must write dL/doutput into
/// `adjoints` (pre-sized, zero-filled) and return L.
using EmbeddingLoss =
    std::function<double(std::span<const DualEmbedding> outputs, std::span<DualEmbedding> adjoints)>;

struct GradResult {
  double loss = 0.0;
  EncoderParams grad;
  std::vector<DualEmbedding> outputs;
};

/// Reverse-mode gradient of loss(encode(batch)) with respect to every
/// parameter. Throws NonFiniteLoss if the loss is not finite.
GradResult grad(const EncoderParams& params, const EmbeddingLoss& loss, std::span<const Image> batch);

}  // namespace stn
