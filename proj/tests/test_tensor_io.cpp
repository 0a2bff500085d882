#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "stn/error.hpp"
#include "stn/tensor_io.hpp"

using namespace stn;
namespace fs = std::filesystem;

namespace {

TensorMap sample_tensors() {
  TensorMap t;
  t.push_back({"a", DType::F64, {2, 3}, {1.0, -2.5, 1.0 / 3.0, 1e-300, std::numeric_limits<double>::max(), 0.0}});
  t.push_back({"b.f32", DType::F32, {4}, {0.5, -1.25, 3.0f * 0.1f, 65504.0}});
  t.push_back({"scalar", DType::F64, {}, {7.0}});
  t.push_back({"empty", DType::F32, {0, 5}, {}});
  return t;
}

ErrorKind kind_of_parse(std::span<const std::uint8_t> bytes) {
  try {
    parse_tensors(bytes);
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::InvalidSpec;  // sentinel: parse succeeded
}

}  // namespace

TEST(TensorIo, RoundTripPreservesEverything) {
  const TensorMap in = sample_tensors();
  const TensorMap out = parse_tensors(serialize_tensors(in));
  ASSERT_EQ(out.size(), in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    EXPECT_EQ(out[i].name, in[i].name);
    EXPECT_EQ(out[i].dtype, in[i].dtype);
    EXPECT_EQ(out[i].dims, in[i].dims);
    EXPECT_EQ(out[i].values, in[i].values);
  }
  EXPECT_EQ(serialize_tensors(out), serialize_tensors(in));
}

TEST(TensorIo, HeaderLayout) {
  const auto bytes = serialize_tensors({{"x", DType::F64, {1}, {1.0}}});
  ASSERT_GE(bytes.size(), 4u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "STNT");
  EXPECT_EQ(bytes[4], kTensorFormatVersion & 0xff);
  // magic 4 + version 2 + count 4 + name len 2 + name 1 + dtype 1 + ndim 1 + dim 4 + payload 8 + crc 4
  EXPECT_EQ(bytes.size(), 31u);
}

TEST(TensorIo, ShapeMismatchRejected) {
  EXPECT_THROW(serialize_tensors({{"bad", DType::F64, {2, 2}, {1.0}}}), Error);
}

TEST(TensorIo, EveryTruncationIsFormatErrorWithOffset) {
  const auto bytes = serialize_tensors(sample_tensors());
  for (std::size_t len = 0; len < bytes.size(); ++len) {
    try {
      parse_tensors(std::span(bytes.data(), len));
      FAIL() << "length " << len;
    } catch (const Error& e) {
      ASSERT_EQ(e.kind(), ErrorKind::FormatError) << "length " << len;
      ASSERT_TRUE(e.offset().has_value());
      ASSERT_LE(*e.offset(), len);
    }
  }
}

TEST(TensorIo, BitFlipsAreDetected) {
  const auto bytes = serialize_tensors(sample_tensors());
  for (std::size_t pos = 0; pos < bytes.size(); ++pos)
    for (int bit = 0; bit < 8; bit += 3) {
      auto copy = bytes;
      copy[pos] ^= static_cast<std::uint8_t>(1u << bit);
      const ErrorKind k = kind_of_parse(copy);
      ASSERT_TRUE(k == ErrorKind::FormatError || k == ErrorKind::ChecksumMismatch) << pos << ":" << bit;
    }
}

TEST(TensorIo, TrailingBytesRejected) {
  auto bytes = serialize_tensors(sample_tensors());
  bytes.push_back(0);
  EXPECT_NE(kind_of_parse(bytes), ErrorKind::InvalidSpec);
}

TEST(TensorIo, FileRoundTripAndMissingFile) {
  const fs::path path = fs::temp_directory_path() / "stn_tensor_io.stnt";
  save_tensors(path, sample_tensors());
  EXPECT_EQ(load_tensors(path).size(), 4u);
  fs::remove(path);
  try {
    load_tensors(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::FormatError);
  }
}

TEST(TensorIo, FindAndRequire) {
  const TensorMap t = sample_tensors();
  EXPECT_NE(find_tensor(t, "scalar"), nullptr);
  EXPECT_EQ(find_tensor(t, "nope"), nullptr);
  EXPECT_THROW(require_tensor(t, "nope"), Error);
}

TEST(TensorIo, ImageConversion) {
  Image img{2, 3, 3, std::vector<double>(18)};
  for (std::size_t k = 0; k < 18; ++k) img.pixels[k] = k / 17.0;
  const Image back = tensor_to_image(image_to_tensor(img, "im", DType::F64));
  EXPECT_EQ(back.pixels, img.pixels);
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.width, 3u);
  Tensor flat{"flat", DType::F64, {18}, img.pixels};
  EXPECT_THROW(tensor_to_image(flat), Error);
}

TEST(TensorIo, ParamsRoundTrip) {
  EncoderConfig cfg;
  cfg.image_size = 16;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.depth = 2;
  const EncoderParams p = init_params(cfg, 4);
  const TensorMap t = params_to_tensors(p);
  EXPECT_TRUE(params_from_tensors(cfg, parse_tensors(serialize_tensors(t))) == p);
  EncoderConfig other = cfg;
  other.embed_dim = 16;
  EXPECT_THROW(params_from_tensors(other, t), Error);
  TensorMap missing(t.begin() + 1, t.end());
  EXPECT_THROW(params_from_tensors(cfg, missing), Error);
}
