#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stn/encoder.hpp"

// Binary tensor container ("STNT"):
//
//   magic "STNT" | version u16 | tensor count u32
//   per tensor: name length u16, UTF-8 name, dtype u8 (0 = f32, 1 = f64),
//               ndim u8, dims u32 × ndim, row-major payload
//   CRC-32 (zlib polynomial) of every preceding byte
//
// All integers and floats are little-endian.
namespace stn {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

inline constexpr std::uint16_t kTensorFormatVersion = 1;

struct Tensor {
  std::string name;
  DType dtype = DType::F64;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;  // f32 tensors hold float-representable values

  std::size_t element_count() const;
};

/// Ordered collection of named tensors; order is preserved on disk.
using TensorMap = std::vector<Tensor>;

const Tensor* find_tensor(const TensorMap& tensors, std::string_view name);
const Tensor& require_tensor(const TensorMap& tensors, std::string_view name);

std::vector<std::uint8_t> serialize_tensors(const TensorMap& tensors);
/// Throws FormatError (with byte offset) on malformed input and
/// ChecksumMismatch when the trailing CRC does not match.
TensorMap parse_tensors(std::span<const std::uint8_t> bytes);

void save_tensors(const std::filesystem::path& path, const TensorMap& tensors);
TensorMap load_tensors(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

Tensor image_to_tensor(const Image& image, std::string name, DType dtype = DType::F32);
/// Accepts H×W×C tensors; throws FormatError for any other shape.
Image tensor_to_image(const Tensor& tensor);

TensorMap params_to_tensors(const EncoderParams& params);
/// Fills every tensor of a parameter set shaped by `config` from `tensors`.
EncoderParams params_from_tensors(const EncoderConfig& config, const TensorMap& tensors);

}  // namespace stn
