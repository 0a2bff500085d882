#include "stn/tensor_io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "stn/error.hpp"

static_assert(std::endian::native == std::endian::little, "tensor container assumes a little-endian host");

namespace stn {

namespace {

[[noreturn]] void format_error(std::size_t offset, const std::string& message) {
  Error e(ErrorKind::FormatError, message + " (byte offset " + std::to_string(offset) + ")");
  e.at_offset(offset);
  throw e;
}

template <class T>
void put(std::vector<std::uint8_t>& out, T value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) {
    if (remaining() < n)
      format_error(pos_, std::string("truncated while reading ") + what + ": need " + std::to_string(n) +
                             " bytes, " + std::to_string(remaining()) + " left");
  }

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded pieces.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
    crc = crc32(crc, bytes.data() + pos, static_cast<uInt>(n));
    pos += n;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::size_t Tensor::element_count() const {
  std::size_t n = 1;
  for (std::uint32_t d : dims) n *= d;
  return n;
}

const Tensor* find_tensor(const TensorMap& tensors, std::string_view name) {
  for (const Tensor& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

const Tensor& require_tensor(const TensorMap& tensors, std::string_view name) {
  const Tensor* t = find_tensor(tensors, name);
  if (t == nullptr) fail(ErrorKind::FormatError, "missing tensor '" + std::string(name) + "'");
  return *t;
}

std::vector<std::uint8_t> serialize_tensors(const TensorMap& tensors) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'S', 'T', 'N', 'T'});
  put<std::uint16_t>(out, kTensorFormatVersion);
  if (tensors.size() > std::numeric_limits<std::uint32_t>::max())
    fail(ErrorKind::FormatError, "too many tensors");
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const Tensor& t : tensors) {
    if (t.name.size() > std::numeric_limits<std::uint16_t>::max())
      fail(ErrorKind::FormatError, "tensor name too long");
    if (t.dims.size() > std::numeric_limits<std::uint8_t>::max())
      fail(ErrorKind::FormatError, "tensor '" + t.name + "' has too many dimensions");
    if (t.element_count() != t.values.size())
      fail(ErrorKind::FormatError, "tensor '" + t.name + "' dims do not match its value count");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims.size()));
    for (std::uint32_t d : t.dims) put<std::uint32_t>(out, d);
    if (t.dtype == DType::F32) {
      for (double v : t.values) put<float>(out, static_cast<float>(v));
    } else {
      for (double v : t.values) put<double>(out, v);
    }
  }
  put<std::uint32_t>(out, crc32_of(out));
  return out;
}

TensorMap parse_tensors(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), "STNT", 4) != 0) format_error(0, "bad magic, not a tensor container");
  const std::size_t version_at = r.offset();
  const auto version = r.get<std::uint16_t>("version");
  if (version != kTensorFormatVersion)
    format_error(version_at, "unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("tensor count");

  TensorMap tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t;
    const auto name_len = r.get<std::uint16_t>("name length");
    const auto name = r.take(name_len, "tensor name");
    t.name.assign(name.begin(), name.end());
    const std::size_t dtype_at = r.offset();
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype > 1) format_error(dtype_at, "unknown dtype " + std::to_string(dtype));
    t.dtype = static_cast<DType>(dtype);
    const auto ndim = r.get<std::uint8_t>("ndim");
    const std::size_t width = t.dtype == DType::F32 ? 4 : 8;
    std::uint64_t elements = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      const auto dim = r.get<std::uint32_t>("dimension");
      t.dims.push_back(dim);
      elements *= dim;
      if (elements * width > bytes.size())
        format_error(r.offset(), "tensor '" + t.name + "' is larger than the file");
    }
    const auto payload = r.take(static_cast<std::size_t>(elements * width), "tensor payload");
    t.values.resize(static_cast<std::size_t>(elements));
    for (std::size_t k = 0; k < t.values.size(); ++k) {
      if (t.dtype == DType::F32) {
        float f;
        std::memcpy(&f, payload.data() + k * 4, 4);
        t.values[k] = f;
      } else {
        std::memcpy(&t.values[k], payload.data() + k * 8, 8);
      }
    }
    tensors.push_back(std::move(t));
  }
  const std::size_t crc_at = r.offset();
  const auto stored = r.get<std::uint32_t>("checksum");
  if (r.remaining() != 0) format_error(r.offset(), "trailing bytes after checksum");
  const std::uint32_t actual = crc32_of(bytes.first(crc_at));
  if (stored != actual) {
    Error e(ErrorKind::ChecksumMismatch, "stored CRC-32 " + std::to_string(stored) + " but computed " +
                                             std::to_string(actual));
    e.at_offset(crc_at);
    throw e;
  }
  return tensors;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::FormatError, "cannot open '" + tmp.string() + "' for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) fail(ErrorKind::FormatError, "short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::FormatError, "cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void save_tensors(const std::filesystem::path& path, const TensorMap& tensors) {
  const auto bytes = serialize_tensors(tensors);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

TensorMap load_tensors(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return parse_tensors(bytes);
  } catch (Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

Tensor image_to_tensor(const Image& image, std::string name, DType dtype) {
  Tensor t;
  t.name = std::move(name);
  t.dtype = dtype;
  t.dims = {static_cast<std::uint32_t>(image.height), static_cast<std::uint32_t>(image.width),
            static_cast<std::uint32_t>(image.channels)};
  t.values = image.pixels;
  if (dtype == DType::F32)
    for (double& v : t.values) v = static_cast<float>(v);
  return t;
}

Image tensor_to_image(const Tensor& tensor) {
  if (tensor.dims.size() != 3)
    fail(ErrorKind::FormatError, "image tensor '" + tensor.name + "' must have 3 dimensions");
  Image img;
  img.height = tensor.dims[0];
  img.width = tensor.dims[1];
  img.channels = tensor.dims[2];
  img.pixels = tensor.values;
  return img;
}

TensorMap params_to_tensors(const EncoderParams& params) {
  TensorMap out;
  params.visit([&](const std::string& name, const Matrix& m) {
    Tensor t;
    t.name = name;
    t.dtype = DType::F64;
    t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
    t.values = m.storage();
    out.push_back(std::move(t));
  });
  return out;
}

EncoderParams params_from_tensors(const EncoderConfig& config, const TensorMap& tensors) {
  EncoderParams p = zeros_like(init_params(config, 0));
  p.visit([&](const std::string& name, Matrix& m) {
    const Tensor& t = require_tensor(tensors, name);
    if (t.dims.size() != 2 || t.dims[0] != m.rows() || t.dims[1] != m.cols())
      fail(ErrorKind::FormatError, "tensor '" + name + "' has the wrong shape for this encoder config");
    m.storage() = t.values;
  });
  return p;
}

}  // namespace stn
