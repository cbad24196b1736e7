#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "gradshield/errors.hpp"
#include "gradshield/tensor.hpp"

namespace gradshield {

// Tensor blob:  "GTNS" | u32 version | u32 rank | u32 extent * rank | u8 tag | values
// Checkpoint:   "GSCK" | u32 version | u32 len + descriptor | u32 count |
//               (u32 len + name | tensor blob) * count
// All integers and values little-endian.

inline constexpr std::uint32_t kTensorFormatVersion = 1;
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

enum class ScalarTag : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr ScalarTag scalar_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "float or double only");
  return std::is_same_v<T, float> ? ScalarTag::f32 : ScalarTag::f64;
}

namespace io {

template <typename U>
void put_le(std::ostream& os, U value) {
  static_assert(std::is_unsigned_v<U>);
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  os.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& is, const char* what) {
  std::array<unsigned char, sizeof(U)> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw FormatError(std::string("truncated input while reading ") + what);
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, const char* what, std::uint32_t max_len = 1u << 20) {
  const auto len = get_le<std::uint32_t>(is, what);
  if (len > max_len) throw FormatError(std::string("implausible length for ") + what);
  std::string s(len, '\0');
  if (len && !is.read(s.data(), len)) throw FormatError(std::string("truncated input while reading ") + what);
  return s;
}

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char got[4];
  if (!is.read(got, 4)) throw FormatError("truncated input while reading magic");
  if (std::memcmp(got, magic, 4) != 0) throw FormatError(std::string("bad magic, expected ") + magic);
}

}  // namespace io

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write("GTNS", 4);
  io::put_le<std::uint32_t>(os, kTensorFormatVersion);
  io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  io::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(scalar_tag<T>()));
  using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
  for (T v : t.values()) io::put_le<Bits>(os, std::bit_cast<Bits>(v));
}

/// Reads a tensor blob of either scalar type, converting to T.
template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  io::expect_magic(is, "GTNS");
  const auto version = io::get_le<std::uint32_t>(is, "tensor version");
  if (version != kTensorFormatVersion) {
    throw FormatError("unsupported tensor format version " + std::to_string(version));
  }
  const auto rank = io::get_le<std::uint32_t>(is, "tensor rank");
  if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = io::get_le<std::uint32_t>(is, "tensor extent");
  const auto tag = io::get_le<std::uint8_t>(is, "scalar tag");
  const std::size_t n = shape_numel(shape);
  if (n > (std::size_t{1} << 32)) throw FormatError("implausible tensor size");
  std::vector<T> values(n);
  if (tag == static_cast<std::uint8_t>(ScalarTag::f32)) {
    for (auto& v : values) v = static_cast<T>(std::bit_cast<float>(io::get_le<std::uint32_t>(is, "tensor values")));
  } else if (tag == static_cast<std::uint8_t>(ScalarTag::f64)) {
    for (auto& v : values) v = static_cast<T>(std::bit_cast<double>(io::get_le<std::uint64_t>(is, "tensor values")));
  } else {
    throw FormatError("unknown scalar tag " + std::to_string(tag));
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_tensor(os, t);
  if (!os) throw FormatError("write failed for " + path);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_tensor<T>(is);
}

/// Parsed contents of a checkpoint container.
template <typename T>
struct CheckpointData {
  std::string descriptor;
  std::vector<std::pair<std::string, Tensor<T>>> params;
};

template <typename T>
void save_checkpoint_file(const std::string& path, const std::string& descriptor,
                          const std::vector<std::pair<std::string, Tensor<T>>>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os.write("GSCK", 4);
  io::put_le<std::uint32_t>(os, kCheckpointFormatVersion);
  io::put_string(os, descriptor);
  io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    io::put_string(os, name);
    write_tensor(os, tensor);
  }
  if (!os) throw FormatError("write failed for " + path);
}

template <typename T>
CheckpointData<T> load_checkpoint_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  io::expect_magic(is, "GSCK");
  const auto version = io::get_le<std::uint32_t>(is, "checkpoint version");
  if (version != kCheckpointFormatVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  CheckpointData<T> out;
  out.descriptor = io::get_string(is, "architecture descriptor");
  const auto count = io::get_le<std::uint32_t>(is, "parameter count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = io::get_string(is, "parameter name", 4096);
    out.params.emplace_back(std::move(name), read_tensor<T>(is));
  }
  return out;
}

/// "kind;key=value;key=value" architecture descriptors.
struct Descriptor {
  std::string kind;
  std::map<std::string, std::string> fields;

  std::string str() const {
    std::string s = kind;
    for (const auto& [k, v] : fields) s += ";" + k + "=" + v;
    return s;
  }

  static Descriptor parse(const std::string& text) {
    Descriptor d;
    std::size_t pos = text.find(';');
    d.kind = text.substr(0, pos);
    while (pos != std::string::npos) {
      const std::size_t next = text.find(';', pos + 1);
      const std::string item = text.substr(pos + 1, next == std::string::npos ? std::string::npos : next - pos - 1);
      const std::size_t eq = item.find('=');
      if (eq == std::string::npos) throw FormatError("descriptor entry without '=': " + item);
      d.fields[item.substr(0, eq)] = item.substr(eq + 1);
      pos = next;
    }
    return d;
  }

  const std::string& at(const std::string& key) const {
    auto it = fields.find(key);
    if (it == fields.end()) throw FormatError("descriptor missing key '" + key + "'");
    return it->second;
  }

  std::size_t size_at(const std::string& key) const {
    const std::string& v = at(key);
    try {
      return static_cast<std::size_t>(std::stoull(v));
    } catch (const std::exception&) {
      throw FormatError("descriptor key '" + key + "' is not an integer: " + v);
    }
  }
};

}  // namespace gradshield
