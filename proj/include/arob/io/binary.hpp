#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include "arob/error.hpp"
#include "arob/tensor.hpp"

namespace arob::io {

namespace fs = std::filesystem;

using Bytes = std::vector<std::uint8_t>;

/// A tensor read from disk whose element type is only known at runtime.
using AnyTensor = std::variant<Tensor<float>, Tensor<std::int32_t>>;

template <typename U>
void put_le(Bytes& out, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  std::uint8_t raw[sizeof(U)];
  std::memcpy(raw, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
  out.insert(out.end(), raw, raw + sizeof(U));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  std::uint8_t raw[sizeof(U)];
  std::memcpy(raw, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
  U v;
  std::memcpy(&v, raw, sizeof(U));
  return v;
}

template <typename U>
void put_le_at(Bytes& out, std::size_t offset, U value) {
  Bytes tmp;
  put_le(tmp, value);
  std::copy(tmp.begin(), tmp.end(), out.begin() + static_cast<std::ptrdiff_t>(offset));
}

template <typename T>
void put_payload(Bytes& out, std::span<const T> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * sizeof(T));
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + start, values.data(), values.size() * sizeof(T));
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) put_le_at(out, start + i * sizeof(T), values[i]);
  }
}

template <typename T>
std::vector<T> get_payload(const std::uint8_t* p, std::size_t count) {
  std::vector<T> out(count);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), p, count * sizeof(T));
  } else {
    for (std::size_t i = 0; i < count; ++i) out[i] = get_le<T>(p + i * sizeof(T));
  }
  return out;
}

inline Bytes read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return Bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

/// Writes via a sibling temp file and rename, so readers never see partial output.
inline void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text(const fs::path& path) {
  const Bytes b = read_file(path);
  return std::string(b.begin(), b.end());
}

}  // namespace arob::io
