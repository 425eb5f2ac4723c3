#pragma once

// Volume container: "AROB" | u16 version | u8 dtype | u8 rank | u32 extents[rank]
// | row-major little-endian payload. Metadata lives in a JSON sidecar at
// <path>.json.

#include "json.hpp"

#include "arob/io/binary.hpp"

namespace arob::io {

inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr char kContainerMagic[4] = {'A', 'R', 'O', 'B'};

enum class DType : std::uint8_t { f32 = 1, i32 = 2 };

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else {
    static_assert(std::is_same_v<T, std::int32_t>, "container stores f32 or i32");
    return DType::i32;
  }
}

template <typename T>
Bytes encode_container(const Tensor<T>& t) {
  Bytes out;
  out.reserve(8 + 4 * t.rank() + 4 * t.size());
  for (char c : kContainerMagic) out.push_back(static_cast<std::uint8_t>(c));
  put_le<std::uint16_t>(out, kContainerVersion);
  out.push_back(static_cast<std::uint8_t>(dtype_of<T>()));
  if (t.rank() == 0 || t.rank() > 255) throw DataError("container: unsupported rank " + std::to_string(t.rank()));
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
  put_payload<T>(out, t.data());
  return out;
}

inline AnyTensor decode_container(std::span<const std::uint8_t> bytes, const std::string& origin = "container") {
  auto fail = [&](const std::string& why) { throw FormatError(origin + ": " + why); };
  if (bytes.size() < 8) fail("truncated header");
  if (!std::equal(kContainerMagic, kContainerMagic + 4, bytes.begin())) fail("bad magic (expected AROB)");
  const auto version = get_le<std::uint16_t>(bytes.data() + 4);
  if (version != kContainerVersion)
    fail("unsupported version " + std::to_string(version) + " (expected " + std::to_string(kContainerVersion) + ")");
  const std::uint8_t dtype = bytes[6];
  const std::uint8_t rank = bytes[7];
  if (rank == 0) fail("rank 0");
  const std::size_t header = 8 + 4 * std::size_t{rank};
  if (bytes.size() < header) fail("truncated extents");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = get_le<std::uint32_t>(bytes.data() + 8 + 4 * i);
    if (shape[i] == 0) fail("zero extent on axis " + std::to_string(i));
  }
  const std::size_t n = shape_numel(shape);
  const std::size_t elem = 4;
  if (dtype != static_cast<std::uint8_t>(DType::f32) && dtype != static_cast<std::uint8_t>(DType::i32))
    fail("unknown dtype code " + std::to_string(dtype));
  const std::size_t expected = n * elem;
  const std::size_t actual = bytes.size() - header;
  if (actual != expected)
    fail("payload size mismatch: expected " + std::to_string(expected) + " bytes, got " + std::to_string(actual));
  if (dtype == static_cast<std::uint8_t>(DType::f32))
    return Tensor<float>(shape, get_payload<float>(bytes.data() + header, n));
  return Tensor<std::int32_t>(shape, get_payload<std::int32_t>(bytes.data() + header, n));
}

inline fs::path sidecar_path(const fs::path& path) {
  fs::path p = path;
  p += ".json";
  return p;
}

template <typename T>
void write_container(const fs::path& path, const Tensor<T>& t, const nlohmann::json& meta = nullptr) {
  write_file_atomic(path, encode_container(t));
  if (!meta.is_null()) write_text_atomic(sidecar_path(path), meta.dump(2) + "\n");
}

inline AnyTensor read_container(const fs::path& path) {
  const Bytes b = read_file(path);
  return decode_container(b, path.string());
}

template <typename T>
Tensor<T> read_container_as(const fs::path& path) {
  AnyTensor any = read_container(path);
  if (auto* t = std::get_if<Tensor<T>>(&any)) return std::move(*t);
  throw FormatError(path.string() + ": unexpected dtype");
}

inline nlohmann::json read_sidecar(const fs::path& path) {
  const fs::path p = sidecar_path(path);
  if (!fs::exists(p)) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(read_text(p));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

}  // namespace arob::io
