#pragma once

// Minimal single-file NIfTI-1 (.nii) codec for rank-3 volumes. Tensors are
// (D, H, W) row-major, which is NIfTI storage order with dim[1] = W fastest.

#include "arob/io/binary.hpp"

namespace arob::io {

namespace nifti {
inline constexpr std::int32_t kHeaderSize = 348;
inline constexpr float kVoxOffset = 352.0f;

inline constexpr std::int16_t kUint8 = 2;
inline constexpr std::int16_t kInt16 = 4;
inline constexpr std::int16_t kInt32 = 8;
inline constexpr std::int16_t kFloat32 = 16;
inline constexpr std::int16_t kFloat64 = 64;

// Field offsets within the 348-byte header.
inline constexpr std::size_t kDim = 40;
inline constexpr std::size_t kDatatype = 70;
inline constexpr std::size_t kBitpix = 72;
inline constexpr std::size_t kPixdim = 76;
inline constexpr std::size_t kVoxOffsetField = 108;
inline constexpr std::size_t kSclSlope = 112;
inline constexpr std::size_t kSclInter = 116;
inline constexpr std::size_t kXyztUnits = 123;
inline constexpr std::size_t kDescrip = 148;
inline constexpr std::size_t kQformCode = 252;
inline constexpr std::size_t kSformCode = 254;
inline constexpr std::size_t kSrowX = 280;
inline constexpr std::size_t kMagic = 344;
}  // namespace nifti

template <typename T>
Bytes encode_nifti(const Tensor<T>& volume) {
  if (volume.rank() != 3)
    throw ShapeError("nifti export: expected a rank-3 volume, got " + shape_str(volume.shape()));
  for (std::size_t e : volume.shape())
    if (e > 32767) throw ShapeError("nifti export: extent exceeds 32767");
  std::int16_t datatype, bitpix;
  if constexpr (std::is_same_v<T, float>) {
    datatype = nifti::kFloat32;
    bitpix = 32;
  } else {
    static_assert(std::is_same_v<T, std::int32_t>);
    datatype = nifti::kInt32;
    bitpix = 32;
  }

  Bytes out(352, 0);
  put_le_at<std::int32_t>(out, 0, nifti::kHeaderSize);
  const std::int16_t dims[8] = {3,
                                static_cast<std::int16_t>(volume.extent(2)),
                                static_cast<std::int16_t>(volume.extent(1)),
                                static_cast<std::int16_t>(volume.extent(0)),
                                1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put_le_at<std::int16_t>(out, nifti::kDim + 2 * i, dims[i]);
  put_le_at<std::int16_t>(out, nifti::kDatatype, datatype);
  put_le_at<std::int16_t>(out, nifti::kBitpix, bitpix);
  const float pixdim[8] = {1, 1, 1, 1, 0, 0, 0, 0};
  for (int i = 0; i < 8; ++i) put_le_at<float>(out, nifti::kPixdim + 4 * i, pixdim[i]);
  put_le_at<float>(out, nifti::kVoxOffsetField, nifti::kVoxOffset);
  put_le_at<float>(out, nifti::kSclSlope, 1.0f);
  put_le_at<float>(out, nifti::kSclInter, 0.0f);
  out[nifti::kXyztUnits] = 2;  // mm
  const char descrip[] = "arob volume";
  std::copy(descrip, descrip + sizeof(descrip) - 1, out.begin() + nifti::kDescrip);
  put_le_at<std::int16_t>(out, nifti::kQformCode, 0);
  put_le_at<std::int16_t>(out, nifti::kSformCode, 1);
  for (int row = 0; row < 3; ++row)
    for (int col = 0; col < 4; ++col)
      put_le_at<float>(out, nifti::kSrowX + 16 * row + 4 * col, row == col ? 1.0f : 0.0f);
  const char magic[4] = {'n', '+', '1', '\0'};
  std::copy(magic, magic + 4, out.begin() + nifti::kMagic);
  // bytes 348..351: empty extension flag
  put_payload<T>(out, volume.data());
  return out;
}

inline AnyTensor decode_nifti(std::span<const std::uint8_t> bytes, const std::string& origin = "nifti") {
  auto fail = [&](const std::string& why) { throw FormatError(origin + ": " + why); };
  if (bytes.size() < 348) fail("truncated header");
  const auto hdr_size = get_le<std::int32_t>(bytes.data());
  if (hdr_size != nifti::kHeaderSize) {
    if (hdr_size == 0x5C010000) fail("big-endian NIfTI files are not supported");
    fail("sizeof_hdr is " + std::to_string(hdr_size) + ", expected 348");
  }
  const char* magic = reinterpret_cast<const char*>(bytes.data() + nifti::kMagic);
  if (!(magic[0] == 'n' && magic[1] == '+' && magic[2] == '1' && magic[3] == '\0'))
    fail("magic is not \"n+1\" (only single-file NIfTI-1 is supported)");
  std::int16_t dim[8];
  for (int i = 0; i < 8; ++i) dim[i] = get_le<std::int16_t>(bytes.data() + nifti::kDim + 2 * i);
  if (dim[0] != 3) fail("unsupported shape: rank " + std::to_string(dim[0]) + " (only rank-3 volumes)");
  for (int i = 1; i <= 3; ++i)
    if (dim[i] <= 0) fail("non-positive extent dim[" + std::to_string(i) + "]");
  const auto datatype = get_le<std::int16_t>(bytes.data() + nifti::kDatatype);
  const float vox_offset = get_le<float>(bytes.data() + nifti::kVoxOffsetField);
  if (!(vox_offset >= 352.0f)) fail("vox_offset below 352");
  const auto offset = static_cast<std::size_t>(vox_offset);
  const Shape shape{static_cast<std::size_t>(dim[3]), static_cast<std::size_t>(dim[2]),
                    static_cast<std::size_t>(dim[1])};
  const std::size_t n = shape_numel(shape);

  std::size_t elem = 0;
  switch (datatype) {
    case nifti::kUint8: elem = 1; break;
    case nifti::kInt16: elem = 2; break;
    case nifti::kInt32: elem = 4; break;
    case nifti::kFloat32: elem = 4; break;
    case nifti::kFloat64: elem = 8; break;
    default: fail("unsupported datatype code " + std::to_string(datatype));
  }
  if (bytes.size() < offset + n * elem)
    fail("payload truncated: expected " + std::to_string(n * elem) + " bytes, got " +
         std::to_string(bytes.size() > offset ? bytes.size() - offset : 0));
  const std::uint8_t* p = bytes.data() + offset;

  const float slope = get_le<float>(bytes.data() + nifti::kSclSlope);
  const float inter = get_le<float>(bytes.data() + nifti::kSclInter);
  const bool scaled = slope != 0.0f && (slope != 1.0f || inter != 0.0f);

  if (datatype == nifti::kFloat32 || datatype == nifti::kFloat64 || scaled) {
    std::vector<float> v(n);
    for (std::size_t i = 0; i < n; ++i) {
      double x;
      switch (datatype) {
        case nifti::kUint8: x = p[i]; break;
        case nifti::kInt16: x = get_le<std::int16_t>(p + 2 * i); break;
        case nifti::kInt32: x = get_le<std::int32_t>(p + 4 * i); break;
        case nifti::kFloat32: x = get_le<float>(p + 4 * i); break;
        default: x = get_le<double>(p + 8 * i); break;
      }
      v[i] = scaled ? static_cast<float>(x * slope + inter) : static_cast<float>(x);
    }
    return Tensor<float>(shape, std::move(v));
  }
  std::vector<std::int32_t> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (datatype) {
      case nifti::kUint8: v[i] = p[i]; break;
      case nifti::kInt16: v[i] = get_le<std::int16_t>(p + 2 * i); break;
      default: v[i] = get_le<std::int32_t>(p + 4 * i); break;
    }
  }
  return Tensor<std::int32_t>(shape, std::move(v));
}

template <typename T>
void export_nifti(const fs::path& path, const Tensor<T>& volume) {
  write_file_atomic(path, encode_nifti(volume));
}

inline AnyTensor import_nifti(const fs::path& path) {
  const Bytes b = read_file(path);
  return decode_nifti(b, path.string());
}

inline bool looks_like_nifti(const fs::path& path) {
  const std::string ext = path.extension().string();
  return ext == ".nii";
}

}  // namespace arob::io
