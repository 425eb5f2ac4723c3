#pragma once

// Binary PGM (P5, maxval 255) mid-plane slices of a rank-3 volume.

#include <array>
#include <sstream>

#include "arob/io/binary.hpp"

namespace arob::io {

enum class Plane { axial, coronal, sagittal };

inline const char* to_string(Plane p) {
  switch (p) {
    case Plane::axial: return "axial";
    case Plane::coronal: return "coronal";
    case Plane::sagittal: return "sagittal";
  }
  return "?";
}

/// Mid-plane slice as (rows, cols) values. Axial fixes D, coronal fixes H,
/// sagittal fixes W.
template <typename T>
Tensor<float> mid_plane(const Tensor<T>& v, Plane plane) {
  if (v.rank() != 3) throw ShapeError("slice: expected a rank-3 volume, got " + shape_str(v.shape()));
  const std::size_t D = v.extent(0), H = v.extent(1), W = v.extent(2);
  switch (plane) {
    case Plane::axial: {
      Tensor<float> s({H, W});
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) s[h * W + w] = static_cast<float>(v[((D / 2) * H + h) * W + w]);
      return s;
    }
    case Plane::coronal: {
      Tensor<float> s({D, W});
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t w = 0; w < W; ++w) s[d * W + w] = static_cast<float>(v[(d * H + H / 2) * W + w]);
      return s;
    }
    case Plane::sagittal: {
      Tensor<float> s({D, H});
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t h = 0; h < H; ++h) s[d * H + h] = static_cast<float>(v[(d * H + h) * W + W / 2]);
      return s;
    }
  }
  throw UsageError("slice: unknown plane");
}

/// Min-max maps the slice to 0..255; a constant slice maps to 0.
inline Bytes encode_pgm(const Tensor<float>& slice) {
  if (slice.rank() != 2) throw ShapeError("pgm: expected a rank-2 slice");
  float lo = slice[0], hi = slice[0];
  for (float x : slice.data()) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  std::ostringstream head;
  head << "P5\n" << slice.extent(1) << " " << slice.extent(0) << "\n255\n";
  const std::string h = head.str();
  Bytes out(h.begin(), h.end());
  for (float x : slice.data()) {
    const double t = hi > lo ? (static_cast<double>(x) - lo) / (static_cast<double>(hi) - lo) : 0.0;
    out.push_back(static_cast<std::uint8_t>(std::lround(t * 255.0)));
  }
  return out;
}

struct PgmHeader {
  std::size_t width = 0, height = 0, maxval = 0;
};

inline PgmHeader read_pgm_header(std::span<const std::uint8_t> bytes) {
  std::string text(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(bytes.size(), 64)));
  std::istringstream in(text);
  std::string magic;
  PgmHeader h;
  if (!(in >> magic >> h.width >> h.height >> h.maxval) || magic != "P5") throw FormatError("pgm: malformed header");
  return h;
}

/// Writes <stem>_axial.pgm, <stem>_coronal.pgm, <stem>_sagittal.pgm.
template <typename T>
std::array<fs::path, 3> write_mid_planes(const fs::path& stem, const Tensor<T>& volume) {
  std::array<fs::path, 3> out;
  const Plane planes[3] = {Plane::axial, Plane::coronal, Plane::sagittal};
  for (int i = 0; i < 3; ++i) {
    out[i] = stem;
    out[i] += std::string("_") + to_string(planes[i]) + ".pgm";
    write_file_atomic(out[i], encode_pgm(mid_plane(volume, planes[i])));
  }
  return out;
}

}  // namespace arob::io
