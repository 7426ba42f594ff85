#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vg/error.hpp"

// Plain (non-differentiable) dense 3D volumes, row-major in (z, y, x),
// plus the versioned binary volume file format and the resampling
// helpers shared by phantom generation and evaluation.

namespace vg::vol {

template <class T>
struct Volume3 {
  int64_t d = 0, h = 0, w = 0;
  std::vector<T> data;

  Volume3() = default;
  Volume3(int64_t d_, int64_t h_, int64_t w_, T fill = T{})
      : d(d_), h(h_), w(w_), data(static_cast<size_t>(d_ * h_ * w_), fill) {}

  int64_t numel() const { return d * h * w; }
  bool same_extents(const Volume3& o) const { return d == o.d && h == o.h && w == o.w; }
  int64_t index(int64_t z, int64_t y, int64_t x) const { return (z * h + y) * w + x; }
  T& at(int64_t z, int64_t y, int64_t x) { return data[static_cast<size_t>(index(z, y, x))]; }
  const T& at(int64_t z, int64_t y, int64_t x) const {
    return data[static_cast<size_t>(index(z, y, x))];
  }
  bool inside(int64_t z, int64_t y, int64_t x) const {
    return z >= 0 && z < d && y >= 0 && y < h && x >= 0 && x < w;
  }
};

using FloatVolume = Volume3<float>;
using ByteVolume = Volume3<uint8_t>;
using MaskVolume = Volume3<uint8_t>;  // values 0/1

// ---- versioned binary volume files ----
void write_volume(const std::string& path, const FloatVolume& v);
void write_volume(const std::string& path, const ByteVolume& v);
FloatVolume read_float_volume(const std::string& path);
ByteVolume read_byte_volume(const std::string& path);

// ---- run-length encoding over the flattened (z,y,x) index space ----
using Rle = std::vector<std::pair<int64_t, int64_t>>;  // (start, length)
Rle mask_to_rle(const MaskVolume& m);
MaskVolume rle_to_mask(int64_t d, int64_t h, int64_t w, const Rle& runs);

int64_t mask_count(const MaskVolume& m);
int64_t mask_intersection(const MaskVolume& a, const MaskVolume& b);

// Center-aligned trilinear interpolation with edge clamping; values stay
// within the input range.
FloatVolume upsample_trilinear(const FloatVolume& src, int64_t d, int64_t h, int64_t w);

// Block reductions by an integer factor (ceil blocks at the far edge).
MaskVolume downsample_blockmax(const MaskVolume& m, int64_t factor);
FloatVolume downsample_blockmean(const FloatVolume& v, int64_t factor);

}  // namespace vg::vol
