#include "vg/volume.hpp"

#include <algorithm>
#include <cmath>

#include "vg/binio.hpp"

namespace vg::vol {

namespace {

constexpr char kMagic[9] = "VGVOLUME";
constexpr uint32_t kVersion = 1;
constexpr uint8_t kDtypeF32 = 0;
constexpr uint8_t kDtypeU8 = 1;

void write_header(std::ostream& os, uint8_t dtype, int64_t d, int64_t h, int64_t w) {
  io::write_magic(os, kMagic);
  io::write_pod<uint32_t>(os, kVersion);
  io::write_pod<uint8_t>(os, dtype);
  const uint8_t pad[3] = {0, 0, 0};
  io::write_bytes(os, pad, 3);
  io::write_pod<uint32_t>(os, static_cast<uint32_t>(d));
  io::write_pod<uint32_t>(os, static_cast<uint32_t>(h));
  io::write_pod<uint32_t>(os, static_cast<uint32_t>(w));
}

uint8_t read_header(std::istream& is, const std::string& path, int64_t& d, int64_t& h, int64_t& w) {
  io::expect_magic(is, kMagic, path);
  const uint32_t version = io::read_pod<uint32_t>(is, "version");
  check_data(version == kVersion, "unsupported volume version in " + path);
  const uint8_t dtype = io::read_pod<uint8_t>(is, "dtype");
  uint8_t pad[3];
  io::read_bytes(is, pad, 3, "padding");
  d = io::read_pod<uint32_t>(is, "extent d");
  h = io::read_pod<uint32_t>(is, "extent h");
  w = io::read_pod<uint32_t>(is, "extent w");
  check_data(d > 0 && h > 0 && w > 0, "empty volume in " + path);
  return dtype;
}

}  // namespace

void write_volume(const std::string& path, const FloatVolume& v) {
  auto os = io::open_write(path);
  write_header(os, kDtypeF32, v.d, v.h, v.w);
  io::write_bytes(os, v.data.data(), v.data.size() * sizeof(float));
  check_data(os.good(), "write failed: " + path);
}

void write_volume(const std::string& path, const ByteVolume& v) {
  auto os = io::open_write(path);
  write_header(os, kDtypeU8, v.d, v.h, v.w);
  io::write_bytes(os, v.data.data(), v.data.size());
  check_data(os.good(), "write failed: " + path);
}

FloatVolume read_float_volume(const std::string& path) {
  auto is = io::open_read(path);
  int64_t d, h, w;
  const uint8_t dtype = read_header(is, path, d, h, w);
  check_data(dtype == kDtypeF32, "expected float32 volume: " + path);
  FloatVolume v(d, h, w);
  io::read_bytes(is, v.data.data(), v.data.size() * sizeof(float), "volume payload");
  return v;
}

ByteVolume read_byte_volume(const std::string& path) {
  auto is = io::open_read(path);
  int64_t d, h, w;
  const uint8_t dtype = read_header(is, path, d, h, w);
  check_data(dtype == kDtypeU8, "expected uint8 volume: " + path);
  ByteVolume v(d, h, w);
  io::read_bytes(is, v.data.data(), v.data.size(), "volume payload");
  return v;
}

Rle mask_to_rle(const MaskVolume& m) {
  Rle runs;
  int64_t start = -1;
  for (int64_t i = 0; i < m.numel(); ++i) {
    const bool on = m.data[static_cast<size_t>(i)] != 0;
    if (on && start < 0) start = i;
    if (!on && start >= 0) {
      runs.emplace_back(start, i - start);
      start = -1;
    }
  }
  if (start >= 0) runs.emplace_back(start, m.numel() - start);
  return runs;
}

MaskVolume rle_to_mask(int64_t d, int64_t h, int64_t w, const Rle& runs) {
  MaskVolume m(d, h, w, 0);
  for (const auto& [start, len] : runs) {
    check_data(start >= 0 && len > 0 && start + len <= m.numel(), "run out of bounds");
    std::fill(m.data.begin() + start, m.data.begin() + start + len, uint8_t{1});
  }
  return m;
}

int64_t mask_count(const MaskVolume& m) {
  int64_t n = 0;
  for (uint8_t v : m.data) n += v != 0;
  return n;
}

int64_t mask_intersection(const MaskVolume& a, const MaskVolume& b) {
  check(a.same_extents(b), "mask_intersection: extent mismatch");
  int64_t n = 0;
  for (size_t i = 0; i < a.data.size(); ++i) n += (a.data[i] != 0 && b.data[i] != 0);
  return n;
}

FloatVolume upsample_trilinear(const FloatVolume& src, int64_t d, int64_t h, int64_t w) {
  FloatVolume out(d, h, w);
  const double sz = static_cast<double>(src.d) / static_cast<double>(d);
  const double sy = static_cast<double>(src.h) / static_cast<double>(h);
  const double sx = static_cast<double>(src.w) / static_cast<double>(w);
  auto clamp_idx = [](double v, int64_t n) {
    return std::clamp<int64_t>(static_cast<int64_t>(std::floor(v)), 0, n - 1);
  };
  for (int64_t z = 0; z < d; ++z) {
    const double fz = (static_cast<double>(z) + 0.5) * sz - 0.5;
    const int64_t z0 = clamp_idx(fz, src.d);
    const int64_t z1 = std::min(z0 + 1, src.d - 1);
    const double tz = std::clamp(fz - static_cast<double>(z0), 0.0, 1.0);
    for (int64_t y = 0; y < h; ++y) {
      const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
      const int64_t y0 = clamp_idx(fy, src.h);
      const int64_t y1 = std::min(y0 + 1, src.h - 1);
      const double ty = std::clamp(fy - static_cast<double>(y0), 0.0, 1.0);
      for (int64_t x = 0; x < w; ++x) {
        const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
        const int64_t x0 = clamp_idx(fx, src.w);
        const int64_t x1 = std::min(x0 + 1, src.w - 1);
        const double tx = std::clamp(fx - static_cast<double>(x0), 0.0, 1.0);
        const double c00 = src.at(z0, y0, x0) + tx * (src.at(z0, y0, x1) - src.at(z0, y0, x0));
        const double c01 = src.at(z0, y1, x0) + tx * (src.at(z0, y1, x1) - src.at(z0, y1, x0));
        const double c10 = src.at(z1, y0, x0) + tx * (src.at(z1, y0, x1) - src.at(z1, y0, x0));
        const double c11 = src.at(z1, y1, x0) + tx * (src.at(z1, y1, x1) - src.at(z1, y1, x0));
        const double c0 = c00 + ty * (c01 - c00);
        const double c1 = c10 + ty * (c11 - c10);
        out.at(z, y, x) = static_cast<float>(c0 + tz * (c1 - c0));
      }
    }
  }
  return out;
}

MaskVolume downsample_blockmax(const MaskVolume& m, int64_t factor) {
  check(factor >= 1, "downsample_blockmax: factor must be >= 1");
  const int64_t d = (m.d + factor - 1) / factor;
  const int64_t h = (m.h + factor - 1) / factor;
  const int64_t w = (m.w + factor - 1) / factor;
  MaskVolume out(d, h, w, 0);
  for (int64_t z = 0; z < m.d; ++z)
    for (int64_t y = 0; y < m.h; ++y)
      for (int64_t x = 0; x < m.w; ++x)
        if (m.at(z, y, x)) out.at(z / factor, y / factor, x / factor) = 1;
  return out;
}

FloatVolume downsample_blockmean(const FloatVolume& v, int64_t factor) {
  check(factor >= 1, "downsample_blockmean: factor must be >= 1");
  const int64_t d = (v.d + factor - 1) / factor;
  const int64_t h = (v.h + factor - 1) / factor;
  const int64_t w = (v.w + factor - 1) / factor;
  FloatVolume out(d, h, w);
  Volume3<int32_t> counts(d, h, w, 0);
  for (int64_t z = 0; z < v.d; ++z)
    for (int64_t y = 0; y < v.h; ++y)
      for (int64_t x = 0; x < v.w; ++x) {
        out.at(z / factor, y / factor, x / factor) += v.at(z, y, x);
        counts.at(z / factor, y / factor, x / factor) += 1;
      }
  for (int64_t i = 0; i < out.numel(); ++i)
    out.data[static_cast<size_t>(i)] /= static_cast<float>(counts.data[static_cast<size_t>(i)]);
  return out;
}

}  // namespace vg::vol
