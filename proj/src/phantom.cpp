#include "vg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "vg/rng.hpp"

namespace vg::phantom {

std::vector<AnomalyTypeSpec> default_anomaly_types() {
  return {
      {"nodule", ShapeFamily::Sphere, 0.22, 0.35, 2.5, 4.5},
      {"mass", ShapeFamily::LumpySphere, 0.2, 0.32, 3.5, 5.5},
      {"cyst", ShapeFamily::Sphere, -0.3, -0.18, 2.5, 5.0},
      {"swelling", ShapeFamily::Bump, 0.12, 0.2, 3.5, 5.5},
      {"duct dilation", ShapeFamily::Tube, -0.28, -0.16, 3.0, 5.0},
      {"fluid collection", ShapeFamily::Shell, 0.18, 0.3, 3.0, 5.0},
  };
}

namespace {

struct OrganField {
  std::array<double, 3> center;  // (z, y, x)
  std::array<double, 3> radii;
  std::array<double, 3> warp_amp;
  std::array<double, 3> warp_freq;
  std::array<double, 3> warp_phase;

  // < 1 inside the deformed ellipsoid
  double membership(double z, double y, double x) const {
    const double pz = z + warp_amp[0] * std::sin(warp_freq[0] * y + warp_phase[0]);
    const double py = y + warp_amp[1] * std::sin(warp_freq[1] * x + warp_phase[1]);
    const double px = x + warp_amp[2] * std::sin(warp_freq[2] * z + warp_phase[2]);
    const double dz = (pz - center[0]) / radii[0];
    const double dy = (py - center[1]) / radii[1];
    const double dx = (px - center[2]) / radii[2];
    return dz * dz + dy * dy + dx * dx;
  }
};

void cell_layout(int organ_count, std::array<int64_t, 3>& cells) {
  const int64_t cx = static_cast<int64_t>(std::ceil(std::cbrt(static_cast<double>(organ_count))));
  const int64_t cy = static_cast<int64_t>(
      std::ceil(std::sqrt(static_cast<double>(organ_count) / static_cast<double>(cx))));
  const int64_t cz = (organ_count + cx * cy - 1) / (cx * cy);
  cells = {cz, cy, cx};
}

}  // namespace

Atlas generate_atlas(const PhantomSpec& spec, uint64_t seed) {
  check_config(spec.organ_count >= 2 && spec.organ_count <= 32,
               "organ_count must be in [2, 32]");
  check_config(spec.grid_d >= 16 && spec.grid_h >= 16 && spec.grid_w >= 16,
               "grid extents must be >= 16 per axis");

  std::array<int64_t, 3> cells;
  cell_layout(spec.organ_count, cells);
  const std::array<int64_t, 3> grid{spec.grid_d, spec.grid_h, spec.grid_w};
  std::array<double, 3> cell_ext;
  for (int a = 0; a < 3; ++a) {
    cell_ext[a] = static_cast<double>(grid[a]) / static_cast<double>(cells[a]);
    check_data(cell_ext[a] >= 5.0, "grid too small to fit " + std::to_string(spec.organ_count) +
                                       " organ regions");
  }

  Rng rng(hash_key(seed, 0x41544c41));  // atlas stream
  Atlas atlas;
  atlas.labels = vol::ByteVolume(spec.grid_d, spec.grid_h, spec.grid_w, 0);

  std::vector<OrganField> fields;
  fields.reserve(static_cast<size_t>(spec.organ_count));
  int organ = 0;
  for (int64_t cz = 0; cz < cells[0] && organ < spec.organ_count; ++cz)
    for (int64_t cy = 0; cy < cells[1] && organ < spec.organ_count; ++cy)
      for (int64_t cx = 0; cx < cells[2] && organ < spec.organ_count; ++cx, ++organ) {
        OrganField f{};
        const std::array<int64_t, 3> cell{cz, cy, cx};
        for (int a = 0; a < 3; ++a) {
          const double lo = static_cast<double>(cell[a]) * cell_ext[a];
          const double mid = lo + 0.5 * cell_ext[a];
          f.center[a] = mid + rng.uniform(-0.06, 0.06) * cell_ext[a];
          f.radii[a] = rng.uniform(0.22, 0.38) * cell_ext[a];
          // total reach stays under half a cell, so neighbors never touch
          f.warp_amp[a] = rng.uniform(0.0, 0.05) * cell_ext[a];
          f.warp_freq[a] = rng.uniform(0.2, 0.6);
          f.warp_phase[a] = rng.uniform(0.0, 6.283185307179586);
        }
        fields.push_back(f);
      }

  atlas.organs.resize(fields.size());
  for (size_t i = 0; i < fields.size(); ++i) {
    const OrganField& f = fields[i];
    OrganInfo& info = atlas.organs[i];
    info.id = static_cast<int>(i) + 1;
    info.center = f.center;
    info.radii = f.radii;
    info.bbox = {grid[0], 0, grid[1], 0, grid[2], 0};
    const int64_t z0 = std::max<int64_t>(0, static_cast<int64_t>(f.center[0] - f.radii[0] - 2));
    const int64_t z1 = std::min(grid[0], static_cast<int64_t>(f.center[0] + f.radii[0] + 3));
    const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(f.center[1] - f.radii[1] - 2));
    const int64_t y1 = std::min(grid[1], static_cast<int64_t>(f.center[1] + f.radii[1] + 3));
    const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(f.center[2] - f.radii[2] - 2));
    const int64_t x1 = std::min(grid[2], static_cast<int64_t>(f.center[2] + f.radii[2] + 3));
    for (int64_t z = z0; z < z1; ++z)
      for (int64_t y = y0; y < y1; ++y)
        for (int64_t x = x0; x < x1; ++x) {
          if (f.membership(static_cast<double>(z), static_cast<double>(y),
                           static_cast<double>(x)) >= 1.0)
            continue;
          if (atlas.labels.at(z, y, x) != 0) continue;  // first organ wins (cannot happen by layout)
          atlas.labels.at(z, y, x) = static_cast<uint8_t>(info.id);
          ++info.voxel_count;
          info.bbox[0] = std::min(info.bbox[0], z);
          info.bbox[1] = std::max(info.bbox[1], z + 1);
          info.bbox[2] = std::min(info.bbox[2], y);
          info.bbox[3] = std::max(info.bbox[3], y + 1);
          info.bbox[4] = std::min(info.bbox[4], x);
          info.bbox[5] = std::max(info.bbox[5], x + 1);
        }
    check_data(info.voxel_count > 0, "organ region came out empty; grid too small");
  }
  return atlas;
}

namespace {

vol::MaskVolume raster_anomaly(const AnomalyTypeSpec& type, const std::array<int64_t, 3>& grid,
                               const std::array<int64_t, 3>& center, double radius, Rng& rng) {
  vol::MaskVolume mask(grid[0], grid[1], grid[2], 0);
  const double margin = radius * 2.4 + 2.0;
  const int64_t z0 = std::max<int64_t>(0, center[0] - static_cast<int64_t>(margin));
  const int64_t z1 = std::min(grid[0], center[0] + static_cast<int64_t>(margin) + 1);
  const int64_t y0 = std::max<int64_t>(0, center[1] - static_cast<int64_t>(margin));
  const int64_t y1 = std::min(grid[1], center[1] + static_cast<int64_t>(margin) + 1);
  const int64_t x0 = std::max<int64_t>(0, center[2] - static_cast<int64_t>(margin));
  const int64_t x1 = std::min(grid[2], center[2] + static_cast<int64_t>(margin) + 1);

  // Per-instance shape parameters.
  const double lump_phase = rng.uniform(0.0, 6.28);
  std::array<double, 3> axis{rng.normal(), rng.normal(), rng.normal()};
  const double norm = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]) + 1e-9;
  for (auto& a : axis) a /= norm;
  const std::array<double, 3> bump_radii{radius * 1.35, radius * 1.0, radius * 0.75};

  for (int64_t z = z0; z < z1; ++z)
    for (int64_t y = y0; y < y1; ++y)
      for (int64_t x = x0; x < x1; ++x) {
        const double dz = static_cast<double>(z - center[0]);
        const double dy = static_cast<double>(y - center[1]);
        const double dx = static_cast<double>(x - center[2]);
        const double dist = std::sqrt(dz * dz + dy * dy + dx * dx);
        bool in = false;
        switch (type.shape) {
          case ShapeFamily::Sphere:
            in = dist <= radius;
            break;
          case ShapeFamily::LumpySphere: {
            const double lump = 1.0 + 0.22 * std::sin(1.9 * dz + lump_phase) *
                                          std::cos(1.7 * dy + 0.5 * lump_phase) *
                                          std::sin(1.5 * dx);
            in = dist <= radius * lump;
            break;
          }
          case ShapeFamily::Tube: {
            const double axial = dz * axis[0] + dy * axis[1] + dx * axis[2];
            const double perp2 = dist * dist - axial * axial;
            in = std::fabs(axial) <= radius * 2.2 && perp2 <= radius * 0.45 * radius * 0.45;
            break;
          }
          case ShapeFamily::Shell:
            in = dist >= radius * 0.6 && dist <= radius;
            break;
          case ShapeFamily::Bump: {
            const double ez = dz / bump_radii[0], ey = dy / bump_radii[1], ex = dx / bump_radii[2];
            in = ez * ez + ey * ey + ex * ex <= 1.0;
            break;
          }
        }
        if (in) mask.at(z, y, x) = 1;
      }
  return mask;
}

}  // namespace

std::vector<AnomalyInstance> implant_anomalies(const Atlas& atlas, const PhantomSpec& spec,
                                               uint64_t seed) {
  check_config(spec.anomalies_min >= 0 && spec.anomalies_max >= spec.anomalies_min,
               "anomaly count range is empty");
  check_config(!spec.anomaly_types.empty() || spec.anomalies_max == 0,
               "anomaly_types must be non-empty");
  Rng rng(hash_key(seed, 0x414e4f4d));  // anomaly stream
  const std::array<int64_t, 3> grid{atlas.labels.d, atlas.labels.h, atlas.labels.w};

  const int count =
      spec.anomalies_min + static_cast<int>(rng.uniform_int(spec.anomalies_max - spec.anomalies_min + 1));
  std::vector<AnomalyInstance> out;
  vol::MaskVolume occupied(grid[0], grid[1], grid[2], 0);

  for (int k = 0; k < count; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
      const auto& organ = atlas.organs[static_cast<size_t>(rng.uniform_int(
          static_cast<int64_t>(atlas.organs.size())))];
      const auto& type = spec.anomaly_types[static_cast<size_t>(
          rng.uniform_int(static_cast<int64_t>(spec.anomaly_types.size())))];
      const double radius =
          rng.uniform(type.radius_lo_mm, type.radius_hi_mm) * spec.radius_scale;

      // candidate center: random organ voxel
      std::array<int64_t, 3> center{};
      bool found = false;
      for (int t = 0; t < 20 && !found; ++t) {
        center = {organ.bbox[0] + rng.uniform_int(organ.bbox[1] - organ.bbox[0]),
                  organ.bbox[2] + rng.uniform_int(organ.bbox[3] - organ.bbox[2]),
                  organ.bbox[4] + rng.uniform_int(organ.bbox[5] - organ.bbox[4])};
        found = atlas.labels.at(center[0], center[1], center[2]) == organ.id;
      }
      if (!found) continue;

      vol::MaskVolume mask = raster_anomaly(type, grid, center, radius, rng);
      const int64_t total = vol::mask_count(mask);
      if (total == 0) continue;

      // host containment, modal label, and no overlap with earlier anomalies
      std::array<int64_t, 33> label_hist{};
      bool overlap = false;
      for (int64_t i = 0; i < mask.numel() && !overlap; ++i) {
        if (!mask.data[static_cast<size_t>(i)]) continue;
        if (occupied.data[static_cast<size_t>(i)]) overlap = true;
        ++label_hist[atlas.labels.data[static_cast<size_t>(i)]];
      }
      if (overlap) continue;
      const int64_t inside = label_hist[static_cast<size_t>(organ.id)];
      if (inside * 100 < total * 55) continue;
      const auto modal = std::max_element(label_hist.begin(), label_hist.end());
      if (static_cast<int>(modal - label_hist.begin()) != organ.id) continue;

      AnomalyInstance inst;
      inst.id = static_cast<int>(out.size());
      inst.type = type.name;
      inst.organ_id = organ.id;
      inst.center = center;
      inst.size_mm = radius;  // 1.0 mm isotropic spacing
      inst.intensity_delta = rng.uniform(type.delta_lo, type.delta_hi);
      inst.mask = std::move(mask);
      for (int64_t i = 0; i < inst.mask.numel(); ++i)
        if (inst.mask.data[static_cast<size_t>(i)]) occupied.data[static_cast<size_t>(i)] = 1;
      out.push_back(std::move(inst));
      placed = true;
    }
    if (!placed)
      std::fprintf(stderr, "phantom: skipped anomaly %d/%d (no placement found)\n", k + 1, count);
  }
  return out;
}

vol::FloatVolume render_ct(const Atlas& atlas, const std::vector<AnomalyInstance>& anomalies,
                           const PhantomSpec& spec, uint64_t seed) {
  Rng rng(hash_key(seed, 0x43545f52));  // ct stream
  // Base intensities cycle through a few shared levels so intensity alone
  // does not identify the organ; the label channel does.
  const double levels[3] = {0.32, 0.47, 0.62};
  std::vector<double> base(static_cast<size_t>(spec.organ_count) + 1);
  base[0] = 0.08;
  for (int i = 1; i <= spec.organ_count; ++i)
    base[static_cast<size_t>(i)] = levels[(i - 1) % 3] + rng.uniform(-0.02, 0.02);

  vol::FloatVolume ct(atlas.labels.d, atlas.labels.h, atlas.labels.w);
  for (int64_t i = 0; i < ct.numel(); ++i)
    ct.data[static_cast<size_t>(i)] =
        static_cast<float>(base[atlas.labels.data[static_cast<size_t>(i)]]);

  if (spec.noise_amp > 0.0) {
    // value noise: coarse random lattice, trilinearly interpolated
    const int64_t step = 4;
    vol::FloatVolume lattice((ct.d + step - 1) / step + 1, (ct.h + step - 1) / step + 1,
                             (ct.w + step - 1) / step + 1);
    for (auto& v : lattice.data)
      v = static_cast<float>(rng.uniform(-spec.noise_amp, spec.noise_amp));
    for (int64_t z = 0; z < ct.d; ++z)
      for (int64_t y = 0; y < ct.h; ++y)
        for (int64_t x = 0; x < ct.w; ++x) {
          const double fz = static_cast<double>(z) / step, fy = static_cast<double>(y) / step,
                       fx = static_cast<double>(x) / step;
          const int64_t z0 = static_cast<int64_t>(fz), y0 = static_cast<int64_t>(fy),
                        x0 = static_cast<int64_t>(fx);
          const double tz = fz - static_cast<double>(z0), ty = fy - static_cast<double>(y0),
                       tx = fx - static_cast<double>(x0);
          auto l = [&](int64_t a, int64_t b, int64_t c) { return lattice.at(a, b, c); };
          const double c00 = l(z0, y0, x0) + tx * (l(z0, y0, x0 + 1) - l(z0, y0, x0));
          const double c01 = l(z0, y0 + 1, x0) + tx * (l(z0, y0 + 1, x0 + 1) - l(z0, y0 + 1, x0));
          const double c10 = l(z0 + 1, y0, x0) + tx * (l(z0 + 1, y0, x0 + 1) - l(z0 + 1, y0, x0));
          const double c11 =
              l(z0 + 1, y0 + 1, x0) + tx * (l(z0 + 1, y0 + 1, x0 + 1) - l(z0 + 1, y0 + 1, x0));
          const double c0 = c00 + ty * (c01 - c00);
          const double c1 = c10 + ty * (c11 - c10);
          ct.at(z, y, x) += static_cast<float>(c0 + tz * (c1 - c0));
        }
  }

  for (const auto& a : anomalies)
    for (int64_t i = 0; i < ct.numel(); ++i)
      if (a.mask.data[static_cast<size_t>(i)])
        ct.data[static_cast<size_t>(i)] += static_cast<float>(a.intensity_delta);

  for (auto& v : ct.data) v = std::clamp(v, 0.0f, 1.0f);
  return ct;
}

vol::FloatVolume normalize_labels(const vol::ByteVolume& labels, int organ_count) {
  vol::FloatVolume out(labels.d, labels.h, labels.w);
  for (int64_t i = 0; i < labels.numel(); ++i) {
    const uint8_t v = labels.data[static_cast<size_t>(i)];
    check_data(v <= organ_count, "label " + std::to_string(v) + " out of range [0, " +
                                     std::to_string(organ_count) + "]");
    out.data[static_cast<size_t>(i)] = static_cast<float>(v) / static_cast<float>(organ_count);
  }
  return out;
}

Sample make_sample(const PhantomSpec& spec, uint64_t seed) {
  Sample s;
  Atlas atlas = generate_atlas(spec, seed);
  s.anomalies = implant_anomalies(atlas, spec, seed);
  s.ct = render_ct(atlas, s.anomalies, spec, seed);
  s.labels = std::move(atlas.labels);
  return s;
}

}  // namespace vg::phantom
