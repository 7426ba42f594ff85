#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vg/volume.hpp"

// Procedural CT-like phantoms: organ label atlases plus implanted
// anomalies with ground-truth masks. Everything is a pure function of
// (spec, seed), so samples regenerate byte-for-byte.

namespace vg::phantom {

enum class ShapeFamily { Sphere, LumpySphere, Tube, Shell, Bump };

struct AnomalyTypeSpec {
  std::string name;
  ShapeFamily shape = ShapeFamily::Sphere;
  double delta_lo = 0.2, delta_hi = 0.35;  // signed intensity offset range
  double radius_lo_mm = 2.5, radius_hi_mm = 5.0;
};

std::vector<AnomalyTypeSpec> default_anomaly_types();

struct PhantomSpec {
  int64_t grid_d = 32, grid_h = 32, grid_w = 32;
  int organ_count = 8;  // >= 2, <= 32; label 0 is background
  int anomalies_min = 1, anomalies_max = 3;
  double noise_amp = 0.03;
  double radius_scale = 1.0;
  std::vector<AnomalyTypeSpec> anomaly_types = default_anomaly_types();
  uint64_t seed = 0;
};

struct OrganInfo {
  int id = 0;
  std::array<double, 3> center{};  // (z, y, x), voxel units
  std::array<double, 3> radii{};
  int64_t voxel_count = 0;
  // z0, z1, y0, y1, x0, x1 (half-open)
  std::array<int64_t, 6> bbox{};
};

struct Atlas {
  vol::ByteVolume labels;
  std::vector<OrganInfo> organs;
};

struct AnomalyInstance {
  int id = 0;
  std::string type;
  int organ_id = 0;
  std::array<int64_t, 3> center{};  // (z, y, x)
  double size_mm = 0.0;
  double intensity_delta = 0.0;
  vol::MaskVolume mask;
};

struct Sample {
  vol::FloatVolume ct;      // [0, 1]
  vol::ByteVolume labels;   // 0..organ_count
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  std::vector<AnomalyInstance> anomalies;
};

// organ_count disjoint connected regions (randomly deformed ellipsoids
// on a fixed cell layout) plus background label 0.
Atlas generate_atlas(const PhantomSpec& spec, uint64_t seed);

// Each anomaly is placed inside a randomly chosen organ with >= 55% of
// its mask inside the host organ (the stored invariant requires 50%);
// placements that fail after bounded retries are skipped with a warning.
std::vector<AnomalyInstance> implant_anomalies(const Atlas& atlas, const PhantomSpec& spec,
                                               uint64_t seed);

// Per-organ base intensity + smooth value noise + anomaly deltas,
// clipped to [0, 1].
vol::FloatVolume render_ct(const Atlas& atlas, const std::vector<AnomalyInstance>& anomalies,
                           const PhantomSpec& spec, uint64_t seed);

// label k -> k / organ_count
vol::FloatVolume normalize_labels(const vol::ByteVolume& labels, int organ_count);

Sample make_sample(const PhantomSpec& spec, uint64_t seed);

}  // namespace vg::phantom
