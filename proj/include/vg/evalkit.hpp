#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vg/volume.hpp"

// Evaluation: Dice, IoU over the 0.1..0.5 threshold ladder, grounding
// accuracy (IoU@0.1 strictly above 0.1), and the organ x anomaly-type
// breakdown.

namespace vg::evalkit {

constexpr std::array<double, 5> kThresholds{0.1, 0.2, 0.3, 0.4, 0.5};

// Voxels >= threshold map to 1 (ties included).
vol::MaskVolume binarize(const vol::FloatVolume& pred, double threshold);

// |a n b| / |a u b|; both empty -> 0 with the empty flag set.
double iou(const vol::MaskVolume& a, const vol::MaskVolume& b, bool* empty_pair = nullptr);

// 2|a n b| / (|a| + |b|); both empty -> 0 with the empty flag set.
double dice_score(const vol::MaskVolume& a, const vol::MaskVolume& b, bool* empty_pair = nullptr);

struct MetricsRecord {
  int64_t sample_id = 0;
  int anomaly_id = 0;
  int organ_id = 0;
  std::string anomaly_type;
  double dice = 0.0;               // at binarization threshold 0.1
  std::array<double, 5> iou_at{};  // per kThresholds
  bool hit = false;                // iou@0.1 > 0.1, strict
  bool empty_pair = false;
};

MetricsRecord evaluate_anomaly(const vol::FloatVolume& pred, const vol::MaskVolume& gt,
                               int64_t sample_id, int anomaly_id, int organ_id,
                               const std::string& type);

struct Aggregates {
  int64_t count = 0;
  double mean_dice_pct = 0.0;
  double miou_pct = 0.0;     // mean over thresholds of mean IoU
  double accuracy_pct = 0.0; // 100 * hits / count
};

Aggregates aggregate(std::span<const MetricsRecord> records);
double grounding_accuracy(std::span<const MetricsRecord> records);  // accuracy_pct

// organ x type -> (mean dice, count); cells absent when no records.
using Breakdown = std::map<std::pair<int, std::string>, std::pair<double, int64_t>>;
Breakdown breakdown(std::span<const MetricsRecord> records);

// ---- CSV / summary emission ----
void write_records_csv(const std::string& path, std::span<const MetricsRecord> records,
                       const std::string& split_label);
void write_breakdown_csv(const std::string& path, const Breakdown& bd);

}  // namespace vg::evalkit
