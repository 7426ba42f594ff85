#include "vg/evalkit.hpp"

#include <cstdio>

#include "vg/binio.hpp"

namespace vg::evalkit {

vol::MaskVolume binarize(const vol::FloatVolume& pred, double threshold) {
  check(threshold > 0.0 && threshold < 1.0, "binarize: threshold must be in (0,1)");
  vol::MaskVolume out(pred.d, pred.h, pred.w, 0);
  for (int64_t i = 0; i < pred.numel(); ++i)
    out.data[static_cast<size_t>(i)] =
        static_cast<double>(pred.data[static_cast<size_t>(i)]) >= threshold ? 1 : 0;
  return out;
}

double iou(const vol::MaskVolume& a, const vol::MaskVolume& b, bool* empty_pair) {
  check(a.same_extents(b), "iou: extent mismatch");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const bool av = a.data[i] != 0, bv = b.data[i] != 0;
    inter += av && bv;
    uni += av || bv;
  }
  if (empty_pair) *empty_pair = uni == 0;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double dice_score(const vol::MaskVolume& a, const vol::MaskVolume& b, bool* empty_pair) {
  check(a.same_extents(b), "dice_score: extent mismatch");
  int64_t inter = 0, total = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const bool av = a.data[i] != 0, bv = b.data[i] != 0;
    inter += av && bv;
    total += av;
    total += bv;
  }
  if (empty_pair) *empty_pair = total == 0;
  return total == 0 ? 0.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

MetricsRecord evaluate_anomaly(const vol::FloatVolume& pred, const vol::MaskVolume& gt,
                               int64_t sample_id, int anomaly_id, int organ_id,
                               const std::string& type) {
  MetricsRecord rec;
  rec.sample_id = sample_id;
  rec.anomaly_id = anomaly_id;
  rec.organ_id = organ_id;
  rec.anomaly_type = type;
  for (size_t t = 0; t < kThresholds.size(); ++t) {
    vol::MaskVolume bin = binarize(pred, kThresholds[t]);
    bool empty = false;
    rec.iou_at[t] = iou(bin, gt, &empty);
    if (t == 0) {
      rec.dice = dice_score(bin, gt, &rec.empty_pair);
      rec.hit = rec.iou_at[0] > 0.1;
      rec.empty_pair = rec.empty_pair || empty;
    }
  }
  return rec;
}

Aggregates aggregate(std::span<const MetricsRecord> records) {
  Aggregates agg;
  agg.count = static_cast<int64_t>(records.size());
  if (!agg.count) return agg;
  double dice = 0.0, iou_sum = 0.0;
  int64_t hits = 0;
  for (const auto& r : records) {
    dice += r.dice;
    for (double v : r.iou_at) iou_sum += v;
    hits += r.hit;
  }
  agg.mean_dice_pct = 100.0 * dice / static_cast<double>(agg.count);
  agg.miou_pct = 100.0 * iou_sum / static_cast<double>(agg.count * static_cast<int64_t>(kThresholds.size()));
  agg.accuracy_pct = 100.0 * static_cast<double>(hits) / static_cast<double>(agg.count);
  return agg;
}

double grounding_accuracy(std::span<const MetricsRecord> records) {
  return aggregate(records).accuracy_pct;
}

Breakdown breakdown(std::span<const MetricsRecord> records) {
  std::map<std::pair<int, std::string>, std::pair<double, int64_t>> cells;
  for (const auto& r : records) {
    auto& cell = cells[{r.organ_id, r.anomaly_type}];
    cell.first += r.dice;
    cell.second += 1;
  }
  for (auto& [key, cell] : cells) cell.first /= static_cast<double>(cell.second);
  return cells;
}

void write_records_csv(const std::string& path, std::span<const MetricsRecord> records,
                       const std::string& split_label) {
  auto os = io::open_write(path);
  os << "split,sample_id,anomaly_id,organ_id,anomaly_type,dice,iou_0.1,iou_0.2,iou_0.3,iou_0.4,"
        "iou_0.5,hit,empty_pair\n";
  char buf[512];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf),
                  "%s,%lld,%d,%d,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%d,%d\n", split_label.c_str(),
                  static_cast<long long>(r.sample_id), r.anomaly_id, r.organ_id,
                  r.anomaly_type.c_str(), r.dice, r.iou_at[0], r.iou_at[1], r.iou_at[2],
                  r.iou_at[3], r.iou_at[4], r.hit ? 1 : 0, r.empty_pair ? 1 : 0);
    os << buf;
  }
  check_data(os.good(), "write failed: " + path);
}

void write_breakdown_csv(const std::string& path, const Breakdown& bd) {
  auto os = io::open_write(path);
  os << "organ_id,anomaly_type,mean_dice,count\n";
  char buf[256];
  for (const auto& [key, cell] : bd) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%.9g,%lld\n", key.first, key.second.c_str(), cell.first,
                  static_cast<long long>(cell.second));
    os << buf;
  }
  check_data(os.good(), "write failed: " + path);
}

}  // namespace vg::evalkit
