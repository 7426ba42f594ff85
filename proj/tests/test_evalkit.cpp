#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "vg/evalkit.hpp"
#include "vg/rng.hpp"

using namespace vg;
using namespace vg::evalkit;

namespace {

vol::MaskVolume mask_from_bits(unsigned bits) {
  vol::MaskVolume m(2, 2, 2, 0);
  for (int i = 0; i < 8; ++i) m.data[static_cast<size_t>(i)] = (bits >> i) & 1u;
  return m;
}

}  // namespace

TEST_CASE("binarize tie rule and idempotence") {
  vol::FloatVolume half(2, 2, 2, 0.5f);
  vol::MaskVolume bin = binarize(half, 0.5);
  for (uint8_t v : bin.data) CHECK(v == 1);  // ties included

  vol::FloatVolume low(2, 2, 2, 0.05f);
  vol::MaskVolume none = binarize(low, 0.5);
  for (uint8_t v : none.data) CHECK(v == 0);

  Rng rng(3);
  vol::FloatVolume x(3, 3, 3);
  for (auto& v : x.data) v = static_cast<float>(rng.uniform());
  vol::MaskVolume once = binarize(x, 0.3);
  vol::FloatVolume as_float(3, 3, 3);
  for (size_t i = 0; i < once.data.size(); ++i) as_float.data[i] = once.data[i];
  vol::MaskVolume twice = binarize(as_float, 0.3);
  CHECK(once.data == twice.data);
}

TEST_CASE("iou and dice basic identities") {
  vol::MaskVolume a = mask_from_bits(0b00001111);
  vol::MaskVolume b = mask_from_bits(0b11110000);
  CHECK(iou(a, a) == doctest::Approx(1.0));
  CHECK(iou(a, b) == doctest::Approx(0.0));
  CHECK(dice_score(a, a) == doctest::Approx(1.0));
  CHECK(dice_score(a, b) == doctest::Approx(0.0));

  bool empty = false;
  vol::MaskVolume zero = mask_from_bits(0);
  CHECK(iou(zero, zero, &empty) == doctest::Approx(0.0));
  CHECK(empty);
  CHECK(dice_score(zero, zero, &empty) == doctest::Approx(0.0));
  CHECK(empty);
}

TEST_CASE("exhaustive 2x2x2 equivalence against set-arithmetic oracle") {
  // Independent oracle: explicit voxel index sets.
  for (unsigned ab = 0; ab < 256; ++ab) {
    for (unsigned bb = 0; bb < 256; ++bb) {
      vol::MaskVolume a = mask_from_bits(ab);
      vol::MaskVolume b = mask_from_bits(bb);
      std::set<int> sa, sb, inter, uni;
      for (int i = 0; i < 8; ++i) {
        if ((ab >> i) & 1u) sa.insert(i);
        if ((bb >> i) & 1u) sb.insert(i);
      }
      for (int v : sa) {
        uni.insert(v);
        if (sb.count(v)) inter.insert(v);
      }
      for (int v : sb) uni.insert(v);
      const double oracle_iou =
          uni.empty() ? 0.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
      const double oracle_dice =
          (sa.size() + sb.size()) == 0
              ? 0.0
              : 2.0 * static_cast<double>(inter.size()) / static_cast<double>(sa.size() + sb.size());
      REQUIRE(iou(a, b) == oracle_iou);
      REQUIRE(dice_score(a, b) == oracle_dice);
    }
  }
}

TEST_CASE("dice equals 2 IoU / (1 + IoU) on random masks") {
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    vol::MaskVolume a(4, 4, 4, 0), b(4, 4, 4, 0);
    for (auto& v : a.data) v = rng.bernoulli(0.4);
    for (auto& v : b.data) v = rng.bernoulli(0.4);
    const double i = iou(a, b);
    const double d = dice_score(a, b);
    CHECK(std::fabs(d - 2.0 * i / (1.0 + i)) < 1e-12);
  }
}

TEST_CASE("grounding accuracy boundary semantics") {
  auto rec = [](double iou01) {
    MetricsRecord r;
    r.iou_at[0] = iou01;
    r.hit = iou01 > 0.1;
    return r;
  };
  std::vector<MetricsRecord> all_one = {rec(1.0), rec(1.0)};
  CHECK(grounding_accuracy(all_one) == doctest::Approx(100.0));

  std::vector<MetricsRecord> boundary = {rec(0.1), rec(0.1)};
  CHECK(grounding_accuracy(boundary) == doctest::Approx(0.0));  // strict "exceeds"

  std::vector<MetricsRecord> mixed = {rec(0.05), rec(0.15), rec(0.5), rec(0.0)};
  CHECK(grounding_accuracy(mixed) == doctest::Approx(50.0));
}

TEST_CASE("aggregate invariants: miou below iou@0.1 mean, ranges") {
  Rng rng(23);
  std::vector<MetricsRecord> records;
  for (int k = 0; k < 200; ++k) {
    MetricsRecord r;
    double v = rng.uniform();
    for (size_t t = 0; t < kThresholds.size(); ++t) {
      r.iou_at[t] = v;  // non-increasing in threshold
      v *= rng.uniform();
    }
    r.dice = 2.0 * r.iou_at[0] / (1.0 + r.iou_at[0]);
    r.hit = r.iou_at[0] > 0.1;
    records.push_back(r);
  }
  Aggregates agg = aggregate(records);
  double mean_iou01 = 0.0;
  for (const auto& r : records) mean_iou01 += r.iou_at[0];
  mean_iou01 = 100.0 * mean_iou01 / static_cast<double>(records.size());
  CHECK(agg.miou_pct <= mean_iou01 + 1e-12);
  CHECK(agg.accuracy_pct >= 0.0);
  CHECK(agg.accuracy_pct <= 100.0);
  for (const auto& r : records) {
    CHECK(r.dice >= 0.0);
    CHECK(r.dice <= 1.0);
  }
}

TEST_CASE("breakdown matches a brute-force group-by") {
  Rng rng(31);
  std::vector<MetricsRecord> records;
  const char* types[] = {"nodule", "cyst"};
  for (int k = 0; k < 100; ++k) {
    MetricsRecord r;
    r.organ_id = 1 + static_cast<int>(rng.uniform_int(2));
    r.anomaly_type = types[rng.uniform_int(2)];
    r.dice = rng.uniform();
    records.push_back(r);
  }
  Breakdown bd = breakdown(records);
  // independent group-by
  for (int organ = 1; organ <= 2; ++organ)
    for (const char* type : types) {
      double sum = 0.0;
      int64_t n = 0;
      for (const auto& r : records)
        if (r.organ_id == organ && r.anomaly_type == type) {
          sum += r.dice;
          ++n;
        }
      auto it = bd.find({organ, std::string(type)});
      if (n == 0) {
        CHECK(it == bd.end());  // absent, never zero-filled
      } else {
        REQUIRE(it != bd.end());
        CHECK(it->second.first == doctest::Approx(sum / static_cast<double>(n)));
        CHECK(it->second.second == n);
      }
    }

  MetricsRecord single;
  single.organ_id = 7;
  single.anomaly_type = "mass";
  single.dice = 0.42;
  Breakdown one = breakdown(std::span<const MetricsRecord>(&single, 1));
  REQUIRE(one.size() == 1);
  CHECK(one.begin()->second.first == doctest::Approx(0.42));

  // fully crossed 2x2: grand mean equals record mean
  std::vector<MetricsRecord> crossed;
  double total = 0.0;
  for (int organ = 1; organ <= 2; ++organ)
    for (const char* type : types) {
      MetricsRecord r;
      r.organ_id = organ;
      r.anomaly_type = type;
      r.dice = 0.1 * organ + (type[0] == 'n' ? 0.05 : 0.3);
      total += r.dice;
      crossed.push_back(r);
    }
  Breakdown bd2 = breakdown(crossed);
  REQUIRE(bd2.size() == 4);
  double grand = 0.0;
  for (const auto& [key, cell] : bd2) grand += cell.first;
  CHECK(grand / 4.0 == doctest::Approx(total / 4.0));
}

TEST_CASE("aggregate on empty record set reports absence") {
  Aggregates agg = aggregate({});
  CHECK(agg.count == 0);
}
