#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>

#include "corpus_helpers.hpp"
#include "vg/reportlang.hpp"

using namespace vg;
using namespace vg::reportlang;

namespace {

void check_doc_invariants(const phantom::Sample& sample, const ReportDoc& doc) {
  // sentence spans partition the text, separators excluded
  std::vector<bool> in_sentence(doc.text.size(), false);
  int64_t prev_end = -1;
  for (const auto& s : doc.sentences) {
    REQUIRE(s.start >= 0);
    REQUIRE(s.start < s.end);
    REQUIRE(s.end <= static_cast<int64_t>(doc.text.size()));
    REQUIRE(s.start > prev_end - 1);
    prev_end = s.end;
    for (int64_t i = s.start; i < s.end; ++i) in_sentence[static_cast<size_t>(i)] = true;
  }
  for (size_t i = 0; i < doc.text.size(); ++i)
    if (!in_sentence[i]) REQUIRE(doc.text[i] == ' ');

  // phrases: non-overlapping, inside exactly one sentence
  std::vector<PhraseAnnotation> sorted = doc.phrases;
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.start < b.start; });
  for (size_t i = 0; i + 1 < sorted.size(); ++i) REQUIRE(sorted[i].end <= sorted[i + 1].start);
  for (const auto& p : doc.phrases) {
    REQUIRE(p.start < p.end);
    int containing = 0;
    for (const auto& s : doc.sentences)
      if (p.start >= s.start && p.end <= s.end) ++containing;
    REQUIRE(containing == 1);
    REQUIRE(th::lexicon_member(doc.text.substr(static_cast<size_t>(p.start),
                                               static_cast<size_t>(p.end - p.start))));
  }

  // groups: exactly one segment, at least one lesion/shape seed,
  // bijection with the sample's anomalies
  std::multiset<int> refs;
  for (const auto& g : doc.groups) {
    int segments = 0, seeds = 0;
    for (int id : g.phrase_ids) {
      const auto& p = doc.phrases[static_cast<size_t>(id)];
      segments += p.cls == PhraseClass::AnatomicalSegment;
      seeds += p.cls == PhraseClass::Lesion || p.cls == PhraseClass::ShapeAbnormality;
    }
    REQUIRE(segments == 1);
    REQUIRE(seeds >= 1);
    refs.insert(g.anomaly_ref);
  }
  REQUIRE(refs.size() == sample.anomalies.size());
  for (const auto& a : sample.anomalies) REQUIRE(refs.count(a.id) == 1);
}

}  // namespace

TEST_CASE("zero anomalies give a normal-only report") {
  phantom::PhantomSpec spec;
  spec.anomalies_min = spec.anomalies_max = 0;
  auto sample = phantom::make_sample(spec, 11);
  ReportDoc doc = generate_report(sample, {}, 11);
  CHECK(doc.groups.empty());
  CHECK(!doc.text.empty());
  CHECK(!doc.sentences.empty());
}

TEST_CASE("single anomaly maps to one group in its organ") {
  phantom::PhantomSpec spec;
  spec.anomalies_min = spec.anomalies_max = 1;
  spec.anomaly_types = {{"nodule", phantom::ShapeFamily::Sphere, 0.3, 0.3, 3.0, 4.0}};
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto sample = phantom::make_sample(spec, seed);
    if (sample.anomalies.empty()) continue;
    ReportDoc doc = generate_report(sample, {}, seed);
    REQUIRE(doc.groups.size() == 1);
    CHECK(doc.groups[0].organ_class == sample.anomalies[0].organ_id);
    CHECK(doc.groups[0].anomaly_ref == sample.anomalies[0].id);
  }
}

TEST_CASE("document invariants hold over 1000 generated docs") {
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    auto [sample, doc] = th::make_sample_doc(seed);
    check_doc_invariants(sample, doc);
  }
}

TEST_CASE("generation is deterministic per (sample, seed)") {
  auto [sample, doc] = th::make_sample_doc(77);
  ReportDoc again = generate_report(sample, {}, 77, 77);
  CHECK(doc.text == again.text);
  CHECK(doc.phrases == again.phrases);
  CHECK(doc.sentences == again.sentences);
  REQUIRE(doc.groups.size() == again.groups.size());
  for (size_t i = 0; i < doc.groups.size(); ++i) {
    CHECK(doc.groups[i].phrase_ids == again.groups[i].phrase_ids);
    CHECK(doc.groups[i].anomaly_ref == again.groups[i].anomaly_ref);
  }
}

TEST_CASE("enumeration sentences appear and share the lesion phrase") {
  phantom::PhantomSpec spec;
  spec.anomalies_min = spec.anomalies_max = 3;
  spec.anomaly_types = {{"nodule", phantom::ShapeFamily::Sphere, 0.25, 0.3, 2.5, 4.0}};
  GrammarConfig grammar;
  grammar.enumeration_prob = 1.0;
  int enumerated = 0;
  for (uint64_t seed = 0; seed < 200; ++seed) {
    auto sample = phantom::make_sample(spec, seed);
    ReportDoc doc = generate_report(sample, grammar, seed);
    check_doc_invariants(sample, doc);
    // shared lesion phrase across two groups marks an enumeration
    for (size_t i = 0; i < doc.groups.size(); ++i)
      for (size_t j = i + 1; j < doc.groups.size(); ++j)
        for (int a : doc.groups[i].phrase_ids)
          for (int bb : doc.groups[j].phrase_ids)
            if (a == bb && doc.phrases[static_cast<size_t>(a)].cls == PhraseClass::Lesion)
              ++enumerated;
  }
  CHECK(enumerated > 10);
}

TEST_CASE("augment with rate 0 is the identity") {
  auto [sample, doc] = th::make_sample_doc(5);
  for (AugmentMode mode : {AugmentMode::Deletion, AugmentMode::Insertion, AugmentMode::Crop}) {
    ReportDoc out = augment_text(doc, mode, 0.0, 9);
    CHECK(out.text == doc.text);
    CHECK(out.phrases == doc.phrases);
    CHECK(out.sentences == doc.sentences);
  }
}

TEST_CASE("augment rejects rates over 20 percent") {
  auto [sample, doc] = th::make_sample_doc(6);
  CHECK_THROWS_AS(augment_text(doc, AugmentMode::Deletion, 0.5, 1), ContractError);
}

TEST_CASE("augmented spans still select lexicon tokens") {
  for (uint64_t seed = 0; seed < 200; ++seed) {
    auto [sample, doc] = th::make_sample_doc(seed);
    for (AugmentMode mode : {AugmentMode::Deletion, AugmentMode::Insertion, AugmentMode::Crop}) {
      ReportDoc out = augment_text(doc, mode, 0.15, seed * 3 + 1);
      for (const auto& p : out.phrases) {
        REQUIRE(p.start < p.end);
        REQUIRE(p.end <= static_cast<int64_t>(out.text.size()));
        CHECK(th::lexicon_member(out.text.substr(static_cast<size_t>(p.start),
                                                 static_cast<size_t>(p.end - p.start))));
      }
      for (const auto& g : out.groups) {
        int segments = 0;
        for (int id : g.phrase_ids)
          segments += out.phrases[static_cast<size_t>(id)].cls == PhraseClass::AnatomicalSegment;
        CHECK(segments == 1);
      }
    }
  }
}

TEST_CASE("crop removes trailing sentences and their groups") {
  bool exercised = false;
  for (uint64_t seed = 0; seed < 100 && !exercised; ++seed) {
    auto [sample, doc] = th::make_sample_doc(seed);
    if (doc.sentences.size() < 3 || doc.groups.empty()) continue;
    ReportDoc out = augment_text(doc, AugmentMode::Crop, 0.2, seed);
    if (out.text.size() == doc.text.size()) continue;
    exercised = true;
    CHECK(out.sentences.size() < doc.sentences.size());
    // every surviving group still references a surviving anomaly ref from the original
    std::set<int> original;
    for (const auto& g : doc.groups) original.insert(g.anomaly_ref);
    for (const auto& g : out.groups) CHECK(original.count(g.anomaly_ref) == 1);
    CHECK(out.groups.size() <= doc.groups.size());
  }
  CHECK(exercised);
}

TEST_CASE("insertion only grows the text and keeps phrase text intact") {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    auto [sample, doc] = th::make_sample_doc(seed + 300);
    ReportDoc out = augment_text(doc, AugmentMode::Insertion, 0.2, seed);
    CHECK(out.text.size() >= doc.text.size());
    REQUIRE(out.phrases.size() == doc.phrases.size());
    for (size_t i = 0; i < doc.phrases.size(); ++i) {
      const auto& a = doc.phrases[i];
      const auto& b = out.phrases[i];
      CHECK(doc.text.substr(static_cast<size_t>(a.start), static_cast<size_t>(a.end - a.start)) ==
            out.text.substr(static_cast<size_t>(b.start), static_cast<size_t>(b.end - b.start)));
    }
  }
}
