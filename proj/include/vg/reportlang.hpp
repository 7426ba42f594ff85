#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vg/phantom.hpp"

// Synthetic report grammar. Generates one report per sample together
// with gold structuring annotations: sentence anatomy classes, phrase
// spans with their 9-way classes, and per-anomaly phrase groups. The
// grammar is closed over the published lexicon, which is what makes the
// deterministic structuring engine exact on clean text.

namespace vg::reportlang {

enum class PhraseClass : int {
  None = 0,
  AnatomicalSegment = 1,
  Lesion = 2,
  ShapeAbnormality = 3,
  Diagnosis = 4,
  Characteristics = 5,
  ContrastInformation = 6,
  Quantity = 7,
  MeasurementResult = 8,
  TemporalChange = 9,
};

constexpr int kPhraseClassCount = 9;

const char* phrase_class_name(PhraseClass c);

struct Lexicon {
  // Organ id i (1-based) is named organ_names[i-1]; id 0 reads as
  // "unspecified" at the sentence level and has no name token.
  std::vector<std::string> organ_names;
  std::vector<std::string> lesion_nouns;
  std::vector<std::string> lesion_plurals;  // aligned with lesion_nouns
  std::vector<std::string> shape_nouns;
  std::vector<std::string> characteristics;
  std::vector<std::string> diagnosis;
  std::vector<std::string> contrast;
  std::vector<std::string> temporal;
  std::vector<std::string> quantity;

  // Every literal token of the classes above, with its class.
  std::vector<std::pair<std::string, PhraseClass>> tokens() const;
};

const Lexicon& lexicon();
std::string organ_name(int organ_id);

struct PhraseAnnotation {
  int64_t start = 0, end = 0;  // character offsets, half-open
  PhraseClass cls = PhraseClass::None;
  bool operator==(const PhraseAnnotation&) const = default;
};

struct SentenceAnnotation {
  int64_t start = 0, end = 0;
  int anatomy_class = 0;  // 0 = unspecified, else organ id
  bool operator==(const SentenceAnnotation&) const = default;
};

struct AnomalyGroup {
  std::vector<int> phrase_ids;  // indices into the document phrase list
  int anomaly_ref = -1;         // ground-truth anomaly id, -1 when predicted
  int organ_class = 0;
  bool unlocalized = false;  // no anatomical segment phrase survived
};

struct ReportDoc {
  std::string text;
  std::vector<SentenceAnnotation> sentences;
  std::vector<PhraseAnnotation> phrases;
  std::vector<AnomalyGroup> groups;  // post-splitting: one segment phrase each
  int64_t sample_ref = -1;
};

struct GrammarConfig {
  double enumeration_prob = 0.25;  // two same-type anomalies share a sentence
  double distractor_prob = 0.6;
  double quantity_prob = 0.2;
  double characteristics_prob = 0.6;
  double diagnosis_prob = 0.3;
  int max_normal_statements = 2;
};

// Deterministic per (sample, seed). Every anomaly in the sample is
// described by exactly one group.
ReportDoc generate_report(const phantom::Sample& sample, const GrammarConfig& config,
                          uint64_t seed, int64_t sample_ref = -1);

enum class AugmentMode { Deletion, Insertion, Crop };

// Perturbs the report text and remaps all annotations. Deletions and
// insertions never touch characters strictly inside phrase spans, so
// surviving spans still select lexicon tokens; crop removes whole
// sentences from either end. Groups losing their anatomical phrase are
// dropped. rate must be <= 0.2.
ReportDoc augment_text(const ReportDoc& doc, AugmentMode mode, double rate, uint64_t seed);

// Within-organ location code for an anomaly: octant of the organ bbox,
// rendered as e.g. "right S3". Exposed for tests.
std::string segment_phrase(const phantom::Sample& sample, const phantom::AnomalyInstance& inst);

}  // namespace vg::reportlang
