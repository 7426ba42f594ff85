#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vg/reportlang.hpp"

// Deterministic report structuring: sentence-wise anatomy prediction,
// longest-match phrase recognition, relation estimation, rule-based
// splitting of multi-segment groups, and per-character masks. The
// stages share interfaces with learned taggers so those could be
// swapped in behind the same contracts.

namespace vg::structuring {

using reportlang::AnomalyGroup;
using reportlang::PhraseAnnotation;
using reportlang::PhraseClass;
using reportlang::ReportDoc;
using reportlang::SentenceAnnotation;

struct CharMask {
  // length == report character count; value 0 = unrelated, else the
  // phrase class index of the covering phrase in this group
  std::vector<uint8_t> values;
  int anomaly_ref = -1;  // group index within the StructuringResult
  int organ_class = 0;
};

struct StructuringResult {
  std::vector<SentenceAnnotation> sentence_classes;
  std::vector<PhraseAnnotation> phrases;
  std::vector<AnomalyGroup> groups;  // post-splitting
  std::vector<CharMask> char_masks;  // one per group
};

// Splits on '.' boundaries and classifies each sentence by organ-name
// lexicon vote; sentences without an anatomy token get class 0.
std::vector<SentenceAnnotation> classify_sentences(const std::string& text);

// Longest-match tagging over the grammar lexicon plus the measurement
// ("12 mm") and segment ("right S3") patterns, restricted to the given
// sentence spans. Untaggable text is left unlabeled.
std::vector<PhraseAnnotation> recognize_phrases(const std::string& text,
                                                const std::vector<SentenceAnnotation>& sentences);

// Relation estimation within one sentence-class block. Each
// lesion/shape-abnormality phrase seeds a group; attribute phrases
// attach to the nearest seed in their sentence (ties to the preceding
// seed); a run of consecutive segment phrases attaches to every seed
// after it up to the next segment run. No cross-sentence attachment.
std::vector<AnomalyGroup> estimate_relations(const std::vector<PhraseAnnotation>& phrases,
                                             const std::vector<SentenceAnnotation>& sentences,
                                             int organ_class);

// n segment phrases -> n groups, each with one segment phrase and copies
// of all other phrases; zero segments -> the group is left whole and
// flagged unlocalized.
std::vector<AnomalyGroup> split_multi_anatomy(const AnomalyGroup& group,
                                              const std::vector<PhraseAnnotation>& phrases);

CharMask build_char_mask(const AnomalyGroup& group, const std::vector<PhraseAnnotation>& phrases,
                         int64_t text_length);

// Full pipeline on raw text.
StructuringResult structure_text(const std::string& text);

// Gold passthrough: bypasses prediction and builds masks directly from
// the document's gold annotations.
StructuringResult structure_gold(const ReportDoc& doc);

// Corpus-level agreement between a predicted structuring and the gold
// annotations. Group matching compares organ class plus the exact set
// of (span, class) members.
struct ScoreCounts {
  int64_t sentences = 0, sentences_correct = 0;
  int64_t gold_phrases = 0, predicted_phrases = 0, matched_phrases = 0;
  int64_t gold_groups = 0, predicted_groups = 0, matched_groups = 0;

  void add(const StructuringResult& predicted, const ReportDoc& gold);
  double sentence_accuracy() const;
  double phrase_precision() const;
  double phrase_recall() const;
  double phrase_f1() const;
  double group_exact_match() const;
};

// Stable fingerprint of the phrase-class index order; recorded in
// checkpoints so masks and class embeddings cannot be mixed across
// incompatible orderings.
uint64_t class_order_fingerprint();

}  // namespace vg::structuring
