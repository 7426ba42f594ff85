#include "vg/reportlang.hpp"

#include <algorithm>
#include <array>
#include <map>

#include "vg/rng.hpp"

namespace vg::reportlang {

const char* phrase_class_name(PhraseClass c) {
  switch (c) {
    case PhraseClass::None: return "none";
    case PhraseClass::AnatomicalSegment: return "anatomical_segment";
    case PhraseClass::Lesion: return "lesion";
    case PhraseClass::ShapeAbnormality: return "shape_abnormality";
    case PhraseClass::Diagnosis: return "diagnosis";
    case PhraseClass::Characteristics: return "characteristics";
    case PhraseClass::ContrastInformation: return "contrast_information";
    case PhraseClass::Quantity: return "quantity";
    case PhraseClass::MeasurementResult: return "measurement_result";
    case PhraseClass::TemporalChange: return "temporal_change";
  }
  return "?";
}

const Lexicon& lexicon() {
  static const Lexicon lex = [] {
    Lexicon l;
    l.organ_names = {"liver",     "spleen",   "pancreas", "stomach",  "gallbladder", "duodenum",
                     "colon",     "bladder",  "heart",    "aorta",    "esophagus",   "thyroid",
                     "prostate",  "uterus",   "rectum",   "jejunum",  "ileum",       "cecum",
                     "appendix",  "diaphragm", "sternum",  "clavicle", "scapula",     "humerus",
                     "femur",     "sacrum",   "trachea",  "larynx",   "tongue",      "mandible",
                     "patella",   "kidney"};
    l.lesion_nouns = {"nodule", "mass", "cyst", "fluid collection"};
    l.lesion_plurals = {"nodules", "masses", "cysts", "fluid collections"};
    l.shape_nouns = {"swelling", "duct dilation"};
    l.characteristics = {"hypodense",        "hyperdense",  "ill-defined", "well-circumscribed",
                         "heterogeneous",    "homogeneous", "calcified",   "rim-enhancing"};
    l.diagnosis = {"likely benign", "suspicious for malignancy", "indeterminate",
                   "of no clinical significance"};
    l.contrast = {"after contrast administration", "on the non-contrast phase",
                  "following intravenous contrast"};
    l.temporal = {"unchanged from the prior study", "newly appeared", "slightly increased in size",
                  "stable compared with the previous examination"};
    l.quantity = {"single", "two", "multiple", "several"};
    return l;
  }();
  return lex;
}

std::vector<std::pair<std::string, PhraseClass>> Lexicon::tokens() const {
  std::vector<std::pair<std::string, PhraseClass>> out;
  auto addall = [&](const std::vector<std::string>& v, PhraseClass c) {
    for (const auto& s : v) out.emplace_back(s, c);
  };
  addall(lesion_nouns, PhraseClass::Lesion);
  addall(lesion_plurals, PhraseClass::Lesion);
  addall(shape_nouns, PhraseClass::ShapeAbnormality);
  addall(characteristics, PhraseClass::Characteristics);
  addall(diagnosis, PhraseClass::Diagnosis);
  addall(contrast, PhraseClass::ContrastInformation);
  addall(temporal, PhraseClass::TemporalChange);
  addall(quantity, PhraseClass::Quantity);
  return out;
}

std::string organ_name(int organ_id) {
  const auto& names = lexicon().organ_names;
  check(organ_id >= 1 && organ_id <= static_cast<int>(names.size()),
        "organ id " + std::to_string(organ_id) + " has no name");
  return names[static_cast<size_t>(organ_id - 1)];
}

namespace {

struct DocBuilder {
  ReportDoc doc;
  int64_t sent_start = -1;
  int sent_class = 0;

  void begin_sentence(int anatomy_class) {
    if (!doc.text.empty()) doc.text += ' ';  // separator, outside sentence spans
    sent_start = static_cast<int64_t>(doc.text.size());
    sent_class = anatomy_class;
  }
  void lit(const std::string& s) { doc.text += s; }
  int phrase(const std::string& s, PhraseClass c) {
    const int64_t start = static_cast<int64_t>(doc.text.size());
    doc.text += s;
    doc.phrases.push_back({start, static_cast<int64_t>(doc.text.size()), c});
    return static_cast<int>(doc.phrases.size()) - 1;
  }
  void end_sentence() {
    doc.text += '.';
    doc.sentences.push_back({sent_start, static_cast<int64_t>(doc.text.size()), sent_class});
    sent_start = -1;
  }
};

struct OrganBox {
  int64_t z0 = 1 << 30, z1 = 0, y0 = 1 << 30, y1 = 0, x0 = 1 << 30, x1 = 0;
  bool any = false;
};

std::map<int, OrganBox> organ_boxes(const vol::ByteVolume& labels) {
  std::map<int, OrganBox> boxes;
  for (int64_t z = 0; z < labels.d; ++z)
    for (int64_t y = 0; y < labels.h; ++y)
      for (int64_t x = 0; x < labels.w; ++x) {
        const uint8_t l = labels.at(z, y, x);
        if (!l) continue;
        OrganBox& b = boxes[l];
        b.any = true;
        b.z0 = std::min(b.z0, z);
        b.z1 = std::max(b.z1, z + 1);
        b.y0 = std::min(b.y0, y);
        b.y1 = std::max(b.y1, y + 1);
        b.x0 = std::min(b.x0, x);
        b.x1 = std::max(b.x1, x + 1);
      }
  return boxes;
}

int segment_code(const OrganBox& b, const std::array<int64_t, 3>& c) {
  const int zbit = (2 * c[0] >= b.z0 + b.z1) ? 1 : 0;
  const int ybit = (2 * c[1] >= b.y0 + b.y1) ? 1 : 0;
  const int xbit = (2 * c[2] >= b.x0 + b.x1) ? 1 : 0;
  return zbit * 4 + ybit * 2 + xbit;
}

// Two surface forms: the compact "right S3" code and the looser
// "right upper region" wording.
std::string segment_string(int code, bool region_style = false) {
  const std::string side = (code & 1) ? "left" : "right";
  if (region_style) return side + ((code & 4) ? " lower region" : " upper region");
  return side + " S" + std::to_string(code + 1);
}

struct NounInfo {
  std::string singular;
  std::string plural;  // empty when enumeration is not available
  PhraseClass cls;
};

NounInfo noun_for_type(const std::string& type) {
  const Lexicon& lex = lexicon();
  for (size_t i = 0; i < lex.lesion_nouns.size(); ++i)
    if (lex.lesion_nouns[i] == type) return {type, lex.lesion_plurals[i], PhraseClass::Lesion};
  for (const auto& s : lex.shape_nouns)
    if (s == type) return {type, "", PhraseClass::ShapeAbnormality};
  throw ContractError("anomaly type '" + type + "' has no lexicon noun");
}

}  // namespace

std::string segment_phrase(const phantom::Sample& sample, const phantom::AnomalyInstance& inst) {
  auto boxes = organ_boxes(sample.labels);
  return segment_string(segment_code(boxes.at(inst.organ_id), inst.center), false);
}

ReportDoc generate_report(const phantom::Sample& sample, const GrammarConfig& config,
                          uint64_t seed, int64_t sample_ref) {
  Rng rng(hash_key(seed, 0x5245504f));  // report stream
  const Lexicon& lex = lexicon();
  DocBuilder b;
  b.doc.sample_ref = sample_ref;

  auto boxes = organ_boxes(sample.labels);

  // anomalies grouped by organ, in organ-id order
  std::map<int, std::vector<const phantom::AnomalyInstance*>> by_organ;
  for (const auto& a : sample.anomalies) by_organ[a.organ_id].push_back(&a);

  for (auto& [organ_id, list] : by_organ) {
    const std::string organ = organ_name(organ_id);
    std::vector<bool> done(list.size(), false);
    std::vector<std::string> segs(list.size());
    for (size_t i = 0; i < list.size(); ++i)
      segs[i] = segment_string(segment_code(boxes.at(organ_id), list[i]->center),
                               rng.bernoulli(0.3));

    // enumeration pattern: two same-noun anomalies with distinct segments
    for (size_t i = 0; i < list.size(); ++i) {
      if (done[i]) continue;
      for (size_t j = i + 1; j < list.size(); ++j) {
        if (done[j] || list[i]->type != list[j]->type) continue;
        const NounInfo noun = noun_for_type(list[i]->type);
        if (noun.plural.empty()) continue;
        if (segs[i] == segs[j]) continue;
        if (!rng.bernoulli(config.enumeration_prob)) continue;
        b.begin_sentence(organ_id);
        b.lit("The ");
        const int segA = b.phrase(segs[i], PhraseClass::AnatomicalSegment);
        b.lit(" and ");
        const int segB = b.phrase(segs[j], PhraseClass::AnatomicalSegment);
        b.lit(" of the " + organ + " contain ");
        const int qty = b.phrase("two", PhraseClass::Quantity);
        b.lit(" ");
        const int les = b.phrase(noun.plural, noun.cls);
        b.end_sentence();
        b.doc.groups.push_back({{segA, qty, les}, list[i]->id, organ_id, false});
        b.doc.groups.push_back({{segB, qty, les}, list[j]->id, organ_id, false});
        done[i] = done[j] = true;
        break;
      }
    }

    // one sentence per remaining anomaly; the segment always precedes the
    // lesion noun so relation estimation can localize every seed
    for (size_t i = 0; i < list.size(); ++i) {
      if (done[i]) continue;
      const phantom::AnomalyInstance& inst = *list[i];
      const NounInfo noun = noun_for_type(inst.type);
      const std::string& seg = segs[i];
      const int meas_mm = std::max(1, static_cast<int>(std::lround(inst.size_mm)));

      std::vector<int> ids;
      b.begin_sentence(organ_id);
      const int variant = static_cast<int>(rng.uniform_int(3));
      if (variant == 0) {
        b.lit("In the ");
        ids.push_back(b.phrase(seg, PhraseClass::AnatomicalSegment));
        b.lit(" of the " + organ + ", ");
        b.lit(noun.cls == PhraseClass::Lesion ? "a " : "");
        if (rng.bernoulli(config.quantity_prob)) {
          ids.push_back(b.phrase("single", PhraseClass::Quantity));
          b.lit(" ");
        }
        ids.push_back(b.phrase(std::to_string(meas_mm) + " mm", PhraseClass::MeasurementResult));
        b.lit(" ");
        if (rng.bernoulli(config.characteristics_prob)) {
          const std::string& ch = inst.intensity_delta < 0 ? lex.characteristics[0]
                                                           : lex.characteristics[1];
          ids.push_back(b.phrase(ch, PhraseClass::Characteristics));
          b.lit(" ");
        }
        ids.push_back(b.phrase(noun.singular, noun.cls));
        b.lit(" is seen");
      } else if (variant == 1) {
        b.lit("Within the ");
        ids.push_back(b.phrase(seg, PhraseClass::AnatomicalSegment));
        b.lit(" of the " + organ + ", there is ");
        b.lit(noun.cls == PhraseClass::Lesion ? "a " : "");
        if (rng.bernoulli(config.characteristics_prob)) {
          const size_t k = 2 + static_cast<size_t>(rng.uniform_int(
                                   static_cast<int64_t>(lex.characteristics.size()) - 2));
          ids.push_back(b.phrase(lex.characteristics[k], PhraseClass::Characteristics));
          b.lit(" ");
        }
        ids.push_back(b.phrase(noun.singular, noun.cls));
        b.lit(" measuring ");
        ids.push_back(b.phrase(std::to_string(meas_mm) + " mm", PhraseClass::MeasurementResult));
      } else {
        b.lit("In the ");
        ids.push_back(b.phrase(seg, PhraseClass::AnatomicalSegment));
        b.lit(" of the " + organ + ", ");
        b.lit(noun.cls == PhraseClass::Lesion ? "a " : "");
        ids.push_back(b.phrase(noun.singular, noun.cls));
        b.lit(" is noted, ");
        if (rng.bernoulli(config.diagnosis_prob)) {
          const size_t k = static_cast<size_t>(
              rng.uniform_int(static_cast<int64_t>(lex.diagnosis.size())));
          ids.push_back(b.phrase(lex.diagnosis[k], PhraseClass::Diagnosis));
        } else {
          ids.push_back(b.phrase(std::to_string(meas_mm) + " mm", PhraseClass::MeasurementResult));
          b.lit(" in size");
        }
      }
      b.end_sentence();
      b.doc.groups.push_back({ids, inst.id, organ_id, false});
    }
  }

  // anomaly-free organs present in this sample, for distractors and
  // normal statements
  std::vector<int> quiet;
  for (const auto& [oid, box] : boxes)
    if (box.any && !by_organ.count(oid)) quiet.push_back(oid);

  size_t qi = 0;
  if (!quiet.empty() && rng.bernoulli(config.distractor_prob)) {
    const int organ_id = quiet[qi++ % quiet.size()];
    b.begin_sentence(organ_id);
    if (rng.bernoulli(0.5)) {
      b.lit("The " + organ_name(organ_id) + " is ");
      const size_t k =
          static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(lex.temporal.size())));
      b.phrase(lex.temporal[k], PhraseClass::TemporalChange);
    } else {
      b.lit("The " + organ_name(organ_id) + " shows no abnormality ");
      const size_t k =
          static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(lex.contrast.size())));
      b.phrase(lex.contrast[k], PhraseClass::ContrastInformation);
    }
    b.end_sentence();
  }

  const int normals = 1 + static_cast<int>(rng.uniform_int(config.max_normal_statements));
  for (int k = 0; k < normals && qi < quiet.size(); ++k) {
    const int organ_id = quiet[qi++];
    b.begin_sentence(organ_id);
    b.lit(rng.bernoulli(0.5) ? "The " + organ_name(organ_id) + " appears unremarkable"
                             : "The " + organ_name(organ_id) + " is normal in appearance");
    b.end_sentence();
  }

  if (rng.bernoulli(0.4)) {
    b.begin_sentence(0);
    b.lit("Comparison was made with the prior examination");
    b.end_sentence();
  }

  if (b.doc.sentences.empty()) {
    b.begin_sentence(0);
    b.lit("No focal abnormality is identified");
    b.end_sentence();
  }
  return b.doc;
}

// ---------------------------------------------------------------------------
// text augmentation

namespace {

// true when `pos` is an insertion point strictly inside a phrase span
bool inside_any_phrase(const std::vector<PhraseAnnotation>& phrases, int64_t pos) {
  for (const auto& p : phrases)
    if (pos > p.start && pos < p.end) return true;
  return false;
}

// true when character `i` belongs to a phrase span
bool covered_by_phrase(const std::vector<PhraseAnnotation>& phrases, int64_t i) {
  for (const auto& p : phrases)
    if (i >= p.start && i < p.end) return true;
  return false;
}

ReportDoc drop_and_remap(const ReportDoc& doc, const std::vector<int64_t>& new_pos) {
  // new_pos[i] = new index of old char i, or -1 if deleted. Assumes
  // surviving characters keep their relative order.
  ReportDoc out;
  out.sample_ref = doc.sample_ref;
  for (size_t i = 0; i < new_pos.size(); ++i)
    if (new_pos[i] >= 0) out.text += doc.text[i];

  auto map_start = [&](int64_t pos) {
    for (int64_t i = pos; i < static_cast<int64_t>(new_pos.size()); ++i)
      if (new_pos[static_cast<size_t>(i)] >= 0) return new_pos[static_cast<size_t>(i)];
    return static_cast<int64_t>(out.text.size());
  };
  auto map_end = [&](int64_t pos) {
    for (int64_t i = pos - 1; i >= 0; --i)
      if (new_pos[static_cast<size_t>(i)] >= 0) return new_pos[static_cast<size_t>(i)] + 1;
    return static_cast<int64_t>(0);
  };

  std::vector<int> phrase_remap(doc.phrases.size(), -1);
  for (size_t i = 0; i < doc.phrases.size(); ++i) {
    const auto& p = doc.phrases[i];
    const int64_t s = map_start(p.start);
    const int64_t e = map_end(p.end);
    if (s >= e) continue;  // fully deleted
    phrase_remap[i] = static_cast<int>(out.phrases.size());
    out.phrases.push_back({s, e, p.cls});
  }
  for (const auto& sent : doc.sentences) {
    const int64_t s = map_start(sent.start);
    const int64_t e = map_end(sent.end);
    if (s >= e) continue;
    out.sentences.push_back({s, e, sent.anatomy_class});
  }
  for (const auto& g : doc.groups) {
    AnomalyGroup ng;
    ng.anomaly_ref = g.anomaly_ref;
    ng.organ_class = g.organ_class;
    bool has_segment = false;
    for (int pid : g.phrase_ids) {
      const int np = phrase_remap[static_cast<size_t>(pid)];
      if (np < 0) continue;
      ng.phrase_ids.push_back(np);
      if (out.phrases[static_cast<size_t>(np)].cls == PhraseClass::AnatomicalSegment)
        has_segment = true;
    }
    if (ng.phrase_ids.empty() || !has_segment) continue;  // group dropped
    out.groups.push_back(std::move(ng));
  }
  return out;
}

}  // namespace

ReportDoc augment_text(const ReportDoc& doc, AugmentMode mode, double rate, uint64_t seed) {
  check(rate >= 0.0 && rate <= 0.2, "augment_text: rate must be in [0, 0.2]");
  const int64_t n = static_cast<int64_t>(doc.text.size());
  if (rate == 0.0 || n == 0) return doc;
  Rng rng(hash_key(seed, 0x41554754));  // augment stream

  if (mode == AugmentMode::Deletion) {
    std::vector<int64_t> new_pos(static_cast<size_t>(n), -1);
    int64_t next = 0;
    for (int64_t i = 0; i < n; ++i) {
      const bool deleted = !covered_by_phrase(doc.phrases, i) && rng.bernoulli(rate);
      if (!deleted) new_pos[static_cast<size_t>(i)] = next++;
    }
    return drop_and_remap(doc, new_pos);
  }

  if (mode == AugmentMode::Insertion) {
    const int64_t count = static_cast<int64_t>(rate * static_cast<double>(n) * rng.uniform());
    std::vector<int64_t> at;
    for (int64_t k = 0; k < count; ++k) {
      const int64_t pos = rng.uniform_int(n + 1);
      if (inside_any_phrase(doc.phrases, pos)) continue;
      at.push_back(pos);
    }
    std::sort(at.begin(), at.end());
    ReportDoc out;
    out.sample_ref = doc.sample_ref;
    std::vector<int64_t> shift_at(static_cast<size_t>(n) + 1, 0);
    for (int64_t p : at) ++shift_at[static_cast<size_t>(p)];
    // running shifts: before(i) counts insertions at positions <= i,
    // giving new offsets for span starts; strictly-before for ends.
    std::vector<int64_t> before(static_cast<size_t>(n) + 1, 0);
    int64_t acc = 0;
    for (int64_t i = 0; i <= n; ++i) {
      acc += shift_at[static_cast<size_t>(i)];
      before[static_cast<size_t>(i)] = acc;
    }
    size_t ai = 0;
    for (int64_t i = 0; i <= n; ++i) {
      while (ai < at.size() && at[ai] == i) {
        out.text += static_cast<char>('a' + rng.uniform_int(26));
        ++ai;
      }
      if (i < n) out.text += doc.text[static_cast<size_t>(i)];
    }
    auto map_s = [&](int64_t p) { return p + before[static_cast<size_t>(p)]; };
    auto map_e = [&](int64_t p) { return p + (p > 0 ? before[static_cast<size_t>(p - 1)] : 0); };
    out.phrases = doc.phrases;
    for (auto& p : out.phrases) {
      const int64_t s = map_s(p.start), e = map_e(p.end);
      check(s < e, "augment: inverted phrase span");
      p.start = s;
      p.end = e;
    }
    out.sentences = doc.sentences;
    for (auto& s : out.sentences) {
      s.end = map_e(s.end);
      s.start = map_s(s.start);
    }
    out.groups = doc.groups;
    return out;
  }

  // Crop: remove whole sentences from one end, bounded by rate.
  const int64_t budget = static_cast<int64_t>(rate * static_cast<double>(n));
  const bool from_end = rng.bernoulli(0.5);
  std::vector<int64_t> new_pos(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) new_pos[static_cast<size_t>(i)] = i;

  int64_t removed = 0;
  std::vector<const SentenceAnnotation*> order;
  for (const auto& s : doc.sentences) order.push_back(&s);
  if (from_end) std::reverse(order.begin(), order.end());
  std::vector<int64_t> cut_from, cut_to;
  for (const auto* s : order) {
    const int64_t len = s->end - s->start;
    if (removed + len > budget) break;
    removed += len;
    cut_from.push_back(s->start);
    cut_to.push_back(s->end);
  }
  if (removed == 0) return doc;
  std::vector<int64_t> final_pos(static_cast<size_t>(n), -1);
  auto cut = [&](int64_t i) {
    for (size_t k = 0; k < cut_from.size(); ++k)
      if (i >= cut_from[k] && i < cut_to[k]) return true;
    return false;
  };
  int64_t next = 0;
  for (int64_t i = 0; i < n; ++i) {
    // also swallow the separator space following a cut sentence
    if (cut(i) || (i > 0 && cut(i - 1) && doc.text[static_cast<size_t>(i)] == ' ')) continue;
    final_pos[static_cast<size_t>(i)] = next++;
  }
  return drop_and_remap(doc, final_pos);
}

}  // namespace vg::reportlang
