#include "vg/structuring.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "vg/rng.hpp"

namespace vg::structuring {

namespace {

bool alnum(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

bool boundary_before(const std::string& text, int64_t i) {
  return i == 0 || !alnum(text[static_cast<size_t>(i - 1)]);
}

bool boundary_after(const std::string& text, int64_t e) {
  return e >= static_cast<int64_t>(text.size()) || !alnum(text[static_cast<size_t>(e)]);
}

bool literal_at(const std::string& text, int64_t i, const std::string& token) {
  return text.compare(static_cast<size_t>(i), token.size(), token) == 0 &&
         boundary_after(text, i + static_cast<int64_t>(token.size()));
}

// "right S3" / "left S7" / "right upper region" / "left lower region"
int64_t match_segment(const std::string& text, int64_t i) {
  for (const char* side : {"right ", "left "}) {
    const size_t len = std::char_traits<char>::length(side);
    if (text.compare(static_cast<size_t>(i), len, side) != 0) continue;
    const int64_t p = i + static_cast<int64_t>(len);
    if (p + 2 <= static_cast<int64_t>(text.size()) && text[static_cast<size_t>(p)] == 'S') {
      const char digit = text[static_cast<size_t>(p + 1)];
      if (digit >= '1' && digit <= '8' && boundary_after(text, p + 2)) return p + 2;
    }
    for (const char* zone : {"upper region", "lower region"}) {
      const int64_t zlen = static_cast<int64_t>(std::char_traits<char>::length(zone));
      if (text.compare(static_cast<size_t>(p), static_cast<size_t>(zlen), zone) == 0 &&
          boundary_after(text, p + zlen))
        return p + zlen;
    }
  }
  return -1;
}

// "12 mm"
int64_t match_measurement(const std::string& text, int64_t i) {
  int64_t p = i;
  while (p < static_cast<int64_t>(text.size()) && std::isdigit(static_cast<unsigned char>(text[static_cast<size_t>(p)])))
    ++p;
  if (p == i) return -1;
  if (text.compare(static_cast<size_t>(p), 3, " mm") != 0) return -1;
  if (!boundary_after(text, p + 3)) return -1;
  return p + 3;
}

struct TokenTable {
  std::vector<std::pair<std::string, PhraseClass>> literals;  // longest first
  TokenTable() {
    literals = reportlang::lexicon().tokens();
    std::stable_sort(literals.begin(), literals.end(), [](const auto& a, const auto& b) {
      return a.first.size() > b.first.size();
    });
  }
};

const TokenTable& token_table() {
  static const TokenTable t;
  return t;
}

}  // namespace

std::vector<SentenceAnnotation> classify_sentences(const std::string& text) {
  check(!text.empty(), "classify_sentences: empty text");
  const auto& organ_names = reportlang::lexicon().organ_names;

  std::vector<SentenceAnnotation> out;
  const int64_t n = static_cast<int64_t>(text.size());
  int64_t i = 0;
  while (i < n) {
    while (i < n && text[static_cast<size_t>(i)] == ' ') ++i;
    if (i >= n) break;
    int64_t end = i;
    while (end < n && text[static_cast<size_t>(end)] != '.') ++end;
    if (end < n) ++end;  // include the period

    // organ-name lexicon vote
    std::map<int, int> votes;
    for (int64_t p = i; p < end; ++p) {
      if (!boundary_before(text, p)) continue;
      for (size_t o = 0; o < organ_names.size(); ++o) {
        const auto& name = organ_names[o];
        if (p + static_cast<int64_t>(name.size()) <= end && literal_at(text, p, name)) {
          ++votes[static_cast<int>(o) + 1];
          break;
        }
      }
    }
    int cls = 0, best = 0;
    for (const auto& [organ, count] : votes)
      if (count > best) {
        best = count;
        cls = organ;
      }
    out.push_back({i, end, cls});
    i = end;
  }
  return out;
}

std::vector<PhraseAnnotation> recognize_phrases(const std::string& text,
                                                const std::vector<SentenceAnnotation>& sentences) {
  std::vector<PhraseAnnotation> out;
  const auto& table = token_table();
  for (const auto& sent : sentences) {
    int64_t i = sent.start;
    while (i < sent.end) {
      if (!boundary_before(text, i)) {
        ++i;
        continue;
      }
      int64_t best_end = -1;
      PhraseClass best_cls = PhraseClass::None;
      // patterned classes
      if (const int64_t e = match_segment(text, i); e > 0 && e <= sent.end) {
        best_end = e;
        best_cls = PhraseClass::AnatomicalSegment;
      }
      if (const int64_t e = match_measurement(text, i); e > best_end && e <= sent.end) {
        best_end = e;
        best_cls = PhraseClass::MeasurementResult;
      }
      // literal tokens (pre-sorted longest first)
      for (const auto& [token, cls] : table.literals) {
        const int64_t e = i + static_cast<int64_t>(token.size());
        if (e <= best_end) break;  // no longer literal can win
        if (e <= sent.end && literal_at(text, i, token)) {
          best_end = e;
          best_cls = cls;
          break;
        }
      }
      if (best_end > 0) {
        out.push_back({i, best_end, best_cls});
        i = best_end;
      } else {
        ++i;
      }
    }
  }
  return out;
}

namespace {

bool is_seed(PhraseClass c) {
  return c == PhraseClass::Lesion || c == PhraseClass::ShapeAbnormality;
}

}  // namespace

std::vector<AnomalyGroup> estimate_relations(const std::vector<PhraseAnnotation>& phrases,
                                             const std::vector<SentenceAnnotation>& sentences,
                                             int organ_class) {
  std::vector<AnomalyGroup> groups;
  for (const auto& sent : sentences) {
    std::vector<int> local;
    for (size_t i = 0; i < phrases.size(); ++i)
      if (phrases[i].start >= sent.start && phrases[i].end <= sent.end)
        local.push_back(static_cast<int>(i));
    std::sort(local.begin(), local.end(),
              [&](int a, int b) { return phrases[static_cast<size_t>(a)].start < phrases[static_cast<size_t>(b)].start; });

    std::vector<int> seeds;
    for (int id : local)
      if (is_seed(phrases[static_cast<size_t>(id)].cls)) seeds.push_back(id);
    if (seeds.empty()) continue;

    const size_t base = groups.size();
    for (int seed : seeds) groups.push_back({{seed}, -1, organ_class, false});

    // segment runs: consecutive segments (no seed between) attach to
    // every seed after the run, up to the next run
    std::vector<int> run;
    bool seed_since_run = false;
    std::vector<std::pair<int, int>> seg_to_seed;  // (segment id, seed index in `seeds`)
    size_t next_seed = 0;
    for (int id : local) {
      const auto& p = phrases[static_cast<size_t>(id)];
      if (p.cls == PhraseClass::AnatomicalSegment) {
        if (seed_since_run) {
          run.clear();
          seed_since_run = false;
        }
        run.push_back(id);
      } else if (is_seed(p.cls)) {
        for (int seg : run) seg_to_seed.emplace_back(seg, static_cast<int>(next_seed));
        seed_since_run = true;
        ++next_seed;
      }
    }
    for (const auto& [seg, seed_idx] : seg_to_seed)
      groups[base + static_cast<size_t>(seed_idx)].phrase_ids.push_back(seg);

    // attribute phrases: nearest seed by span midpoint, ties to the
    // preceding seed
    for (int id : local) {
      const auto& p = phrases[static_cast<size_t>(id)];
      if (is_seed(p.cls) || p.cls == PhraseClass::AnatomicalSegment) continue;
      const double mid = 0.5 * static_cast<double>(p.start + p.end);
      int best = 0;
      double best_dist = 1e18;
      for (size_t s = 0; s < seeds.size(); ++s) {
        const auto& sp = phrases[static_cast<size_t>(seeds[s])];
        const double smid = 0.5 * static_cast<double>(sp.start + sp.end);
        const double dist = std::fabs(mid - smid);
        const bool preceding = smid < mid;
        if (dist < best_dist - 1e-9 ||
            (std::fabs(dist - best_dist) <= 1e-9 && preceding)) {
          best_dist = dist;
          best = static_cast<int>(s);
        }
      }
      groups[base + static_cast<size_t>(best)].phrase_ids.push_back(id);
    }

    for (size_t g = base; g < groups.size(); ++g)
      std::sort(groups[g].phrase_ids.begin(), groups[g].phrase_ids.end(), [&](int a, int b) {
        return phrases[static_cast<size_t>(a)].start < phrases[static_cast<size_t>(b)].start;
      });
  }
  return groups;
}

std::vector<AnomalyGroup> split_multi_anatomy(const AnomalyGroup& group,
                                              const std::vector<PhraseAnnotation>& phrases) {
  std::vector<int> segments, rest;
  for (int id : group.phrase_ids) {
    if (phrases[static_cast<size_t>(id)].cls == PhraseClass::AnatomicalSegment)
      segments.push_back(id);
    else
      rest.push_back(id);
  }
  if (segments.empty()) {
    AnomalyGroup g = group;
    g.unlocalized = true;
    return {g};
  }
  std::vector<AnomalyGroup> out;
  for (int seg : segments) {
    AnomalyGroup g;
    g.anomaly_ref = group.anomaly_ref;
    g.organ_class = group.organ_class;
    g.phrase_ids = rest;
    g.phrase_ids.push_back(seg);
    std::sort(g.phrase_ids.begin(), g.phrase_ids.end(), [&](int a, int b) {
      return phrases[static_cast<size_t>(a)].start < phrases[static_cast<size_t>(b)].start;
    });
    out.push_back(std::move(g));
  }
  return out;
}

CharMask build_char_mask(const AnomalyGroup& group, const std::vector<PhraseAnnotation>& phrases,
                         int64_t text_length) {
  CharMask mask;
  mask.values.assign(static_cast<size_t>(text_length), 0);
  mask.organ_class = group.organ_class;
  for (int id : group.phrase_ids) {
    const auto& p = phrases[static_cast<size_t>(id)];
    check(p.start >= 0 && p.end <= text_length, "build_char_mask: phrase span out of range");
    for (int64_t j = p.start; j < p.end; ++j) {
      check(mask.values[static_cast<size_t>(j)] == 0,
            "build_char_mask: overlapping spans within one group");
      mask.values[static_cast<size_t>(j)] = static_cast<uint8_t>(p.cls);
    }
  }
  return mask;
}

StructuringResult structure_text(const std::string& text) {
  StructuringResult res;
  res.sentence_classes = classify_sentences(text);

  // concatenate sentences per class, in order of first appearance
  std::vector<int> class_order;
  std::map<int, std::vector<SentenceAnnotation>> blocks;
  for (const auto& s : res.sentence_classes) {
    if (!blocks.count(s.anatomy_class)) class_order.push_back(s.anatomy_class);
    blocks[s.anatomy_class].push_back(s);
  }

  for (int cls : class_order) {
    const auto& block = blocks[cls];
    std::vector<PhraseAnnotation> block_phrases = recognize_phrases(text, block);
    const int offset = static_cast<int>(res.phrases.size());
    res.phrases.insert(res.phrases.end(), block_phrases.begin(), block_phrases.end());
    for (auto& g : estimate_relations(block_phrases, block, cls)) {
      for (auto& split : split_multi_anatomy(g, block_phrases)) {
        for (int& id : split.phrase_ids) id += offset;
        res.groups.push_back(std::move(split));
      }
    }
  }

  std::sort(res.groups.begin(), res.groups.end(), [&](const AnomalyGroup& a, const AnomalyGroup& b) {
    const int64_t sa = a.phrase_ids.empty() ? 0 : res.phrases[static_cast<size_t>(a.phrase_ids.front())].start;
    const int64_t sb = b.phrase_ids.empty() ? 0 : res.phrases[static_cast<size_t>(b.phrase_ids.front())].start;
    return sa < sb;
  });
  for (size_t g = 0; g < res.groups.size(); ++g) {
    CharMask m = build_char_mask(res.groups[g], res.phrases, static_cast<int64_t>(text.size()));
    m.anomaly_ref = static_cast<int>(g);
    res.char_masks.push_back(std::move(m));
  }
  return res;
}

StructuringResult structure_gold(const ReportDoc& doc) {
  StructuringResult res;
  res.sentence_classes = doc.sentences;
  res.phrases = doc.phrases;
  res.groups = doc.groups;
  for (size_t g = 0; g < res.groups.size(); ++g) {
    CharMask m = build_char_mask(res.groups[g], res.phrases, static_cast<int64_t>(doc.text.size()));
    m.anomaly_ref = static_cast<int>(g);
    res.char_masks.push_back(std::move(m));
  }
  return res;
}

// ---------------------------------------------------------------------------
// scoring

namespace {

using GroupSig = std::pair<int, std::vector<std::tuple<int64_t, int64_t, int>>>;

GroupSig group_signature(const AnomalyGroup& g, const std::vector<PhraseAnnotation>& phrases) {
  GroupSig sig;
  sig.first = g.organ_class;
  for (int id : g.phrase_ids) {
    const auto& p = phrases[static_cast<size_t>(id)];
    sig.second.emplace_back(p.start, p.end, static_cast<int>(p.cls));
  }
  std::sort(sig.second.begin(), sig.second.end());
  return sig;
}

}  // namespace

void ScoreCounts::add(const StructuringResult& predicted, const ReportDoc& gold) {
  // sentences: aligned by span
  sentences += static_cast<int64_t>(gold.sentences.size());
  for (const auto& gs : gold.sentences)
    for (const auto& ps : predicted.sentence_classes)
      if (ps.start == gs.start && ps.end == gs.end) {
        sentences_correct += ps.anatomy_class == gs.anatomy_class;
        break;
      }

  gold_phrases += static_cast<int64_t>(gold.phrases.size());
  predicted_phrases += static_cast<int64_t>(predicted.phrases.size());
  for (const auto& gp : gold.phrases)
    for (const auto& pp : predicted.phrases)
      if (pp == gp) {
        ++matched_phrases;
        break;
      }

  gold_groups += static_cast<int64_t>(gold.groups.size());
  predicted_groups += static_cast<int64_t>(predicted.groups.size());
  std::vector<GroupSig> pred_sigs;
  for (const auto& pg : predicted.groups) pred_sigs.push_back(group_signature(pg, predicted.phrases));
  for (const auto& gg : gold.groups) {
    const GroupSig sig = group_signature(gg, gold.phrases);
    auto it = std::find(pred_sigs.begin(), pred_sigs.end(), sig);
    if (it != pred_sigs.end()) {
      ++matched_groups;
      pred_sigs.erase(it);
    }
  }
}

double ScoreCounts::sentence_accuracy() const {
  return sentences ? static_cast<double>(sentences_correct) / static_cast<double>(sentences) : 1.0;
}
double ScoreCounts::phrase_precision() const {
  return predicted_phrases ? static_cast<double>(matched_phrases) / static_cast<double>(predicted_phrases) : 1.0;
}
double ScoreCounts::phrase_recall() const {
  return gold_phrases ? static_cast<double>(matched_phrases) / static_cast<double>(gold_phrases) : 1.0;
}
double ScoreCounts::phrase_f1() const {
  const double p = phrase_precision(), r = phrase_recall();
  return (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
}
double ScoreCounts::group_exact_match() const {
  const int64_t denom = std::max(gold_groups, predicted_groups);
  return denom ? static_cast<double>(matched_groups) / static_cast<double>(denom) : 1.0;
}

uint64_t class_order_fingerprint() {
  uint64_t h = 0x434c4153;
  for (int c = 1; c <= reportlang::kPhraseClassCount; ++c) {
    const char* name = reportlang::phrase_class_name(static_cast<PhraseClass>(c));
    for (const char* p = name; *p; ++p) h = hash_combine(h, static_cast<uint64_t>(*p));
    h = hash_combine(h, static_cast<uint64_t>(c));
  }
  return h;
}

}  // namespace vg::structuring
