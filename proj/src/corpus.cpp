#include "vg/corpus.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "vg/rng.hpp"

namespace vg::corpus {

using nlohmann::json;

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

namespace {

Split split_from_name(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw DataError("unknown split name: " + s);
}

std::string id_str(int64_t id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05" PRId64, id);
  return buf;
}

std::string hex64(uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
  return buf;
}

uint64_t parse_hex64(const std::string& s) { return std::stoull(s, nullptr, 16); }

json json_of_doc(int64_t sample_id, const reportlang::ReportDoc& doc) {
  json j;
  j["format"] = "vg-report";
  j["version"] = 1;
  j["sample_id"] = sample_id;
  j["text"] = doc.text;
  json sentences = json::array();
  for (const auto& s : doc.sentences) sentences.push_back({s.start, s.end, s.anatomy_class});
  j["sentences"] = sentences;
  json phrases = json::array();
  for (const auto& p : doc.phrases) phrases.push_back({p.start, p.end, static_cast<int>(p.cls)});
  j["phrases"] = phrases;
  json groups = json::array();
  for (const auto& g : doc.groups) {
    json jg;
    jg["phrases"] = g.phrase_ids;
    jg["anomaly"] = g.anomaly_ref;
    jg["organ"] = g.organ_class;
    groups.push_back(jg);
  }
  j["groups"] = groups;
  return j;
}

void write_json(const std::string& path, const json& j) {
  std::ofstream os(path);
  check_data(os.good(), "cannot write: " + path);
  os << j.dump(1) << "\n";
  check_data(os.good(), "write failed: " + path);
}

json read_json(const std::string& path, const char* expect_format) {
  std::ifstream is(path);
  check_data(is.good(), "cannot open: " + path);
  json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    throw DataError(std::string("bad json in ") + path + ": " + e.what());
  }
  check_data(j.value("format", "") == expect_format,
             std::string("expected format ") + expect_format + " in " + path);
  check_data(j.value("version", 0) == 1, "unsupported schema version in " + path);
  return j;
}

}  // namespace

std::string ct_path(const std::string& dir, int64_t id) { return dir + "/" + id_str(id) + ".ct.vgv"; }
std::string labels_path(const std::string& dir, int64_t id) {
  return dir + "/" + id_str(id) + ".labels.vgv";
}
std::string anno_path(const std::string& dir, int64_t id) {
  return dir + "/" + id_str(id) + ".anno.json";
}
std::string report_path(const std::string& dir, int64_t id) {
  return dir + "/" + id_str(id) + ".report.json";
}

Manifest generate(const std::string& dir, const phantom::PhantomSpec& spec,
                  const reportlang::GrammarConfig& grammar, uint64_t seed, int64_t samples,
                  const std::array<double, 3>& fractions, uint64_t fingerprint, int threads) {
  check_config(samples >= 1, "corpus: need at least one sample");
  check_config(std::fabs(fractions[0] + fractions[1] + fractions[2] - 1.0) < 1e-6,
               "corpus: split fractions must sum to 1");
  std::filesystem::create_directories(dir);

  Manifest manifest;
  manifest.fingerprint = fingerprint;
  manifest.seed = seed;
  manifest.sample_count = samples;
  manifest.phantom_spec = spec;
  manifest.grammar = grammar;

  // deterministic split: shuffle ids by seeded sort key, slice by fraction
  std::vector<int64_t> order(static_cast<size_t>(samples));
  for (int64_t i = 0; i < samples; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return hash_key(seed, 0x53504c54, static_cast<uint64_t>(a)) <
           hash_key(seed, 0x53504c54, static_cast<uint64_t>(b));
  });
  const int64_t n_train = static_cast<int64_t>(std::llround(fractions[0] * static_cast<double>(samples)));
  const int64_t n_val = static_cast<int64_t>(std::llround(fractions[1] * static_cast<double>(samples)));
  std::vector<Split> split(static_cast<size_t>(samples), Split::Test);
  for (int64_t i = 0; i < samples; ++i) {
    if (i < n_train) split[static_cast<size_t>(order[static_cast<size_t>(i)])] = Split::Train;
    else if (i < n_train + n_val) split[static_cast<size_t>(order[static_cast<size_t>(i)])] = Split::Val;
  }

  manifest.samples.resize(static_cast<size_t>(samples));
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(samples)));
  std::vector<std::thread> pool;
  std::vector<std::string> errors(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w]() {
      try {
        for (int64_t id = w; id < samples; id += workers) {
          const uint64_t sample_seed = hash_key(seed, 0x53414d50, static_cast<uint64_t>(id));
          phantom::Sample sample = phantom::make_sample(spec, sample_seed);
          reportlang::ReportDoc doc = reportlang::generate_report(sample, grammar, sample_seed, id);

          vol::write_volume(ct_path(dir, id), sample.ct);
          vol::write_volume(labels_path(dir, id), sample.labels);

          json anno;
          anno["format"] = "vg-anno";
          anno["version"] = 1;
          anno["sample_id"] = id;
          anno["fingerprint"] = hex64(fingerprint);
          anno["spacing_mm"] = sample.spacing_mm;
          json anomalies = json::array();
          for (const auto& a : sample.anomalies) {
            json ja;
            ja["id"] = a.id;
            ja["type"] = a.type;
            ja["organ_id"] = a.organ_id;
            ja["center"] = a.center;
            ja["size_mm"] = a.size_mm;
            ja["intensity_delta"] = a.intensity_delta;
            json runs = json::array();
            for (const auto& [start, len] : vol::mask_to_rle(a.mask)) runs.push_back({start, len});
            ja["mask_rle"] = runs;
            anomalies.push_back(ja);
          }
          anno["anomalies"] = anomalies;
          write_json(anno_path(dir, id), anno);

          json report = json_of_doc(id, doc);
          report["fingerprint"] = hex64(fingerprint);
          write_json(report_path(dir, id), report);

          manifest.samples[static_cast<size_t>(id)] = {id, sample_seed, split[static_cast<size_t>(id)]};
        }
      } catch (const std::exception& e) {
        errors[static_cast<size_t>(w)] = e.what();
      }
    });
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (!e.empty()) throw DataError("corpus generation failed: " + e);

  json j;
  j["format"] = "vg-corpus";
  j["version"] = 1;
  j["fingerprint"] = hex64(fingerprint);
  j["seed"] = seed;
  j["sample_count"] = samples;
  json jp;
  jp["grid"] = {spec.grid_d, spec.grid_h, spec.grid_w};
  jp["organs"] = spec.organ_count;
  jp["anomalies"] = {spec.anomalies_min, spec.anomalies_max};
  jp["noise_amp"] = spec.noise_amp;
  jp["radius_scale"] = spec.radius_scale;
  j["phantom"] = jp;
  json jg;
  jg["enumeration_prob"] = grammar.enumeration_prob;
  jg["distractor_prob"] = grammar.distractor_prob;
  j["grammar"] = jg;
  json js = json::array();
  for (const auto& m : manifest.samples)
    js.push_back({{"id", m.id}, {"seed", hex64(m.seed)}, {"split", split_name(m.split)}});
  j["samples"] = js;
  write_json(dir + "/manifest.json", j);
  return manifest;
}

Manifest read_manifest(const std::string& dir) {
  json j = read_json(dir + "/manifest.json", "vg-corpus");
  Manifest m;
  m.fingerprint = parse_hex64(j.at("fingerprint").get<std::string>());
  m.seed = j.at("seed").get<uint64_t>();
  m.sample_count = j.at("sample_count").get<int64_t>();
  m.phantom_spec.grid_d = j.at("phantom").at("grid")[0].get<int64_t>();
  m.phantom_spec.grid_h = j.at("phantom").at("grid")[1].get<int64_t>();
  m.phantom_spec.grid_w = j.at("phantom").at("grid")[2].get<int64_t>();
  m.phantom_spec.organ_count = j.at("phantom").at("organs").get<int>();
  m.phantom_spec.anomalies_min = j.at("phantom").at("anomalies")[0].get<int>();
  m.phantom_spec.anomalies_max = j.at("phantom").at("anomalies")[1].get<int>();
  m.phantom_spec.noise_amp = j.at("phantom").at("noise_amp").get<double>();
  m.phantom_spec.radius_scale = j.at("phantom").at("radius_scale").get<double>();
  m.grammar.enumeration_prob = j.at("grammar").at("enumeration_prob").get<double>();
  m.grammar.distractor_prob = j.at("grammar").at("distractor_prob").get<double>();
  for (const auto& js : j.at("samples")) {
    SampleMeta meta;
    meta.id = js.at("id").get<int64_t>();
    meta.seed = parse_hex64(js.at("seed").get<std::string>());
    meta.split = split_from_name(js.at("split").get<std::string>());
    m.samples.push_back(meta);
  }
  check_data(static_cast<int64_t>(m.samples.size()) == m.sample_count,
             "manifest sample list does not match sample_count");
  return m;
}

phantom::Sample load_sample(const std::string& dir, int64_t id) {
  phantom::Sample s;
  s.ct = vol::read_float_volume(ct_path(dir, id));
  s.labels = vol::read_byte_volume(labels_path(dir, id));
  json anno = read_json(anno_path(dir, id), "vg-anno");
  for (const auto& ja : anno.at("anomalies")) {
    phantom::AnomalyInstance a;
    a.id = ja.at("id").get<int>();
    a.type = ja.at("type").get<std::string>();
    a.organ_id = ja.at("organ_id").get<int>();
    a.center = ja.at("center").get<std::array<int64_t, 3>>();
    a.size_mm = ja.at("size_mm").get<double>();
    a.intensity_delta = ja.at("intensity_delta").get<double>();
    vol::Rle runs;
    for (const auto& r : ja.at("mask_rle")) runs.emplace_back(r[0].get<int64_t>(), r[1].get<int64_t>());
    a.mask = vol::rle_to_mask(s.ct.d, s.ct.h, s.ct.w, runs);
    s.anomalies.push_back(std::move(a));
  }
  return s;
}

reportlang::ReportDoc load_report(const std::string& dir, int64_t id) {
  json j = read_json(report_path(dir, id), "vg-report");
  reportlang::ReportDoc doc;
  doc.sample_ref = j.at("sample_id").get<int64_t>();
  doc.text = j.at("text").get<std::string>();
  for (const auto& js : j.at("sentences"))
    doc.sentences.push_back({js[0].get<int64_t>(), js[1].get<int64_t>(), js[2].get<int>()});
  for (const auto& jp : j.at("phrases"))
    doc.phrases.push_back({jp[0].get<int64_t>(), jp[1].get<int64_t>(),
                           static_cast<reportlang::PhraseClass>(jp[2].get<int>())});
  for (const auto& jg : j.at("groups")) {
    reportlang::AnomalyGroup g;
    g.phrase_ids = jg.at("phrases").get<std::vector<int>>();
    g.anomaly_ref = jg.at("anomaly").get<int>();
    g.organ_class = jg.at("organ").get<int>();
    doc.groups.push_back(std::move(g));
  }
  return doc;
}

trainer::CorpusView Loaded::view() const {
  trainer::CorpusView v;
  v.samples = &samples;
  v.docs = &docs;
  v.fingerprint = manifest.fingerprint;
  for (const auto& meta : manifest.samples) {
    switch (meta.split) {
      case Split::Train: v.train_indices.push_back(meta.id); break;
      case Split::Val: v.val_indices.push_back(meta.id); break;
      case Split::Test: v.test_indices.push_back(meta.id); break;
    }
  }
  return v;
}

Loaded load(const std::string& dir, int threads) {
  Loaded out;
  out.manifest = read_manifest(dir);
  const int64_t n = out.manifest.sample_count;
  out.samples.resize(static_cast<size_t>(n));
  out.docs.resize(static_cast<size_t>(n));
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(n)));
  std::vector<std::thread> pool;
  std::vector<std::string> errors(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w]() {
      try {
        for (int64_t id = w; id < n; id += workers) {
          out.samples[static_cast<size_t>(id)] = load_sample(dir, id);
          out.docs[static_cast<size_t>(id)] = load_report(dir, id);
        }
      } catch (const std::exception& e) {
        errors[static_cast<size_t>(w)] = e.what();
      }
    });
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (!e.empty()) throw DataError("corpus load failed: " + e);
  return out;
}

void write_structuring(const std::string& path, int64_t sample_id,
                       const structuring::StructuringResult& result, uint64_t fingerprint) {
  json j;
  j["format"] = "vg-structured";
  j["version"] = 1;
  j["sample_id"] = sample_id;
  j["fingerprint"] = hex64(fingerprint);
  json sentences = json::array();
  for (const auto& s : result.sentence_classes) sentences.push_back({s.start, s.end, s.anatomy_class});
  j["sentences"] = sentences;
  json phrases = json::array();
  for (const auto& p : result.phrases) phrases.push_back({p.start, p.end, static_cast<int>(p.cls)});
  j["phrases"] = phrases;
  json groups = json::array();
  for (const auto& g : result.groups) {
    json jg;
    jg["phrases"] = g.phrase_ids;
    jg["anomaly"] = g.anomaly_ref;
    jg["organ"] = g.organ_class;
    jg["unlocalized"] = g.unlocalized;
    groups.push_back(jg);
  }
  j["groups"] = groups;
  json masks = json::array();
  for (const auto& m : result.char_masks) {
    json jm;
    jm["group"] = m.anomaly_ref;
    jm["organ"] = m.organ_class;
    jm["values"] = m.values;
    masks.push_back(jm);
  }
  j["char_masks"] = masks;
  write_json(path, j);
}

}  // namespace vg::corpus
