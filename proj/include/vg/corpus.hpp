#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vg/phantom.hpp"
#include "vg/reportlang.hpp"
#include "vg/structuring.hpp"
#include "vg/trainer.hpp"

// On-disk corpus layout: one directory holding manifest.json, per-sample
// binary volumes (NNNN.ct.vgv / NNNN.labels.vgv), annotations
// (NNNN.anno.json with mask run-lengths) and reports (NNNN.report.json
// with gold structuring annotations). All files are versioned and embed
// the generating config fingerprint.

namespace vg::corpus {

enum class Split : int { Train = 0, Val = 1, Test = 2 };
const char* split_name(Split s);

struct SampleMeta {
  int64_t id = 0;
  uint64_t seed = 0;
  Split split = Split::Train;
};

struct Manifest {
  uint64_t fingerprint = 0;  // corpus fingerprint of the generating config
  uint64_t seed = 0;
  int64_t sample_count = 0;
  phantom::PhantomSpec phantom_spec;
  reportlang::GrammarConfig grammar;
  std::vector<SampleMeta> samples;
};

std::string ct_path(const std::string& dir, int64_t id);
std::string labels_path(const std::string& dir, int64_t id);
std::string anno_path(const std::string& dir, int64_t id);
std::string report_path(const std::string& dir, int64_t id);

// Generates and writes the whole corpus; deterministic per config.
// fractions are (train, val, test) and must sum to ~1.
Manifest generate(const std::string& dir, const phantom::PhantomSpec& spec,
                  const reportlang::GrammarConfig& grammar, uint64_t seed, int64_t samples,
                  const std::array<double, 3>& fractions, uint64_t fingerprint, int threads);

Manifest read_manifest(const std::string& dir);

phantom::Sample load_sample(const std::string& dir, int64_t id);
reportlang::ReportDoc load_report(const std::string& dir, int64_t id);

struct Loaded {
  Manifest manifest;
  std::vector<phantom::Sample> samples;   // indexed by sample id
  std::vector<reportlang::ReportDoc> docs;

  trainer::CorpusView view() const;
};

Loaded load(const std::string& dir, int threads);

// Structuring output file (predicted or gold passthrough), same schema
// as the report annotations plus per-group character masks.
void write_structuring(const std::string& path, int64_t sample_id,
                       const structuring::StructuringResult& result, uint64_t fingerprint);

}  // namespace vg::corpus
