// vground: corpus generation, report structuring, training, evaluation,
// single-query grounding and the four-arm ablation, driven by a flat
// key-value config. Exit codes: 0 success, 1 usage/config error, 2 data
// error, 3 numeric failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "vg/checkpoint.hpp"
#include "vg/config.hpp"
#include "vg/corpus.hpp"
#include "vg/evalkit.hpp"
#include "vg/grounder.hpp"
#include "vg/structuring.hpp"
#include "vg/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vg;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string hex64(uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct CommonOpts {
  std::string config_file;
  std::vector<std::string> sets;

  config::RunConfig resolve() const { return config::RunConfig::load(config_file, sets); }
};

void add_common(CLI::App* cmd, CommonOpts* opts) {
  cmd->add_option("--config", opts->config_file, "flat JSON config file");
  cmd->add_option("--set", opts->sets, "override key=value (repeatable)");
}

checkpoint::Meta meta_for(const grounder::GrounderConfig& gcfg, uint64_t corpus_fp) {
  checkpoint::Meta meta;
  meta.config_fingerprint = gcfg.fingerprint();
  meta.class_order_fingerprint = structuring::class_order_fingerprint();
  meta.corpus_fingerprint = corpus_fp;
  return meta;
}

// ---------------------------------------------------------------------------
// gen

int cmd_gen(const CommonOpts& common, const std::string& out_dir, bool force) {
  const auto t0 = std::chrono::steady_clock::now();
  config::RunConfig cfg = common.resolve();
  if (fs::exists(out_dir) && !fs::is_empty(out_dir)) {
    check_config(force, "output directory is not empty (use --force): " + out_dir);
    fs::remove_all(out_dir);
  }
  fs::create_directories(out_dir);

  const std::array<double, 3> fractions{cfg.getd("corpus.split_train"),
                                        cfg.getd("corpus.split_val"),
                                        cfg.getd("corpus.split_test")};
  corpus::Manifest manifest = corpus::generate(
      out_dir, cfg.phantom_spec(), cfg.grammar_config(), static_cast<uint64_t>(cfg.geti("seed")),
      cfg.geti("corpus.samples"), fractions, cfg.corpus_fingerprint(),
      static_cast<int>(cfg.geti("train.threads")));
  cfg.write(out_dir + "/config.json");

  int64_t anomalies = 0;
  for (const auto& meta : manifest.samples) {
    phantom::Sample s = corpus::load_sample(out_dir, meta.id);
    anomalies += static_cast<int64_t>(s.anomalies.size());
  }
  std::printf("gen: %lld samples (%lld anomalies) -> %s  fingerprint %s  [%.1fs]\n",
              static_cast<long long>(manifest.sample_count), static_cast<long long>(anomalies),
              out_dir.c_str(), hex64(manifest.fingerprint).c_str(), seconds_since(t0));
  return 0;
}

// ---------------------------------------------------------------------------
// structure

int cmd_structure(const std::string& corpus_dir, const std::string& out_dir,
                  const std::string& mode, const std::string& text_augment, double text_rate) {
  corpus::Manifest manifest = corpus::read_manifest(corpus_dir);
  fs::create_directories(out_dir);
  structuring::ScoreCounts counts;
  for (const auto& meta : manifest.samples) {
    reportlang::ReportDoc doc = corpus::load_report(corpus_dir, meta.id);
    if (!text_augment.empty()) {
      reportlang::AugmentMode m;
      if (text_augment == "deletion") m = reportlang::AugmentMode::Deletion;
      else if (text_augment == "insertion") m = reportlang::AugmentMode::Insertion;
      else if (text_augment == "crop") m = reportlang::AugmentMode::Crop;
      else throw ConfigError("unknown --text-augment mode: " + text_augment);
      doc = reportlang::augment_text(doc, m, text_rate, meta.seed);
    }
    structuring::StructuringResult result =
        mode == "gold" ? structuring::structure_gold(doc) : structuring::structure_text(doc.text);
    counts.add(result, doc);
    char name[64];
    std::snprintf(name, sizeof(name), "%05lld.structured.json", static_cast<long long>(meta.id));
    corpus::write_structuring(out_dir + "/" + name, meta.id, result, manifest.fingerprint);
  }

  json summary;
  summary["mode"] = mode;
  summary["documents"] = manifest.samples.size();
  summary["sentence_accuracy"] = counts.sentence_accuracy();
  summary["phrase_precision"] = counts.phrase_precision();
  summary["phrase_recall"] = counts.phrase_recall();
  summary["phrase_f1"] = counts.phrase_f1();
  summary["group_exact_match"] = counts.group_exact_match();
  std::ofstream os(out_dir + "/structuring_report.json");
  os << summary.dump(2) << "\n";
  std::printf("structure[%s]: sentences %.4f  phrase F1 %.4f  groups %.4f  (%zu docs)\n",
              mode.c_str(), counts.sentence_accuracy(), counts.phrase_f1(),
              counts.group_exact_match(), manifest.samples.size());
  return 0;
}

// ---------------------------------------------------------------------------
// train

grounder::GrounderConfig arm_config(const config::RunConfig& cfg, const std::string& arm) {
  grounder::GrounderConfig gcfg = cfg.grounder_config();
  if (arm.empty()) return gcfg;
  if (arm == "baseline") {
    gcfg.use_anatomy_channel = false;
    gcfg.use_afa = false;
  } else if (arm == "anatomy") {
    gcfg.use_anatomy_channel = true;
    gcfg.use_afa = false;
  } else if (arm == "structuring") {
    gcfg.use_anatomy_channel = false;
    gcfg.use_afa = true;
  } else if (arm == "full") {
    gcfg.use_anatomy_channel = true;
    gcfg.use_afa = true;
  } else {
    throw ConfigError("unknown ablation arm: " + arm +
                      " (expected baseline|anatomy|structuring|full)");
  }
  return gcfg;
}

int cmd_train(const CommonOpts& common, const std::string& corpus_dir, const std::string& run_dir,
              const std::string& arm, bool resume) {
  const auto t0 = std::chrono::steady_clock::now();
  config::RunConfig cfg = common.resolve();
  corpus::Loaded loaded = corpus::load(corpus_dir, static_cast<int>(cfg.geti("train.threads")));
  check_data(loaded.manifest.fingerprint == cfg.corpus_fingerprint(),
             "corpus was generated with a different config (fingerprint " +
                 hex64(loaded.manifest.fingerprint) + " vs " + hex64(cfg.corpus_fingerprint()) +
                 "); refusing to mix configurations");

  grounder::GrounderConfig gcfg = arm_config(cfg, arm);
  trainer::TrainConfig tcfg = cfg.train_config();
  grounder::Model model(gcfg, tcfg.seed);
  fs::create_directories(run_dir);
  cfg.write(run_dir + "/config.json");

  trainer::CorpusView view = loaded.view();
  trainer::FitResult res =
      trainer::fit(model, view, tcfg, run_dir, meta_for(gcfg, loaded.manifest.fingerprint), resume);
  std::printf("train[%s]: %lld steps, final loss %.4f, best val accuracy %.2f%%  [%.1fs]\n",
              arm.empty() ? "config" : arm.c_str(), static_cast<long long>(res.steps_run),
              res.final_loss, res.best_val_accuracy, seconds_since(t0));
  return 0;
}

// ---------------------------------------------------------------------------
// eval

const std::vector<int64_t>& split_indices(const trainer::CorpusView& view, const std::string& split) {
  if (split == "train") return view.train_indices;
  if (split == "val") return view.val_indices;
  if (split == "test") return view.test_indices;
  throw ConfigError("unknown split: " + split + " (expected train|val|test)");
}

evalkit::Aggregates eval_checkpoint(const corpus::Loaded& loaded, const std::string& ckpt_path,
                                    const std::string& split, const std::string& out_dir,
                                    int threads, std::vector<evalkit::MetricsRecord>* out_records) {
  checkpoint::Meta expected;
  expected.corpus_fingerprint = loaded.manifest.fingerprint;
  checkpoint::Meta got;
  grounder::Model model = [&] {
    grounder::Model m = checkpoint::load(ckpt_path, &got);
    expected.config_fingerprint = got.config_fingerprint;
    check_data(got.corpus_fingerprint == 0 ||
                   got.corpus_fingerprint == loaded.manifest.fingerprint,
               "checkpoint " + ckpt_path + " was trained on corpus " +
                   hex64(got.corpus_fingerprint) + " but this corpus is " +
                   hex64(loaded.manifest.fingerprint) + "; refusing to mix configurations");
    return m;
  }();

  trainer::CorpusView view = loaded.view();
  const auto& indices = split_indices(view, split);
  check_data(!indices.empty(), "split '" + split + "' is empty");
  auto records = trainer::evaluate_split(model, view, indices, threads);
  evalkit::Aggregates agg = evalkit::aggregate(records);

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    const std::string label = split == "train" ? "train-split" : split;
    evalkit::write_records_csv(out_dir + "/metrics.csv", records, label);
    evalkit::write_breakdown_csv(out_dir + "/breakdown.csv", evalkit::breakdown(records));
    json summary;
    summary["split"] = label;
    summary["checkpoint"] = ckpt_path;
    summary["corpus_fingerprint"] = hex64(loaded.manifest.fingerprint);
    summary["config_fingerprint"] = hex64(got.config_fingerprint);
    summary["count"] = agg.count;
    if (agg.count) {
      summary["mean_dice_pct"] = agg.mean_dice_pct;
      summary["miou_pct"] = agg.miou_pct;
      summary["accuracy_pct"] = agg.accuracy_pct;
    } else {
      summary["note"] = "no anomalies in split; aggregates absent";
    }
    std::ofstream os(out_dir + "/summary.json");
    os << summary.dump(2) << "\n";
  }
  if (out_records) *out_records = std::move(records);
  return agg;
}

int cmd_eval(const std::string& corpus_dir, const std::string& split, const std::string& ckpt,
             const std::string& out_dir, int threads) {
  corpus::Loaded loaded = corpus::load(corpus_dir, threads);
  evalkit::Aggregates agg = eval_checkpoint(loaded, ckpt, split, out_dir, threads, nullptr);
  std::printf("eval[%s]: n=%lld dice %.2f%%  mIoU %.2f%%  accuracy %.2f%%\n", split.c_str(),
              static_cast<long long>(agg.count), agg.mean_dice_pct, agg.miou_pct,
              agg.accuracy_pct);
  return 0;
}

// ---------------------------------------------------------------------------
// ground

void write_overlay_ppm(const std::string& path, const vol::FloatVolume& ct,
                       const vol::FloatVolume& pred, const vol::MaskVolume* gt_union, int axis,
                       int64_t slice) {
  // axis 0: (y,x) plane at z=slice; 1: (z,x) at y; 2: (z,y) at x
  const int64_t rows = axis == 0 ? ct.h : ct.d;
  const int64_t cols = axis == 2 ? ct.h : ct.w;
  auto sample_at = [&](const auto& v, int64_t r, int64_t c) {
    if (axis == 0) return static_cast<double>(v.at(slice, r, c));
    if (axis == 1) return static_cast<double>(v.at(r, slice, c));
    return static_cast<double>(v.at(r, c, slice));
  };
  vol::MaskVolume bin = evalkit::binarize(pred, 0.1);
  auto on = [&](int64_t r, int64_t c) { return sample_at(bin, r, c) > 0.5; };

  std::ofstream os(path, std::ios::binary);
  check_data(os.good(), "cannot write overlay: " + path);
  os << "P6\n" << cols << " " << rows << "\n255\n";
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) {
      const auto gray = static_cast<uint8_t>(std::clamp(sample_at(ct, r, c), 0.0, 1.0) * 255.0);
      uint8_t rgb[3] = {gray, gray, gray};
      if (on(r, c)) {
        bool boundary = false;
        for (int dr = -1; dr <= 1 && !boundary; ++dr)
          for (int dc = -1; dc <= 1 && !boundary; ++dc) {
            const int64_t rr = r + dr, cc = c + dc;
            if (rr < 0 || rr >= rows || cc < 0 || cc >= cols || !on(rr, cc)) boundary = true;
          }
        if (boundary) {
          rgb[0] = 255;
          rgb[1] = 40;
          rgb[2] = 40;
        }
      }
      if (gt_union && sample_at(*gt_union, r, c) > 0.5) rgb[2] = 255;
      os.write(reinterpret_cast<const char*>(rgb), 3);
    }
  check_data(os.good(), "write failed: " + path);
}

int cmd_ground(const std::string& ckpt_path, const std::string& ct_file,
               const std::string& labels_file, const std::string& report_file, int index,
               const std::string& anno_file, const std::string& out_dir) {
  grounder::Model model = checkpoint::load(ckpt_path);
  vol::FloatVolume ct = vol::read_float_volume(ct_file);
  vol::ByteVolume labels = vol::read_byte_volume(labels_file);
  check_data(ct.d == labels.d && ct.h == labels.h && ct.w == labels.w,
             "ct and label volumes have different extents");

  // report: vg-report json or plain text
  std::string text;
  {
    std::ifstream is(report_file);
    check_data(is.good(), "cannot open report: " + report_file);
    std::string body((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (!body.empty() && body.front() == '{') {
      json j = json::parse(body);
      text = j.at("text").get<std::string>();
    } else {
      while (!body.empty() && (body.back() == '\n' || body.back() == '\r')) body.pop_back();
      text = body;
    }
  }

  structuring::StructuringResult structured = structuring::structure_text(text);
  std::vector<int> groundable;
  for (size_t g = 0; g < structured.groups.size(); ++g)
    if (!structured.groups[g].unlocalized) groundable.push_back(static_cast<int>(g));
  if (index < 0 || index >= static_cast<int>(groundable.size())) {
    std::fprintf(stderr, "anomaly index %d out of range; structured groups:\n", index);
    for (size_t i = 0; i < groundable.size(); ++i) {
      const auto& g = structured.groups[static_cast<size_t>(groundable[i])];
      std::string phrases;
      for (int pid : g.phrase_ids) {
        const auto& p = structured.phrases[static_cast<size_t>(pid)];
        phrases += " '" + text.substr(static_cast<size_t>(p.start),
                                      static_cast<size_t>(p.end - p.start)) + "'";
      }
      std::fprintf(stderr, "  [%zu] organ=%s:%s\n", i,
                   g.organ_class ? reportlang::organ_name(g.organ_class).c_str() : "unspecified",
                   phrases.c_str());
    }
    throw DataError("anomaly index out of range (have " + std::to_string(groundable.size()) +
                    " groups)");
  }
  const auto& group = structured.groups[static_cast<size_t>(groundable[static_cast<size_t>(index)])];
  const auto& mask = structured.char_masks[static_cast<size_t>(groundable[static_cast<size_t>(index)])];

  const int organ_count = std::max(1, model.config().organ_vocab - 1);
  vol::FloatVolume labels_norm = phantom::normalize_labels(labels, organ_count);
  grounder::ForwardCtx ctx;
  grounder::ForwardOut fwd =
      model.forward(ct, labels_norm, text, mask.values, group.organ_class, ctx);
  vol::FloatVolume pred = grounder::predicted_mask_volume(fwd);

  fs::create_directories(out_dir);
  vol::write_volume(out_dir + "/mask.vgv", pred);

  vol::MaskVolume gt_union(ct.d, ct.h, ct.w, 0);
  bool have_gt = false;
  if (!anno_file.empty()) {
    std::ifstream is(anno_file);
    check_data(is.good(), "cannot open annotations: " + anno_file);
    json j;
    is >> j;
    for (const auto& ja : j.at("anomalies")) {
      vol::Rle runs;
      for (const auto& r : ja.at("mask_rle"))
        runs.emplace_back(r[0].get<int64_t>(), r[1].get<int64_t>());
      vol::MaskVolume m = vol::rle_to_mask(ct.d, ct.h, ct.w, runs);
      // draw the bounding box edges of each annotated anomaly
      int64_t z0 = ct.d, z1 = 0, y0 = ct.h, y1 = 0, x0 = ct.w, x1 = 0;
      for (int64_t z = 0; z < ct.d; ++z)
        for (int64_t y = 0; y < ct.h; ++y)
          for (int64_t x = 0; x < ct.w; ++x)
            if (m.at(z, y, x)) {
              z0 = std::min(z0, z); z1 = std::max(z1, z);
              y0 = std::min(y0, y); y1 = std::max(y1, y);
              x0 = std::min(x0, x); x1 = std::max(x1, x);
            }
      if (z1 < z0) continue;
      have_gt = true;
      for (int64_t z = z0; z <= z1; ++z)
        for (int64_t y = y0; y <= y1; ++y)
          for (int64_t x = x0; x <= x1; ++x) {
            const bool edge_z = z == z0 || z == z1;
            const bool edge_y = y == y0 || y == y1;
            const bool edge_x = x == x0 || x == x1;
            if ((edge_y && edge_x) || (edge_z && edge_x) || (edge_z && edge_y))
              gt_union.at(z, y, x) = 1;
          }
    }
  }

  vol::FloatVolume gt_float(ct.d, ct.h, ct.w, 0.0f);
  for (int64_t i = 0; i < gt_union.numel(); ++i)
    gt_float.data[static_cast<size_t>(i)] = gt_union.data[static_cast<size_t>(i)];
  write_overlay_ppm(out_dir + "/slice_z.ppm", ct, pred, have_gt ? &gt_union : nullptr, 0, ct.d / 2);
  write_overlay_ppm(out_dir + "/slice_y.ppm", ct, pred, have_gt ? &gt_union : nullptr, 1, ct.h / 2);
  write_overlay_ppm(out_dir + "/slice_x.ppm", ct, pred, have_gt ? &gt_union : nullptr, 2, ct.w / 2);

  double mean = 0.0;
  for (float v : pred.data) mean += v;
  mean /= static_cast<double>(pred.numel());
  std::printf("ground: group %d (%s), mask %lldx%lldx%lld written to %s (mean %.3f)\n", index,
              group.organ_class ? reportlang::organ_name(group.organ_class).c_str() : "unspecified",
              static_cast<long long>(pred.d), static_cast<long long>(pred.h),
              static_cast<long long>(pred.w), out_dir.c_str(), mean);
  return 0;
}

// ---------------------------------------------------------------------------
// ablate

int cmd_ablate(const CommonOpts& common, const std::string& corpus_dir, const std::string& out_dir,
               bool reuse) {
  const auto t0 = std::chrono::steady_clock::now();
  config::RunConfig cfg = common.resolve();
  corpus::Loaded loaded = corpus::load(corpus_dir, static_cast<int>(cfg.geti("train.threads")));
  check_data(loaded.manifest.fingerprint == cfg.corpus_fingerprint(),
             "corpus fingerprint mismatch; refusing to mix configurations");
  fs::create_directories(out_dir);
  cfg.write(out_dir + "/config.json");

  const char* arms[4] = {"baseline", "anatomy", "structuring", "full"};
  std::map<std::string, evalkit::Aggregates> results;
  for (const char* arm : arms) {
    const std::string run_dir = out_dir + "/arm_" + arm;
    const std::string ckpt = run_dir + "/ckpt_best.vgc";
    if (!(reuse && fs::exists(ckpt))) {
      const auto ta = std::chrono::steady_clock::now();
      grounder::GrounderConfig gcfg = arm_config(cfg, arm);
      trainer::TrainConfig tcfg = cfg.train_config();
      grounder::Model model(gcfg, tcfg.seed);
      fs::create_directories(run_dir);
      trainer::CorpusView view = loaded.view();
      trainer::fit(model, view, tcfg, run_dir,
                   meta_for(gcfg, loaded.manifest.fingerprint), false);
      std::printf("ablate: trained %s in %.1fs\n", arm, seconds_since(ta));
      std::fflush(stdout);
    }
    results[arm] = eval_checkpoint(loaded, ckpt, "test", run_dir + "/eval_test",
                                   static_cast<int>(cfg.geti("train.threads")), nullptr);
  }

  const double base = results["baseline"].accuracy_pct;
  const double anat = results["anatomy"].accuracy_pct;
  const double stru = results["structuring"].accuracy_pct;
  const double full = results["full"].accuracy_pct;
  const bool gap_ok = full - base >= 5.0;
  const bool order_ok = stru >= anat && anat >= base - 2.0;

  std::ofstream table(out_dir + "/ablation_table.csv");
  table << "arm,anatomy,structuring,dice_pct,miou_pct,accuracy_pct,delta_accuracy_vs_baseline\n";
  for (const char* arm : arms) {
    const auto& a = results[arm];
    const bool an = std::string(arm) == "anatomy" || std::string(arm) == "full";
    const bool st = std::string(arm) == "structuring" || std::string(arm) == "full";
    char row[256];
    std::snprintf(row, sizeof(row), "%s,%d,%d,%.3f,%.3f,%.3f,%.3f\n", arm, an, st, a.mean_dice_pct,
                  a.miou_pct, a.accuracy_pct, a.accuracy_pct - base);
    table << row;
  }
  json summary;
  summary["accuracy"] = {{"baseline", base}, {"anatomy", anat}, {"structuring", stru}, {"full", full}};
  summary["full_minus_baseline"] = full - base;
  summary["gap_ok"] = gap_ok;
  summary["order_ok"] = order_ok;
  summary["pass"] = gap_ok && order_ok;
  std::ofstream os(out_dir + "/ablation_summary.json");
  os << summary.dump(2) << "\n";

  std::printf("ablate: accuracy baseline %.2f | +anatomy %.2f | +structuring %.2f | full %.2f\n",
              base, anat, stru, full);
  std::printf("ablate: full-baseline gap %.2f (need >= 5) %s; ordering %s  [%.1fs total]\n",
              full - base, gap_ok ? "OK" : "FAIL", order_ok ? "OK" : "FAIL", seconds_since(t0));
  return (gap_ok && order_ok) ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"report-to-volume visual grounding on synthetic phantoms"};
  app.require_subcommand(1);

  CommonOpts gen_opts;
  std::string gen_out;
  bool gen_force = false;
  CLI::App* gen = app.add_subcommand("gen", "generate a corpus (volumes, annotations, reports)");
  add_common(gen, &gen_opts);
  gen->add_option("--out", gen_out, "output corpus directory")->required();
  gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");

  std::string st_corpus, st_out, st_mode = "predicted", st_aug;
  double st_rate = 0.1;
  CLI::App* structure = app.add_subcommand("structure", "run report structuring over a corpus");
  structure->add_option("--corpus", st_corpus, "corpus directory")->required();
  structure->add_option("--out", st_out, "output directory")->required();
  structure->add_option("--mode", st_mode, "predicted|gold");
  structure->add_option("--text-augment", st_aug, "perturb text first: deletion|insertion|crop");
  structure->add_option("--text-rate", st_rate, "perturbation rate (max 0.2)");

  CommonOpts train_opts;
  std::string tr_corpus, tr_out, tr_arm;
  bool tr_resume = false;
  CLI::App* train = app.add_subcommand("train", "train a grounding model");
  add_common(train, &train_opts);
  train->add_option("--corpus", tr_corpus, "corpus directory")->required();
  train->add_option("--out", tr_out, "run directory")->required();
  train->add_option("--arm", tr_arm, "ablation arm: baseline|anatomy|structuring|full");
  train->add_flag("--resume", tr_resume, "resume from ckpt_last.vgc in the run directory");

  std::string ev_corpus, ev_split = "test", ev_ckpt, ev_out;
  int ev_threads = 2;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a corpus split");
  eval->add_option("--corpus", ev_corpus, "corpus directory")->required();
  eval->add_option("--split", ev_split, "train|val|test");
  eval->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  eval->add_option("--out", ev_out, "output directory for metrics files")->required();
  eval->add_option("--threads", ev_threads, "worker threads");

  std::string gr_ckpt, gr_ct, gr_labels, gr_report, gr_anno, gr_out = "ground_out";
  int gr_index = 0;
  CLI::App* ground = app.add_subcommand("ground", "ground one report query against a volume");
  ground->add_option("--checkpoint", gr_ckpt, "checkpoint file")->required();
  ground->add_option("--ct", gr_ct, "ct volume (.vgv)")->required();
  ground->add_option("--labels", gr_labels, "label volume (.vgv)")->required();
  ground->add_option("--report", gr_report, "report file (vg-report json or plain text)")->required();
  ground->add_option("--index", gr_index, "structured anomaly group index");
  ground->add_option("--anno", gr_anno, "annotation json for ground-truth boxes");
  ground->add_option("--out", gr_out, "output directory");

  CommonOpts ab_opts;
  std::string ab_corpus, ab_out;
  bool ab_reuse = false;
  CLI::App* ablate = app.add_subcommand("ablate", "train + evaluate the four ablation arms");
  add_common(ablate, &ab_opts);
  ablate->add_option("--corpus", ab_corpus, "corpus directory")->required();
  ablate->add_option("--out", ab_out, "output directory")->required();
  ablate->add_flag("--reuse", ab_reuse, "skip arms whose checkpoints already exist");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen(gen_opts, gen_out, gen_force);
    if (structure->parsed()) return cmd_structure(st_corpus, st_out, st_mode, st_aug, st_rate);
    if (train->parsed()) return cmd_train(train_opts, tr_corpus, tr_out, tr_arm, tr_resume);
    if (eval->parsed()) return cmd_eval(ev_corpus, ev_split, ev_ckpt, ev_out, ev_threads);
    if (ground->parsed())
      return cmd_ground(gr_ckpt, gr_ct, gr_labels, gr_report, gr_index, gr_anno, gr_out);
    if (ablate->parsed()) return cmd_ablate(ab_opts, ab_corpus, ab_out, ab_reuse);
    return 1;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "internal contract violation: %s\n", e.what());
    return 3;
  }
}
