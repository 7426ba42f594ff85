#include "vg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <thread>

#include "vg/rng.hpp"
#include "vg/structuring.hpp"

namespace vg::trainer {

using tc::Tensor;

void TrainConfig::validate() const {
  check_config(batch_size >= 1, "train.batch must be >= 1");
  check_config(max_steps >= 0, "train.max_steps must be >= 0");
  check_config(max_steps == 0 || warmup_steps < max_steps,
               "train.warmup must be below train.max_steps");
  check_config(decay_factor > 0.0 && decay_factor < 1.0, "train.decay_factor must be in (0,1)");
  check_config(decay_every >= 1, "train.decay_every must be >= 1");
  check_config(threads >= 1, "train.threads must be >= 1");
}

double lr_at(int64_t step, const TrainConfig& cfg) {
  check(step >= 0, "lr_at: negative step");
  if (step < cfg.warmup_steps) {
    const double t = static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    return cfg.initial_lr + (cfg.base_lr - cfg.initial_lr) * t;
  }
  const int64_t decays = (step - cfg.warmup_steps) / cfg.decay_every;
  return cfg.base_lr * std::pow(cfg.decay_factor, static_cast<double>(decays));
}

void renorm_clips_at(int64_t step, const TrainConfig& cfg, double* r_max, double* d_max) {
  const double t = cfg.warmup_steps > 0
                       ? std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.warmup_steps))
                       : 1.0;
  *r_max = 1.0 + 2.0 * t;
  *d_max = 5.0 * t;
}

Tensor dice_loss(const Tensor& pred, const Tensor& gt, double eps) {
  check(pred.shape() == gt.shape(), "dice_loss: shape mismatch " + tc::shape_str(pred.shape()) +
                                        " vs " + tc::shape_str(gt.shape()));
  Tensor inter = tc::sum(tc::mul(pred, gt));
  Tensor denom = tc::add(tc::sum(tc::mul(pred, pred)), tc::sum(tc::mul(gt, gt)));
  Tensor num = tc::add_scalar(tc::mul_scalar(inter, 2.0), eps);
  Tensor ratio = tc::div(num, tc::add_scalar(denom, eps));
  return tc::add_scalar(tc::mul_scalar(ratio, -1.0), 1.0);
}

// ---------------------------------------------------------------------------
// image augmentation

namespace {

template <class T>
vol::Volume3<T> rotate90_z(const vol::Volume3<T>& v, int quarter_turns) {
  // exact lattice rotation about z; requires a square (h, w) footprint
  vol::Volume3<T> out(v.d, v.h, v.w);
  for (int64_t z = 0; z < v.d; ++z)
    for (int64_t y = 0; y < v.h; ++y)
      for (int64_t x = 0; x < v.w; ++x) {
        int64_t sy = y, sx = x;
        switch (quarter_turns & 3) {
          case 1: sy = v.w - 1 - x; sx = y; break;
          case 2: sy = v.h - 1 - y; sx = v.w - 1 - x; break;
          case 3: sy = x; sx = v.h - 1 - y; break;
          default: break;
        }
        out.at(z, y, x) = v.at(z, sy, sx);
      }
  return out;
}

struct ScaleMap {
  double factor;
  int64_t d, h, w;
  // source voxel (nearest) for a target voxel, zoom about the center
  void source(int64_t z, int64_t y, int64_t x, double* sz, double* sy, double* sx) const {
    *sz = (static_cast<double>(z) - 0.5 * (d - 1)) / factor + 0.5 * (d - 1);
    *sy = (static_cast<double>(y) - 0.5 * (h - 1)) / factor + 0.5 * (h - 1);
    *sx = (static_cast<double>(x) - 0.5 * (w - 1)) / factor + 0.5 * (w - 1);
  }
};

vol::FloatVolume scale_trilinear(const vol::FloatVolume& v, double factor) {
  vol::FloatVolume out(v.d, v.h, v.w);
  const ScaleMap map{factor, v.d, v.h, v.w};
  for (int64_t z = 0; z < v.d; ++z)
    for (int64_t y = 0; y < v.h; ++y)
      for (int64_t x = 0; x < v.w; ++x) {
        double sz, sy, sx;
        map.source(z, y, x, &sz, &sy, &sx);
        const int64_t z0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(sz)), 0, v.d - 1);
        const int64_t y0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(sy)), 0, v.h - 1);
        const int64_t x0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(sx)), 0, v.w - 1);
        const int64_t z1 = std::min(z0 + 1, v.d - 1), y1 = std::min(y0 + 1, v.h - 1),
                      x1 = std::min(x0 + 1, v.w - 1);
        const double tz = std::clamp(sz - z0, 0.0, 1.0), ty = std::clamp(sy - y0, 0.0, 1.0),
                     tx = std::clamp(sx - x0, 0.0, 1.0);
        const double c00 = v.at(z0, y0, x0) + tx * (v.at(z0, y0, x1) - v.at(z0, y0, x0));
        const double c01 = v.at(z0, y1, x0) + tx * (v.at(z0, y1, x1) - v.at(z0, y1, x0));
        const double c10 = v.at(z1, y0, x0) + tx * (v.at(z1, y0, x1) - v.at(z1, y0, x0));
        const double c11 = v.at(z1, y1, x0) + tx * (v.at(z1, y1, x1) - v.at(z1, y1, x0));
        const double c0 = c00 + ty * (c01 - c00), c1 = c10 + ty * (c11 - c10);
        out.at(z, y, x) = static_cast<float>(c0 + tz * (c1 - c0));
      }
  return out;
}

template <class T>
vol::Volume3<T> scale_nearest(const vol::Volume3<T>& v, double factor) {
  vol::Volume3<T> out(v.d, v.h, v.w);
  const ScaleMap map{factor, v.d, v.h, v.w};
  for (int64_t z = 0; z < v.d; ++z)
    for (int64_t y = 0; y < v.h; ++y)
      for (int64_t x = 0; x < v.w; ++x) {
        double sz, sy, sx;
        map.source(z, y, x, &sz, &sy, &sx);
        const int64_t nz = std::clamp<int64_t>(static_cast<int64_t>(std::lround(sz)), 0, v.d - 1);
        const int64_t ny = std::clamp<int64_t>(static_cast<int64_t>(std::lround(sy)), 0, v.h - 1);
        const int64_t nx = std::clamp<int64_t>(static_cast<int64_t>(std::lround(sx)), 0, v.w - 1);
        out.at(z, y, x) = v.at(nz, ny, nx);
      }
  return out;
}

vol::FloatVolume box3(const vol::FloatVolume& v) {
  vol::FloatVolume out(v.d, v.h, v.w);
  for (int64_t z = 0; z < v.d; ++z)
    for (int64_t y = 0; y < v.h; ++y)
      for (int64_t x = 0; x < v.w; ++x) {
        double acc = 0.0;
        int n = 0;
        for (int64_t dz = -1; dz <= 1; ++dz)
          for (int64_t dy = -1; dy <= 1; ++dy)
            for (int64_t dx = -1; dx <= 1; ++dx) {
              if (!v.inside(z + dz, y + dy, x + dx)) continue;
              acc += v.at(z + dz, y + dy, x + dx);
              ++n;
            }
        out.at(z, y, x) = static_cast<float>(acc / n);
      }
  return out;
}

template <class T>
vol::Volume3<T> crop_pastezero(const vol::Volume3<T>& v, int64_t z0, int64_t y0, int64_t x0,
                               int64_t d, int64_t h, int64_t w) {
  vol::Volume3<T> out(d, h, w, T{});
  for (int64_t z = 0; z < d; ++z)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) out.at(z, y, x) = v.at(z0 + z, y0 + y, x0 + x);
  return out;
}

}  // namespace

phantom::Sample augment_image(const phantom::Sample& sample, const AugmentToggles& toggles,
                              uint64_t seed) {
  Rng rng(hash_key(seed, 0x494d4147));  // image stream
  phantom::Sample out = sample;

  // geometric: crop -> rotate -> scale, identical on ct / labels / masks
  if (toggles.image_crop && rng.bernoulli(0.5)) {
    const int64_t margin = 4;
    for (int attempt = 0; attempt < 8; ++attempt) {
      const int64_t d = out.ct.d - rng.uniform_int(std::min(margin, out.ct.d - 8) + 1);
      const int64_t h = out.ct.h - rng.uniform_int(std::min(margin, out.ct.h - 8) + 1);
      const int64_t w = out.ct.w - rng.uniform_int(std::min(margin, out.ct.w - 8) + 1);
      const int64_t z0 = rng.uniform_int(out.ct.d - d + 1);
      const int64_t y0 = rng.uniform_int(out.ct.h - h + 1);
      const int64_t x0 = rng.uniform_int(out.ct.w - w + 1);
      bool keeps_all = true;
      for (const auto& a : out.anomalies) {
        for (int64_t i = 0; i < a.mask.numel() && keeps_all; ++i) {
          if (!a.mask.data[static_cast<size_t>(i)]) continue;
          const int64_t z = i / (a.mask.h * a.mask.w);
          const int64_t y = (i / a.mask.w) % a.mask.h;
          const int64_t x = i % a.mask.w;
          keeps_all = z >= z0 && z < z0 + d && y >= y0 && y < y0 + h && x >= x0 && x < x0 + w;
        }
        if (!keeps_all) break;
      }
      if (!keeps_all) continue;  // retry, then skip the crop entirely
      out.ct = crop_pastezero(out.ct, z0, y0, x0, d, h, w);
      out.labels = crop_pastezero(out.labels, z0, y0, x0, d, h, w);
      for (auto& a : out.anomalies) {
        a.mask = crop_pastezero(a.mask, z0, y0, x0, d, h, w);
        a.center = {a.center[0] - z0, a.center[1] - y0, a.center[2] - x0};
      }
      break;
    }
  }

  if (toggles.image_rotate && out.ct.h == out.ct.w && rng.bernoulli(0.5)) {
    const int k = 1 + static_cast<int>(rng.uniform_int(3));
    out.ct = rotate90_z(out.ct, k);
    out.labels = rotate90_z(out.labels, k);
    for (auto& a : out.anomalies) a.mask = rotate90_z(a.mask, k);
  }

  if (toggles.image_scale && rng.bernoulli(0.5)) {
    const double factor = rng.uniform(0.9, 1.1);
    vol::ByteVolume labels = scale_nearest(out.labels, factor);
    std::vector<vol::MaskVolume> masks;
    masks.reserve(out.anomalies.size());
    bool ok = true;
    for (const auto& a : out.anomalies) {
      masks.push_back(scale_nearest(a.mask, factor));
      // nearest-neighbor resampling reweights boundary voxels; keep the
      // >= 50% in-organ invariant by dropping the op when it would break
      const auto& m = masks.back();
      int64_t total = 0, inside = 0;
      for (int64_t i = 0; i < m.numel(); ++i) {
        if (!m.data[static_cast<size_t>(i)]) continue;
        ++total;
        inside += labels.data[static_cast<size_t>(i)] == a.organ_id;
      }
      ok = ok && total > 0 && inside * 2 >= total;
    }
    if (ok) {
      out.ct = scale_trilinear(out.ct, factor);
      out.labels = std::move(labels);
      for (size_t i = 0; i < masks.size(); ++i) out.anomalies[i].mask = std::move(masks[i]);
    }
  }

  // photometric: ct only
  if (toggles.image_sharpen && rng.bernoulli(0.5)) {
    const double alpha = rng.uniform(0.3, 0.8);
    vol::FloatVolume smooth = box3(out.ct);
    for (int64_t i = 0; i < out.ct.numel(); ++i) {
      const double v = out.ct.data[static_cast<size_t>(i)] +
                       alpha * (out.ct.data[static_cast<size_t>(i)] - smooth.data[static_cast<size_t>(i)]);
      out.ct.data[static_cast<size_t>(i)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  if (toggles.image_smooth && rng.bernoulli(0.5)) {
    const double beta = rng.uniform(0.4, 1.0);
    vol::FloatVolume smooth = box3(out.ct);
    for (int64_t i = 0; i < out.ct.numel(); ++i)
      out.ct.data[static_cast<size_t>(i)] = static_cast<float>(
          (1.0 - beta) * out.ct.data[static_cast<size_t>(i)] + beta * smooth.data[static_cast<size_t>(i)]);
  }
  if (toggles.image_noise && rng.bernoulli(0.5)) {
    const double sigma = rng.uniform(0.005, 0.02);
    for (auto& v : out.ct.data)
      v = static_cast<float>(std::clamp(static_cast<double>(v) + rng.normal(0.0, sigma), 0.0, 1.0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// example assembly

namespace {

Tensor gt_grid_tensor(const vol::MaskVolume& mask, const grounder::GrounderConfig& gcfg,
                      tc::Dtype dtype) {
  const int64_t f = gcfg.downsample_factor();
  const int64_t pd = (mask.d + f - 1) / f * f;
  const int64_t ph = (mask.h + f - 1) / f * f;
  const int64_t pw = (mask.w + f - 1) / f * f;
  vol::MaskVolume padded(pd, ph, pw, 0);
  for (int64_t z = 0; z < mask.d; ++z)
    for (int64_t y = 0; y < mask.h; ++y)
      for (int64_t x = 0; x < mask.w; ++x) padded.at(z, y, x) = mask.at(z, y, x);
  vol::MaskVolume grid = vol::downsample_blockmax(padded, f);
  Tensor t = Tensor::zeros({grid.d, grid.h, grid.w}, dtype);
  for (int64_t i = 0; i < grid.numel(); ++i) t.set(i, grid.data[static_cast<size_t>(i)]);
  return t;
}

}  // namespace

Example make_example(const phantom::Sample& sample, const reportlang::ReportDoc& doc,
                     int anomaly_id, const grounder::GrounderConfig& gcfg,
                     const AugmentToggles* augment, uint64_t key) {
  Example ex;
  ex.sample_id = doc.sample_ref;
  ex.anomaly_id = anomaly_id;

  phantom::Sample working = augment ? augment_image(sample, *augment, key) : sample;

  reportlang::ReportDoc working_doc = doc;
  if (augment) {
    Rng rng(hash_key(key, 0x54585447));
    std::vector<reportlang::AugmentMode> modes;
    if (augment->text_delete) modes.push_back(reportlang::AugmentMode::Deletion);
    if (augment->text_insert) modes.push_back(reportlang::AugmentMode::Insertion);
    if (augment->text_crop) modes.push_back(reportlang::AugmentMode::Crop);
    if (!modes.empty() && rng.bernoulli(0.5)) {
      const auto mode = modes[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(modes.size())))];
      reportlang::ReportDoc perturbed =
          reportlang::augment_text(working_doc, mode, augment->text_rate, hash_key(key, 7));
      // a text crop can drop this example's group; the query must exist
      bool found = false;
      for (const auto& g : perturbed.groups) found |= g.anomaly_ref == anomaly_id;
      if (found) working_doc = std::move(perturbed);
    }
  }

  structuring::StructuringResult gold = structuring::structure_gold(working_doc);
  bool have_mask = false;
  for (size_t g = 0; g < gold.groups.size(); ++g) {
    if (gold.groups[g].anomaly_ref != anomaly_id) continue;
    ex.char_mask = gold.char_masks[g].values;
    ex.organ_class = gold.char_masks[g].organ_class;
    have_mask = true;
    break;
  }
  check(have_mask, "make_example: anomaly " + std::to_string(anomaly_id) + " has no gold group");

  ex.text = working_doc.text;
  ex.labels_norm = phantom::normalize_labels(
      working.labels, std::max<int>(1, gcfg.organ_vocab - 1));
  ex.ct = std::move(working.ct);

  const phantom::AnomalyInstance* inst = nullptr;
  for (const auto& a : working.anomalies)
    if (a.id == anomaly_id) inst = &a;
  check(inst != nullptr, "make_example: anomaly id not in sample");
  ex.gt_grid = gt_grid_tensor(inst->mask, gcfg, tc::Dtype::f32);
  return ex;
}

// ---------------------------------------------------------------------------
// optimizer step

TrainState TrainState::fresh(const grounder::Model& model) {
  TrainState st;
  for (const auto& [name, t] : model.params()) {
    st.adam_m.push_back(Tensor::zeros(t.shape(), t.dtype()));
    st.adam_v.push_back(Tensor::zeros(t.shape(), t.dtype()));
  }
  return st;
}

namespace {

struct SlotResult {
  double loss = 0.0;
  std::optional<grounder::Model> model;  // clone whose params carry this slot's grads
  std::vector<std::pair<std::string, tc::ChannelStats>> stats;
};

void run_slot(const grounder::Model& shared, const Example& ex, int64_t step,
              const TrainConfig& cfg, SlotResult* out) {
  out->model = shared.clone();
  grounder::ForwardCtx ctx;
  ctx.training = true;
  renorm_clips_at(step, cfg, &ctx.r_max, &ctx.d_max);
  ctx.observed_stats = &out->stats;

  tc::Tape tape;
  tc::TapeScope scope(tape);
  grounder::ForwardOut fwd =
      out->model->forward(ex.ct, ex.labels_norm, ex.text, ex.char_mask, ex.organ_class, ctx);
  Tensor gt = ex.gt_grid.dtype() == fwd.m.dtype() ? ex.gt_grid : ex.gt_grid.to(fwd.m.dtype());
  Tensor loss = dice_loss(fwd.m, gt, cfg.dice_eps);
  out->loss = loss.item();
  tape.backward(loss);
}

}  // namespace

double train_step(grounder::Model& model, TrainState& state, const std::vector<Example>& batch,
                  const TrainConfig& cfg) {
  check(!batch.empty(), "train_step: empty batch");
  const size_t nslots = batch.size();
  std::vector<SlotResult> slots(nslots);

  const int workers = std::max(1, std::min<int>(cfg.threads, static_cast<int>(nslots)));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w]() {
      for (size_t s = static_cast<size_t>(w); s < nslots; s += static_cast<size_t>(workers))
        run_slot(model, batch[s], state.step, cfg, &slots[s]);
    });
  for (auto& t : pool) t.join();

  double mean_loss = 0.0;
  for (const auto& s : slots) mean_loss += s.loss;
  mean_loss /= static_cast<double>(nslots);
  if (!std::isfinite(mean_loss)) {
    std::string ids;
    for (const auto& ex : batch)
      ids += " (" + std::to_string(ex.sample_id) + "," + std::to_string(ex.anomaly_id) + ")";
    throw NumericError("non-finite loss at step " + std::to_string(state.step) + "; batch:" + ids);
  }

  // canonical-order reductions: gradients, then normalization statistics
  const double lr = lr_at(state.step, cfg);
  const int64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
  auto& params = model.params();
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor& target = params[p].second;
    Tensor& m = state.adam_m[p];
    Tensor& v = state.adam_v[p];
    for (int64_t i = 0; i < target.numel(); ++i) {
      double g = 0.0;
      for (size_t s = 0; s < nslots; ++s) g += slots[s].model->params()[p].second.grad_get(i);
      g /= static_cast<double>(nslots);
      const double mi = cfg.adam_beta1 * m.get(i) + (1.0 - cfg.adam_beta1) * g;
      const double vi = cfg.adam_beta2 * v.get(i) + (1.0 - cfg.adam_beta2) * g * g;
      m.set(i, mi);
      v.set(i, vi);
      const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps);
      target.set(i, target.get(i) - update);
    }
  }

  // running statistics: mean of the observed batch stats per layer
  auto& buffers = model.buffers();
  for (size_t layer = 0; !slots[0].stats.empty() && layer < slots[0].stats.size(); ++layer) {
    const std::string& name = slots[0].stats[layer].first;
    const size_t channels = slots[0].stats[layer].second.mean.size();
    std::vector<double> mean(channels, 0.0), var(channels, 0.0);
    for (size_t s = 0; s < nslots; ++s) {
      const auto& st = slots[s].stats[layer];
      check(st.first == name, "train_step: normalization stat order diverged");
      for (size_t c = 0; c < channels; ++c) {
        mean[c] += st.second.mean[c];
        var[c] += st.second.var[c];
      }
    }
    for (auto& [bname, buf] : buffers) {
      const bool is_mean = bname == name + ".mean";
      const bool is_var = bname == name + ".var";
      if (!is_mean && !is_var) continue;
      for (int64_t c = 0; c < buf.numel(); ++c) {
        const double batch_stat =
            (is_mean ? mean[static_cast<size_t>(c)] : var[static_cast<size_t>(c)]) /
            static_cast<double>(nslots);
        buf.set(c, cfg.renorm_momentum * buf.get(c) + (1.0 - cfg.renorm_momentum) * batch_stat);
      }
    }
  }

  ++state.step;
  return mean_loss;
}

// ---------------------------------------------------------------------------
// evaluation and the fit loop

std::vector<evalkit::MetricsRecord> evaluate_split(const grounder::Model& model,
                                                   const trainer::CorpusView& corpus,
                                                   const std::vector<int64_t>& indices,
                                                   int threads) {
  struct Job {
    int64_t sample_idx;
    int anomaly_id;
  };
  std::vector<Job> jobs;
  for (int64_t idx : indices)
    for (const auto& a : (*corpus.samples)[static_cast<size_t>(idx)].anomalies)
      jobs.push_back({idx, a.id});

  std::vector<evalkit::MetricsRecord> records(jobs.size());
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(jobs.size())));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w]() {
      for (size_t j = static_cast<size_t>(w); j < jobs.size(); j += static_cast<size_t>(workers)) {
        const auto& job = jobs[j];
        const auto& sample = (*corpus.samples)[static_cast<size_t>(job.sample_idx)];
        const auto& doc = (*corpus.docs)[static_cast<size_t>(job.sample_idx)];
        Example ex = make_example(sample, doc, job.anomaly_id, model.config(), nullptr, 0);
        grounder::ForwardCtx ctx;  // inference mode
        grounder::ForwardOut fwd =
            model.forward(ex.ct, ex.labels_norm, ex.text, ex.char_mask, ex.organ_class, ctx);
        vol::FloatVolume pred = grounder::predicted_mask_volume(fwd);
        const phantom::AnomalyInstance* inst = nullptr;
        for (const auto& a : sample.anomalies)
          if (a.id == job.anomaly_id) inst = &a;
        records[j] = evalkit::evaluate_anomaly(pred, inst->mask, doc.sample_ref, inst->id,
                                               inst->organ_id, inst->type);
      }
    });
  for (auto& t : pool) t.join();
  return records;
}

namespace {

struct LogFile {
  std::ofstream os;
  explicit LogFile(const std::string& path, bool append) {
    os.open(path, append ? std::ios::app : std::ios::trunc);
    check_data(os.good(), "cannot open log: " + path);
    if (!append) os << "step,lr,train_loss,val_dice,val_miou,val_accuracy\n";
  }
  void row(int64_t step, double lr, double loss, const evalkit::Aggregates* val) {
    char buf[256];
    if (val)
      std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.6f,%.6f,%.6f\n",
                    static_cast<long long>(step), lr, loss, val->mean_dice_pct, val->miou_pct,
                    val->accuracy_pct);
    else
      std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,,,\n", static_cast<long long>(step), lr, loss);
    os << buf;
    os.flush();
  }
};

}  // namespace

FitResult fit(grounder::Model& model, const CorpusView& corpus, const TrainConfig& cfg,
              const std::string& run_dir, const checkpoint::Meta& meta, bool resume) {
  cfg.validate();
  check_config(!corpus.train_indices.empty(), "fit: corpus has no training samples");
  std::filesystem::create_directories(run_dir);
  const std::string last_path = run_dir + "/ckpt_last.vgc";
  const std::string best_path = run_dir + "/ckpt_best.vgc";
  const std::string log_path = run_dir + "/log.csv";

  TrainState state = TrainState::fresh(model);
  if (resume) {
    checkpoint::TrainExtras extras;
    checkpoint::Meta got;
    model = checkpoint::load(last_path, &got, &extras, meta);
    state.step = extras.step;
    state.best_val_accuracy = extras.best_val_accuracy;
    state.best_step = extras.best_step;
    state.adam_m = std::move(extras.adam_m);
    state.adam_v = std::move(extras.adam_v);
  }

  // per-anomaly example index over the training split
  struct Key {
    int64_t sample_idx;
    int anomaly_id;
  };
  std::vector<Key> examples;
  for (int64_t idx : corpus.train_indices)
    for (const auto& a : (*corpus.samples)[static_cast<size_t>(idx)].anomalies)
      examples.push_back({idx, a.id});
  check_config(!examples.empty(), "fit: training split has no anomalies");

  auto save_ckpt = [&](const std::string& path) {
    checkpoint::TrainExtras extras;
    extras.step = state.step;
    extras.train_seed = cfg.seed;
    extras.best_val_accuracy = state.best_val_accuracy;
    extras.best_step = state.best_step;
    extras.adam_m = state.adam_m;
    extras.adam_v = state.adam_v;
    checkpoint::save(path, model, meta, &extras);
  };

  auto run_validation = [&]() {
    auto records = evaluate_split(model, corpus, corpus.val_indices, cfg.threads);
    return evalkit::aggregate(records);
  };

  LogFile log(log_path, resume);
  FitResult result;
  result.best_val_accuracy = state.best_val_accuracy;

  if (cfg.max_steps == 0 || state.step >= cfg.max_steps) {
    save_ckpt(last_path);
    if (!std::filesystem::exists(best_path)) save_ckpt(best_path);
    return result;
  }

  double last_loss = 0.0;
  while (state.step < cfg.max_steps) {
    // deterministic batch assembly keyed by (seed, step, slot)
    std::vector<Example> batch;
    batch.reserve(static_cast<size_t>(cfg.batch_size));
    for (int slot = 0; slot < cfg.batch_size; ++slot) {
      const uint64_t key = hash_key(cfg.seed, 0x42415443, static_cast<uint64_t>(state.step),
                                    static_cast<uint64_t>(slot));
      const auto& pick = examples[static_cast<size_t>(Rng(key).uniform_int(
          static_cast<int64_t>(examples.size())))];
      batch.push_back(make_example((*corpus.samples)[static_cast<size_t>(pick.sample_idx)],
                                   (*corpus.docs)[static_cast<size_t>(pick.sample_idx)],
                                   pick.anomaly_id, model.config(), &cfg.augment, key));
    }
    last_loss = train_step(model, state, batch, cfg);

    const bool at_val = cfg.val_every > 0 && (state.step % cfg.val_every == 0 ||
                                              state.step == cfg.max_steps);
    if (at_val && !corpus.val_indices.empty()) {
      evalkit::Aggregates val = run_validation();
      log.row(state.step, lr_at(state.step - 1, cfg), last_loss, &val);
      if (val.accuracy_pct > state.best_val_accuracy) {
        state.best_val_accuracy = val.accuracy_pct;
        state.best_step = state.step;
        save_ckpt(best_path);
      }
      save_ckpt(last_path);
    } else if (state.step % 50 == 0 || state.step == cfg.max_steps) {
      log.row(state.step, lr_at(state.step - 1, cfg), last_loss, nullptr);
    }
  }
  save_ckpt(last_path);
  if (!std::filesystem::exists(best_path)) save_ckpt(best_path);

  result.steps_run = state.step;
  result.final_loss = last_loss;
  result.best_val_accuracy = state.best_val_accuracy;
  return result;
}

}  // namespace vg::trainer
