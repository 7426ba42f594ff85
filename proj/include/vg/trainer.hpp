#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vg/checkpoint.hpp"
#include "vg/evalkit.hpp"
#include "vg/grounder.hpp"
#include "vg/phantom.hpp"
#include "vg/reportlang.hpp"

// Joint training with dice loss: warmup + step-decay Adam schedule,
// image/text augmentation, per-anomaly examples, periodic validation
// with best-checkpoint retention. Deterministic: all randomness is
// keyed by (seed, purpose, step, slot), so a resumed run reproduces an
// unbroken one bit for bit regardless of worker count.

namespace vg::trainer {

struct AugmentToggles {
  bool image_crop = true, image_rotate = true, image_scale = true;
  bool image_sharpen = true, image_smooth = true, image_noise = true;
  bool text_delete = true, text_insert = true, text_crop = true;
  double text_rate = 0.1;
};

struct TrainConfig {
  int batch_size = 4;
  double base_lr = 1e-4;
  double initial_lr = 1e-5;
  int64_t warmup_steps = 500;
  int64_t decay_every = 3000;
  double decay_factor = 0.1;
  int64_t max_steps = 10000;
  int64_t val_every = 500;
  uint64_t seed = 1234;
  int threads = 2;
  double dice_eps = 1.0;
  double renorm_momentum = 0.99;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  AugmentToggles augment;

  void validate() const;
};

// Linear ramp from initial_lr to base_lr over warmup_steps, then
// base_lr * decay_factor^floor((step - warmup) / decay_every).
double lr_at(int64_t step, const TrainConfig& cfg);

// Clip schedule for batch renormalization: r_max 1 -> 3 and d_max 0 -> 5
// over the warmup steps.
void renorm_clips_at(int64_t step, const TrainConfig& cfg, double* r_max, double* d_max);

// 1 - (2 sum(pred*gt) + eps) / (sum(pred^2) + sum(gt^2) + eps)
tc::Tensor dice_loss(const tc::Tensor& pred, const tc::Tensor& gt, double eps = 1.0);

// Whole-sample augmentation: geometric ops move ct, labels and all
// ground-truth masks together (labels and masks by nearest neighbor),
// photometric ops touch only the ct. A crop that cannot keep every
// anomaly mask intact after bounded retries is skipped.
phantom::Sample augment_image(const phantom::Sample& sample, const AugmentToggles& toggles,
                              uint64_t seed);

// One prepared per-anomaly training example.
struct Example {
  vol::FloatVolume ct;
  vol::FloatVolume labels_norm;
  std::string text;
  std::vector<uint8_t> char_mask;
  int organ_class = 0;
  tc::Tensor gt_grid;  // encoder-resolution binary target (block-max)
  int64_t sample_id = 0;
  int anomaly_id = 0;
};

// Builds the example for (sample, anomaly): augmentations applied in
// training mode, gold-derived character mask, ground truth downsampled
// to the encoder grid.
Example make_example(const phantom::Sample& sample, const reportlang::ReportDoc& doc,
                     int anomaly_id, const grounder::GrounderConfig& gcfg,
                     const AugmentToggles* augment, uint64_t key);

struct TrainState {
  int64_t step = 0;
  std::vector<tc::Tensor> adam_m, adam_v;  // aligned with model params
  double best_val_accuracy = -1.0;
  int64_t best_step = -1;

  static TrainState fresh(const grounder::Model& model);
};

// One optimizer step over a batch. Batch elements run on worker threads
// against disjoint parameter copies; gradients and observed normalization
// statistics are reduced in canonical slot order.
double train_step(grounder::Model& model, TrainState& state, const std::vector<Example>& batch,
                  const TrainConfig& cfg);

// In-memory corpus view used by fit() and evaluation.
struct CorpusView {
  const std::vector<phantom::Sample>* samples = nullptr;
  const std::vector<reportlang::ReportDoc>* docs = nullptr;
  std::vector<int64_t> train_indices, val_indices, test_indices;
  uint64_t fingerprint = 0;
};

struct FitResult {
  int64_t steps_run = 0;
  double final_loss = 0.0;
  double best_val_accuracy = -1.0;
};

// Runs the loop, writes log.csv plus ckpt_last / ckpt_best into run_dir,
// resumes from ckpt_last when resume is set.
FitResult fit(grounder::Model& model, const CorpusView& corpus, const TrainConfig& cfg,
              const std::string& run_dir, const checkpoint::Meta& meta, bool resume = false);

// Grounding metrics of `model` over the given corpus indices.
std::vector<evalkit::MetricsRecord> evaluate_split(const grounder::Model& model,
                                                   const CorpusView& corpus,
                                                   const std::vector<int64_t>& indices,
                                                   int threads);

}  // namespace vg::trainer
