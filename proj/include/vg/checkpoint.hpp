#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vg/grounder.hpp"

// Versioned checkpoint container: model config, named tensors, running
// statistics, fingerprints, and (for training checkpoints) optimizer
// state. Round-trips are bit-exact.

namespace vg::checkpoint {

struct Meta {
  uint64_t config_fingerprint = 0;       // grounder config + char vocab
  uint64_t class_order_fingerprint = 0;  // structuring class indices
  uint64_t corpus_fingerprint = 0;       // corpus the model was trained on (0 = none)
};

struct TrainExtras {
  int64_t step = 0;
  uint64_t train_seed = 0;
  double best_val_accuracy = -1.0;
  int64_t best_step = -1;
  // Adam moments, aligned with Model::params() order.
  std::vector<tc::Tensor> adam_m, adam_v;
};

void save(const std::string& path, const grounder::Model& model, const Meta& meta,
          const TrainExtras* extras = nullptr);

// Loads and validates internal consistency (stored fingerprint must match
// the stored config). When `expected` is given, refuses to load a
// checkpoint whose fingerprints disagree with it.
grounder::Model load(const std::string& path, Meta* meta_out = nullptr,
                     TrainExtras* extras_out = nullptr,
                     const std::optional<Meta>& expected = std::nullopt);

}  // namespace vg::checkpoint
