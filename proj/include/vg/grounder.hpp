#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vg/structuring.hpp"
#include "vg/tensor.hpp"
#include "vg/volume.hpp"

// The grounding model: a VGG-style 3D encoder over stacked CT + organ
// label channels producing a visual feature grid V, a character text
// encoder, an anomaly-wise feature aggregator that turns one character
// mask into a single query embedding L, and a source-target attention
// head M = sigmoid(L W_Q (V W_K)^T).

namespace vg::grounder {

struct GrounderConfig {
  int d = 32;   // embedding width (= last stage channels)
  int dn = 32;  // attention width
  // (conv_count, out_channels) per stage; one 2x2x2 max-pool after each
  std::vector<std::pair<int, int>> conv_stages = {{3, 6}, {3, 12}, {3, 32}};
  int class_count = 9;
  int organ_vocab = 9;  // organ count + 1 for "unspecified"
  int max_text_len = 4096;
  bool use_anatomy_channel = true;
  bool use_afa = true;

  int conv_layers() const;
  int pool_layers() const { return static_cast<int>(conv_stages.size()); }
  int64_t downsample_factor() const { return int64_t{1} << conv_stages.size(); }
  void validate() const;
  std::string canonical() const;
  uint64_t fingerprint() const;  // config + character vocabulary
};

// Fidelity preset mirroring the full-depth encoder (15 conv / 3 pool).
GrounderConfig paper_depth_config();

// Characters the text encoder can embed; byte i of the returned string
// is vocab row i+1, row 0 is reserved for unknown characters.
const std::string& char_vocab();

struct ForwardCtx {
  bool training = false;
  double r_max = 1.0, d_max = 0.0;
  // per-norm-layer observed batch statistics (filled in training mode so
  // the caller can fold them into the running averages once per step)
  std::vector<std::pair<std::string, tc::ChannelStats>>* observed_stats = nullptr;
  int64_t unknown_chars = 0;
};

struct ForwardOut {
  tc::Tensor m;  // {dz, dy, dx}, every value strictly in (0, 1)
  int64_t orig_d = 0, orig_h = 0, orig_w = 0;
  int64_t pad_d = 0, pad_h = 0, pad_w = 0;  // after pad-to-multiple-of-factor
  int64_t factor = 8;
  bool padded = false;
};

class Model {
 public:
  Model(GrounderConfig cfg, uint64_t init_seed, tc::Dtype dtype = tc::Dtype::f32);

  const GrounderConfig& config() const { return cfg_; }
  tc::Dtype dtype() const { return dtype_; }

  std::vector<std::pair<std::string, tc::Tensor>>& params() { return params_; }
  const std::vector<std::pair<std::string, tc::Tensor>>& params() const { return params_; }
  std::vector<std::pair<std::string, tc::Tensor>>& buffers() { return buffers_; }
  const std::vector<std::pair<std::string, tc::Tensor>>& buffers() const { return buffers_; }
  tc::Tensor param(const std::string& name) const;
  tc::Tensor buffer(const std::string& name) const;
  void zero_grads();

  // Deep copy with freshly allocated tensors (for data-parallel workers).
  Model clone() const;

  // Stacks CT and normalized labels into the 2-channel input, zeroing the
  // label channel when the anatomy ablation is off, and zero-pads up to a
  // multiple of the downsample factor.
  tc::Tensor input_tensor(const vol::FloatVolume& ct, const vol::FloatVolume& labels_norm,
                          ForwardOut& meta) const;

  tc::Tensor encode_image(const tc::Tensor& input, ForwardCtx& ctx) const;  // -> {d, dz, dy, dx}

  // -> {N_C, d}; unknown characters map to the reserved row and are
  // counted in ctx.unknown_chars.
  tc::Tensor encode_text(const std::string& text, ForwardCtx& ctx) const;

  // AFA (Eqs. 4-5): gather rows of r per mask class, interleave with the
  // organ and class-label embeddings, and run the LSTM; the final hidden
  // state is the anomaly embedding. When use_afa is off this is an LSTM
  // over all rows of r with no organ/class tokens.
  tc::Tensor aggregate(const tc::Tensor& r, const std::vector<uint8_t>& mask, int organ_class,
                       int64_t* seq_len = nullptr) const;

  // Source-target attention; no 1/sqrt(dn) scaling.
  tc::Tensor ground(const tc::Tensor& l, const tc::Tensor& v) const;  // -> {dz, dy, dx}

  ForwardOut forward(const vol::FloatVolume& ct, const vol::FloatVolume& labels_norm,
                     const std::string& text, const std::vector<uint8_t>& mask, int organ_class,
                     ForwardCtx& ctx) const;

 private:
  Model() = default;
  void add_param(const std::string& name, tc::Tensor t);
  void add_buffer(const std::string& name, tc::Tensor t);

  GrounderConfig cfg_;
  tc::Dtype dtype_ = tc::Dtype::f32;
  std::vector<std::pair<std::string, tc::Tensor>> params_;
  std::vector<std::pair<std::string, tc::Tensor>> buffers_;
};

// Encoder-resolution mask to full resolution by trilinear interpolation;
// factor 1 is the identity.
vol::FloatVolume upsample_mask(const vol::FloatVolume& m, int64_t factor);

// Full-resolution prediction for one query: upsample the attention grid
// and crop away the padding.
vol::FloatVolume predicted_mask_volume(const ForwardOut& out);

vol::FloatVolume tensor_to_volume(const tc::Tensor& t);

}  // namespace vg::grounder
