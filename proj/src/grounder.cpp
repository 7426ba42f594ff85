#include "vg/grounder.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "vg/rng.hpp"

namespace vg::grounder {

using tc::Dtype;
using tc::Tensor;

int GrounderConfig::conv_layers() const {
  int n = 0;
  for (const auto& [count, ch] : conv_stages) n += count;
  return n;
}

void GrounderConfig::validate() const {
  check_config(d > 0 && d % 2 == 0, "grounder.d must be positive and even");
  check_config(dn > 0, "grounder.dn must be positive");
  check_config(!conv_stages.empty(), "encoder needs at least one stage");
  for (const auto& [count, ch] : conv_stages)
    check_config(count > 0 && ch > 0, "conv stage counts and channels must be positive");
  check_config(conv_stages.back().second == d,
               "last stage channels must equal d (the feature width)");
  check_config(class_count == reportlang::kPhraseClassCount, "class_count is fixed at 9");
  check_config(organ_vocab >= 1, "organ_vocab must be >= 1");
  check_config(max_text_len >= 1, "max_text_len must be >= 1");
}

std::string GrounderConfig::canonical() const {
  std::string s = "d=" + std::to_string(d) + ";dn=" + std::to_string(dn) + ";stages=";
  for (size_t i = 0; i < conv_stages.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(conv_stages[i].first) + "x" + std::to_string(conv_stages[i].second);
  }
  s += ";classes=" + std::to_string(class_count);
  s += ";organ_vocab=" + std::to_string(organ_vocab);
  s += ";max_text_len=" + std::to_string(max_text_len);
  s += ";anatomy=" + std::to_string(use_anatomy_channel);
  s += ";afa=" + std::to_string(use_afa);
  return s;
}

uint64_t GrounderConfig::fingerprint() const {
  uint64_t h = 0x47524e44;
  for (char c : canonical()) h = hash_combine(h, static_cast<uint64_t>(c));
  for (char c : char_vocab()) h = hash_combine(h, static_cast<uint64_t>(c));
  return h;
}

GrounderConfig paper_depth_config() {
  GrounderConfig cfg;
  cfg.conv_stages = {{5, 8}, {5, 16}, {5, 32}};
  return cfg;
}

const std::string& char_vocab() {
  static const std::string vocab = [] {
    std::string v = " .,-";
    for (char c = '0'; c <= '9'; ++c) v += c;
    for (char c = 'a'; c <= 'z'; ++c) v += c;
    for (char c = 'A'; c <= 'Z'; ++c) v += c;
    return v;
  }();
  return vocab;
}

namespace {

int64_t char_id(char c) {
  const std::string& v = char_vocab();
  const size_t pos = v.find(c);
  return pos == std::string::npos ? 0 : static_cast<int64_t>(pos) + 1;
}

uint64_t name_key(uint64_t seed, const std::string& name) {
  uint64_t h = seed;
  for (char c : name) h = hash_combine(h, static_cast<uint64_t>(c));
  return h;
}

}  // namespace

void Model::add_param(const std::string& name, Tensor t) {
  t.requires_grad(true);
  params_.emplace_back(name, std::move(t));
}

void Model::add_buffer(const std::string& name, Tensor t) { buffers_.emplace_back(name, std::move(t)); }

Tensor Model::param(const std::string& name) const {
  for (const auto& [n, t] : params_)
    if (n == name) return t;
  throw ContractError("no such parameter: " + name);
}

Tensor Model::buffer(const std::string& name) const {
  for (const auto& [n, t] : buffers_)
    if (n == name) return t;
  throw ContractError("no such buffer: " + name);
}

void Model::zero_grads() {
  for (auto& [n, t] : params_) t.zero_grad();
}

Model Model::clone() const {
  Model m;
  m.cfg_ = cfg_;
  m.dtype_ = dtype_;
  for (const auto& [n, t] : params_) {
    Tensor c = t.clone();
    c.requires_grad(true);
    m.params_.emplace_back(n, std::move(c));
  }
  for (const auto& [n, t] : buffers_) m.buffers_.emplace_back(n, t.clone());
  return m;
}

Model::Model(GrounderConfig cfg, uint64_t init_seed, Dtype dtype) : cfg_(std::move(cfg)), dtype_(dtype) {
  cfg_.validate();
  auto randn = [&](const std::string& name, tc::Shape shape, double stddev) {
    Rng rng(name_key(init_seed, name));
    return Tensor::randn(std::move(shape), rng, stddev, dtype_);
  };

  int in_ch = 2;
  int conv = 0;
  for (const auto& [count, ch] : cfg_.conv_stages) {
    for (int i = 0; i < count; ++i, ++conv) {
      const std::string id = std::to_string(conv);
      add_param("conv" + id + ".kernel",
                randn("conv" + id + ".kernel", {ch, in_ch, 3, 3, 3},
                      std::sqrt(2.0 / (in_ch * 27.0))));
      add_param("norm" + id + ".gamma", Tensor::constant({ch}, 1.0, dtype_));
      add_param("norm" + id + ".beta", Tensor::zeros({ch}, dtype_));
      add_buffer("norm" + id + ".mean", Tensor::zeros({ch}, dtype_));
      add_buffer("norm" + id + ".var", Tensor::constant({ch}, 1.0, dtype_));
      in_ch = ch;
    }
  }

  const int64_t vocab = static_cast<int64_t>(char_vocab().size()) + 1;  // + UNK row
  const int64_t d = cfg_.d, half = cfg_.d / 2;
  add_param("text.char_table", randn("text.char_table", {vocab, d}, 0.1));
  add_param("text.pos_table", randn("text.pos_table", {cfg_.max_text_len, d}, 0.1));
  for (const char* dir : {"fwd", "bwd"}) {
    const std::string p = std::string("text.") + dir;
    add_param(p + ".w_x", randn(p + ".w_x", {d, 4 * half}, std::sqrt(1.0 / d)));
    add_param(p + ".w_h", randn(p + ".w_h", {half, 4 * half}, std::sqrt(1.0 / half)));
    Tensor b = Tensor::zeros({4 * half}, dtype_);
    for (int64_t i = half; i < 2 * half; ++i) b.set(i, 1.0);  // forget-gate bias
    add_param(p + ".b", std::move(b));
  }

  add_param("afa.organ_table", randn("afa.organ_table", {cfg_.organ_vocab, d}, 0.1));
  add_param("afa.class_table", randn("afa.class_table", {cfg_.class_count, d}, 0.1));
  add_param("afa.lstm.w_x", randn("afa.lstm.w_x", {d, 4 * d}, std::sqrt(1.0 / d)));
  add_param("afa.lstm.w_h", randn("afa.lstm.w_h", {d, 4 * d}, std::sqrt(1.0 / d)));
  Tensor ab = Tensor::zeros({4 * d}, dtype_);
  for (int64_t i = d; i < 2 * d; ++i) ab.set(i, 1.0);
  add_param("afa.lstm.b", std::move(ab));

  add_param("attn.w_q", randn("attn.w_q", {d, cfg_.dn}, std::sqrt(1.0 / d)));
  add_param("attn.w_k", randn("attn.w_k", {d, cfg_.dn}, std::sqrt(1.0 / d)));
}

Tensor Model::input_tensor(const vol::FloatVolume& ct, const vol::FloatVolume& labels_norm,
                           ForwardOut& meta) const {
  check(ct.same_extents(labels_norm), "encode_image: ct and label extents differ");
  const int64_t f = cfg_.downsample_factor();
  meta.orig_d = ct.d;
  meta.orig_h = ct.h;
  meta.orig_w = ct.w;
  meta.pad_d = (ct.d + f - 1) / f * f;
  meta.pad_h = (ct.h + f - 1) / f * f;
  meta.pad_w = (ct.w + f - 1) / f * f;
  meta.factor = f;
  meta.padded = meta.pad_d != ct.d || meta.pad_h != ct.h || meta.pad_w != ct.w;

  Tensor x = Tensor::zeros({2, meta.pad_d, meta.pad_h, meta.pad_w}, dtype_);
  const int64_t vol = meta.pad_d * meta.pad_h * meta.pad_w;
  for (int64_t z = 0; z < ct.d; ++z)
    for (int64_t y = 0; y < ct.h; ++y)
      for (int64_t x0 = 0; x0 < ct.w; ++x0) {
        const int64_t i = (z * meta.pad_h + y) * meta.pad_w + x0;
        x.set(i, ct.at(z, y, x0));
        if (cfg_.use_anatomy_channel) x.set(vol + i, labels_norm.at(z, y, x0));
      }
  return x;
}

Tensor Model::encode_image(const Tensor& input, ForwardCtx& ctx) const {
  Tensor h = input;
  int conv = 0;
  for (const auto& [count, ch] : cfg_.conv_stages) {
    for (int i = 0; i < count; ++i, ++conv) {
      const std::string id = std::to_string(conv);
      h = tc::conv3d(h, param("conv" + id + ".kernel"));
      tc::ChannelStats stats;
      tc::RenormOpts opts;
      opts.training = ctx.training;
      opts.r_max = ctx.r_max;
      opts.d_max = ctx.d_max;
      h = tc::batch_renorm(h, param("norm" + id + ".gamma"), param("norm" + id + ".beta"),
                           buffer("norm" + id + ".mean"), buffer("norm" + id + ".var"), opts,
                           ctx.training ? &stats : nullptr);
      if (ctx.training && ctx.observed_stats)
        ctx.observed_stats->emplace_back("norm" + id, std::move(stats));
      h = tc::relu(h);
    }
    h = tc::maxpool3d(h);
  }
  return h;
}

Tensor Model::encode_text(const std::string& text, ForwardCtx& ctx) const {
  const int64_t n = static_cast<int64_t>(text.size());
  check_data(n <= cfg_.max_text_len,
             "text length " + std::to_string(n) + " exceeds max_text_len " +
                 std::to_string(cfg_.max_text_len));
  if (n == 0) return Tensor::zeros({0, cfg_.d}, dtype_);
  std::vector<int64_t> ids(static_cast<size_t>(n));
  std::vector<int64_t> pos(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    ids[static_cast<size_t>(i)] = char_id(text[static_cast<size_t>(i)]);
    if (ids[static_cast<size_t>(i)] == 0) ++ctx.unknown_chars;
    pos[static_cast<size_t>(i)] = i;
  }
  Tensor base = tc::add(tc::take_rows(param("text.char_table"), ids),
                        tc::take_rows(param("text.pos_table"), pos));

  tc::LstmWeights fwd{param("text.fwd.w_x"), param("text.fwd.w_h"), param("text.fwd.b")};
  tc::LstmWeights bwd{param("text.bwd.w_x"), param("text.bwd.w_h"), param("text.bwd.b")};
  Tensor hf = tc::lstm_sequence(base, fwd);
  std::vector<int64_t> rev(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) rev[static_cast<size_t>(i)] = n - 1 - i;
  Tensor hb_rev = tc::lstm_sequence(tc::take_rows(base, rev), bwd);
  Tensor hb = tc::take_rows(hb_rev, rev);
  return tc::concat_cols(hf, hb);
}

Tensor Model::aggregate(const Tensor& r, const std::vector<uint8_t>& mask, int organ_class,
                        int64_t* seq_len) const {
  check(r.ndim() == 2 && r.dim(1) == cfg_.d, "aggregate: r must be {N, d}");
  tc::LstmWeights lstm{param("afa.lstm.w_x"), param("afa.lstm.w_h"), param("afa.lstm.b")};

  Tensor seq;
  if (cfg_.use_afa) {
    check(static_cast<int64_t>(mask.size()) == r.dim(0),
          "aggregate: mask length " + std::to_string(mask.size()) + " != rows of r " +
              std::to_string(r.dim(0)));
    check(organ_class >= 0 && organ_class < cfg_.organ_vocab, "aggregate: organ class out of range");
    std::vector<Tensor> parts;
    parts.push_back(tc::take_rows(param("afa.organ_table"),
                                  std::array<int64_t, 1>{organ_class}));
    for (int k = 1; k <= cfg_.class_count; ++k) {
      parts.push_back(tc::take_rows(param("afa.class_table"), std::array<int64_t, 1>{k - 1}));
      std::vector<int64_t> idx;
      for (size_t j = 0; j < mask.size(); ++j)
        if (mask[j] == k) idx.push_back(static_cast<int64_t>(j));
      if (!idx.empty()) parts.push_back(tc::take_rows(r, idx));
    }
    seq = tc::concat_rows(parts);
  } else {
    seq = r;  // baseline: all characters, no organ or class tokens
  }
  if (seq_len) *seq_len = seq.dim(0);
  Tensor final_h;
  tc::lstm_sequence(seq, lstm, &final_h);
  return final_h;  // {1, d}
}

Tensor Model::ground(const Tensor& l, const Tensor& v) const {
  check(l.ndim() == 2 && l.dim(0) == 1 && l.dim(1) == cfg_.d,
        "ground: L must be {1, d}, got " + tc::shape_str(l.shape()));
  check(v.ndim() == 4 && v.dim(0) == cfg_.d,
        "ground: V must be {d, dz, dy, dx}, got " + tc::shape_str(v.shape()));
  const int64_t dz = v.dim(1), dy = v.dim(2), dx = v.dim(3);
  Tensor v_rows = tc::channels_to_rows(v);                       // {n, d}, z-major
  Tensor q = tc::matmul(l, param("attn.w_q"));                   // {1, dn}
  Tensor k = tc::matmul(v_rows, param("attn.w_k"));              // {n, dn}
  Tensor logits = tc::matmul(q, tc::transpose2d(k));             // {1, n}; no 1/sqrt(dn)
  return tc::reshape(tc::sigmoid(logits), {dz, dy, dx});
}

ForwardOut Model::forward(const vol::FloatVolume& ct, const vol::FloatVolume& labels_norm,
                          const std::string& text, const std::vector<uint8_t>& mask,
                          int organ_class, ForwardCtx& ctx) const {
  ForwardOut out;
  Tensor input = input_tensor(ct, labels_norm, out);
  Tensor v = encode_image(input, ctx);
  Tensor r = encode_text(text, ctx);
  Tensor l = aggregate(r, mask, organ_class);
  out.m = ground(l, v);
  return out;
}

vol::FloatVolume upsample_mask(const vol::FloatVolume& m, int64_t factor) {
  check(factor >= 1, "upsample_mask: factor must be >= 1");
  return vol::upsample_trilinear(m, m.d * factor, m.h * factor, m.w * factor);
}

vol::FloatVolume tensor_to_volume(const tc::Tensor& t) {
  check(t.ndim() == 3, "tensor_to_volume: expected {dz, dy, dx}");
  vol::FloatVolume v(t.dim(0), t.dim(1), t.dim(2));
  for (int64_t i = 0; i < t.numel(); ++i) v.data[static_cast<size_t>(i)] = static_cast<float>(t.get(i));
  return v;
}

vol::FloatVolume predicted_mask_volume(const ForwardOut& out) {
  vol::FloatVolume grid = tensor_to_volume(out.m);
  vol::FloatVolume up = upsample_mask(grid, out.factor);
  if (!out.padded) return up;
  vol::FloatVolume cropped(out.orig_d, out.orig_h, out.orig_w);
  for (int64_t z = 0; z < out.orig_d; ++z)
    for (int64_t y = 0; y < out.orig_h; ++y)
      for (int64_t x = 0; x < out.orig_w; ++x) cropped.at(z, y, x) = up.at(z, y, x);
  return cropped;
}

}  // namespace vg::grounder
