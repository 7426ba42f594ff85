#include "vg/checkpoint.hpp"

#include "vg/binio.hpp"
#include "vg/structuring.hpp"

namespace vg::checkpoint {

namespace {

constexpr char kMagic[9] = "VGCKPT01";
constexpr uint32_t kVersion = 1;

void write_tensor(std::ostream& os, const tc::Tensor& t) {
  io::write_pod<uint8_t>(os, static_cast<uint8_t>(t.dtype()));
  io::write_pod<uint8_t>(os, static_cast<uint8_t>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) io::write_pod<uint32_t>(os, static_cast<uint32_t>(t.dim(i)));
  if (t.dtype() == tc::Dtype::f32)
    io::write_bytes(os, t.f32().data(), t.f32().size() * sizeof(float));
  else
    io::write_bytes(os, t.f64().data(), t.f64().size() * sizeof(double));
}

tc::Tensor read_tensor(std::istream& is) {
  const auto dtype = static_cast<tc::Dtype>(io::read_pod<uint8_t>(is, "tensor dtype"));
  const int ndim = io::read_pod<uint8_t>(is, "tensor rank");
  tc::Shape shape;
  for (int i = 0; i < ndim; ++i) shape.push_back(io::read_pod<uint32_t>(is, "tensor dim"));
  tc::Tensor t = tc::Tensor::zeros(shape, dtype);
  if (dtype == tc::Dtype::f32)
    io::read_bytes(is, t.f32().data(), t.f32().size() * sizeof(float), "tensor payload");
  else
    io::read_bytes(is, t.f64().data(), t.f64().size() * sizeof(double), "tensor payload");
  return t;
}

void write_config(std::ostream& os, const grounder::GrounderConfig& cfg) {
  io::write_pod<int32_t>(os, cfg.d);
  io::write_pod<int32_t>(os, cfg.dn);
  io::write_pod<uint32_t>(os, static_cast<uint32_t>(cfg.conv_stages.size()));
  for (const auto& [count, ch] : cfg.conv_stages) {
    io::write_pod<int32_t>(os, count);
    io::write_pod<int32_t>(os, ch);
  }
  io::write_pod<int32_t>(os, cfg.class_count);
  io::write_pod<int32_t>(os, cfg.organ_vocab);
  io::write_pod<int32_t>(os, cfg.max_text_len);
  io::write_pod<uint8_t>(os, cfg.use_anatomy_channel ? 1 : 0);
  io::write_pod<uint8_t>(os, cfg.use_afa ? 1 : 0);
}

grounder::GrounderConfig read_config(std::istream& is) {
  grounder::GrounderConfig cfg;
  cfg.d = io::read_pod<int32_t>(is, "config d");
  cfg.dn = io::read_pod<int32_t>(is, "config dn");
  const uint32_t stages = io::read_pod<uint32_t>(is, "config stages");
  check_data(stages < 64, "unreasonable stage count");
  cfg.conv_stages.clear();
  for (uint32_t i = 0; i < stages; ++i) {
    const int count = io::read_pod<int32_t>(is, "stage count");
    const int ch = io::read_pod<int32_t>(is, "stage channels");
    cfg.conv_stages.emplace_back(count, ch);
  }
  cfg.class_count = io::read_pod<int32_t>(is, "config classes");
  cfg.organ_vocab = io::read_pod<int32_t>(is, "config organ vocab");
  cfg.max_text_len = io::read_pod<int32_t>(is, "config max text len");
  cfg.use_anatomy_channel = io::read_pod<uint8_t>(is, "config anatomy flag") != 0;
  cfg.use_afa = io::read_pod<uint8_t>(is, "config afa flag") != 0;
  return cfg;
}

}  // namespace

void save(const std::string& path, const grounder::Model& model, const Meta& meta,
          const TrainExtras* extras) {
  auto os = io::open_write(path);
  io::write_magic(os, kMagic);
  io::write_pod<uint32_t>(os, kVersion);
  io::write_pod<uint8_t>(os, static_cast<uint8_t>(model.dtype()));
  io::write_pod<uint8_t>(os, extras ? 1 : 0);
  write_config(os, model.config());
  io::write_pod<uint64_t>(os, meta.config_fingerprint);
  io::write_pod<uint64_t>(os, meta.class_order_fingerprint);
  io::write_pod<uint64_t>(os, meta.corpus_fingerprint);

  io::write_pod<uint32_t>(os, static_cast<uint32_t>(model.params().size()));
  for (const auto& [name, t] : model.params()) {
    io::write_string(os, name);
    write_tensor(os, t);
  }
  io::write_pod<uint32_t>(os, static_cast<uint32_t>(model.buffers().size()));
  for (const auto& [name, t] : model.buffers()) {
    io::write_string(os, name);
    write_tensor(os, t);
  }

  if (extras) {
    check(extras->adam_m.size() == model.params().size() &&
              extras->adam_v.size() == model.params().size(),
          "checkpoint: optimizer state misaligned with parameters");
    io::write_pod<int64_t>(os, extras->step);
    io::write_pod<uint64_t>(os, extras->train_seed);
    io::write_pod<double>(os, extras->best_val_accuracy);
    io::write_pod<int64_t>(os, extras->best_step);
    for (const auto& t : extras->adam_m) write_tensor(os, t);
    for (const auto& t : extras->adam_v) write_tensor(os, t);
  }
  check_data(os.good(), "write failed: " + path);
}

grounder::Model load(const std::string& path, Meta* meta_out, TrainExtras* extras_out,
                     const std::optional<Meta>& expected) {
  auto is = io::open_read(path);
  io::expect_magic(is, kMagic, path);
  const uint32_t version = io::read_pod<uint32_t>(is, "version");
  check_data(version == kVersion, "unsupported checkpoint version in " + path);
  const auto dtype = static_cast<tc::Dtype>(io::read_pod<uint8_t>(is, "dtype"));
  const bool has_extras = io::read_pod<uint8_t>(is, "extras flag") != 0;
  grounder::GrounderConfig cfg = read_config(is);

  Meta meta;
  meta.config_fingerprint = io::read_pod<uint64_t>(is, "config fingerprint");
  meta.class_order_fingerprint = io::read_pod<uint64_t>(is, "class fingerprint");
  meta.corpus_fingerprint = io::read_pod<uint64_t>(is, "corpus fingerprint");
  check_data(meta.config_fingerprint == cfg.fingerprint(),
             "checkpoint fingerprint does not match its stored config: " + path);
  check_data(meta.class_order_fingerprint == structuring::class_order_fingerprint(),
             "checkpoint was written with a different phrase-class ordering: " + path);
  if (expected) {
    check_data(meta.config_fingerprint == expected->config_fingerprint,
               "checkpoint config fingerprint mismatch: " + path);
    if (expected->corpus_fingerprint)
      check_data(meta.corpus_fingerprint == expected->corpus_fingerprint,
                 "checkpoint was trained on a different corpus: " + path);
  }

  grounder::Model model(cfg, 0, dtype);
  const uint32_t nparams = io::read_pod<uint32_t>(is, "param count");
  check_data(nparams == model.params().size(), "parameter count mismatch in " + path);
  for (auto& [name, t] : model.params()) {
    const std::string got = io::read_string(is);
    check_data(got == name, "parameter order mismatch: expected " + name + ", got " + got);
    tc::Tensor loaded = read_tensor(is);
    check_data(loaded.shape() == t.shape() && loaded.dtype() == t.dtype(),
               "parameter shape mismatch for " + name);
    loaded.requires_grad(true);
    t = loaded;
  }
  const uint32_t nbufs = io::read_pod<uint32_t>(is, "buffer count");
  check_data(nbufs == model.buffers().size(), "buffer count mismatch in " + path);
  for (auto& [name, t] : model.buffers()) {
    const std::string got = io::read_string(is);
    check_data(got == name, "buffer order mismatch: expected " + name + ", got " + got);
    t = read_tensor(is);
  }

  if (extras_out) {
    check_data(has_extras, "checkpoint has no training state: " + path);
    extras_out->step = io::read_pod<int64_t>(is, "step");
    extras_out->train_seed = io::read_pod<uint64_t>(is, "train seed");
    extras_out->best_val_accuracy = io::read_pod<double>(is, "best val");
    extras_out->best_step = io::read_pod<int64_t>(is, "best step");
    extras_out->adam_m.clear();
    extras_out->adam_v.clear();
    for (size_t i = 0; i < model.params().size(); ++i) extras_out->adam_m.push_back(read_tensor(is));
    for (size_t i = 0; i < model.params().size(); ++i) extras_out->adam_v.push_back(read_tensor(is));
  }
  if (meta_out) *meta_out = meta;
  return model;
}

}  // namespace vg::checkpoint
