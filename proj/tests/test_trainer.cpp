#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "fd_check.hpp"
#include "vg/checkpoint.hpp"
#include "vg/corpus.hpp"
#include "vg/structuring.hpp"
#include "vg/trainer.hpp"

using namespace vg;
using namespace vg::trainer;
using tc::Dtype;
using tc::Tensor;

namespace {

grounder::GrounderConfig tiny_gcfg() {
  grounder::GrounderConfig cfg;
  cfg.d = 4;
  cfg.dn = 3;
  cfg.conv_stages = {{1, 2}, {1, 3}, {1, 4}};
  cfg.organ_vocab = 9;
  cfg.max_text_len = 1024;
  return cfg;
}

phantom::PhantomSpec tiny_pspec() {
  phantom::PhantomSpec spec;
  spec.grid_d = spec.grid_h = spec.grid_w = 16;
  spec.radius_scale = 0.7;
  return spec;
}

struct MiniCorpus {
  std::vector<phantom::Sample> samples;
  std::vector<reportlang::ReportDoc> docs;
  CorpusView view;

  explicit MiniCorpus(int64_t n, uint64_t seed = 5) {
    phantom::PhantomSpec spec = tiny_pspec();
    for (int64_t i = 0; i < n; ++i) {
      const uint64_t s = hash_key(seed, static_cast<uint64_t>(i));
      samples.push_back(phantom::make_sample(spec, s));
      docs.push_back(reportlang::generate_report(samples.back(), {}, s, i));
    }
    view.samples = &samples;
    view.docs = &docs;
    for (int64_t i = 0; i < n; ++i) {
      if (i + 2 < n) view.train_indices.push_back(i);
      else if (i + 1 < n) view.val_indices.push_back(i);
      else view.test_indices.push_back(i);
    }
    view.fingerprint = 0xabc;
  }
};

bool file_bytes_equal(const std::string& a, const std::string& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  REQUIRE(fa.good());
  REQUIRE(fb.good());
  std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  return sa == sb;
}

}  // namespace

TEST_CASE("dice loss hand cases") {
  const int64_t n = 5 * 5 * 5;  // 125 positive voxels
  Tensor ones = Tensor::constant({5, 5, 5}, 1.0, Dtype::f64);
  CHECK(dice_loss(ones, ones).item() < 0.01);

  Tensor a = Tensor::zeros({5, 5, 5}, Dtype::f64);
  Tensor b = Tensor::zeros({5, 5, 5}, Dtype::f64);
  for (int64_t i = 0; i < n / 2; ++i) a.set(i, 1.0);
  for (int64_t i = n / 2; i < n; ++i) b.set(i, 1.0);
  CHECK(dice_loss(a, b).item() > 0.99);

  // pred = 0.5 everywhere, gt = half the voxels
  Tensor half = Tensor::constant({4, 4, 4}, 0.5, Dtype::f64);
  Tensor gt = Tensor::zeros({4, 4, 4}, Dtype::f64);
  for (int64_t i = 0; i < 32; ++i) gt.set(i, 1.0);
  const double nn = 64.0, eps = 1.0;
  const double expected = 1.0 - (0.5 * nn + eps) / (0.75 * nn + eps);
  CHECK(dice_loss(half, gt).item() == doctest::Approx(expected).epsilon(1e-12));

  Tensor bad = Tensor::zeros({2, 2, 2}, Dtype::f64);
  CHECK_THROWS_AS(dice_loss(ones, bad), ContractError);
}

TEST_CASE("dice loss range and binary symmetry") {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor p = Tensor::zeros({4, 4, 4}, Dtype::f64);
    Tensor g = Tensor::zeros({4, 4, 4}, Dtype::f64);
    for (int64_t i = 0; i < 64; ++i) {
      p.set(i, rng.bernoulli(0.4) ? 1.0 : 0.0);
      g.set(i, rng.bernoulli(0.4) ? 1.0 : 0.0);
    }
    const double l1 = dice_loss(p, g).item();
    const double l2 = dice_loss(g, p).item();
    CHECK(l1 == doctest::Approx(l2).epsilon(1e-14));
    CHECK(l1 >= 0.0);
    CHECK(l1 < 1.0 + 1e-9);
  }
}

TEST_CASE("dice loss gradient vs finite differences") {
  Rng rng(10);
  Tensor pred = Tensor::zeros({4, 4, 4}, Dtype::f64).requires_grad(true);
  Tensor gt = Tensor::zeros({4, 4, 4}, Dtype::f64);
  for (int64_t i = 0; i < 64; ++i) {
    pred.set(i, rng.uniform(0.05, 0.95));
    gt.set(i, rng.bernoulli(0.3) ? 1.0 : 0.0);
  }
  auto res = fd::check({pred}, [&] { return dice_loss(pred, gt); });
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("learning rate schedule") {
  TrainConfig cfg;
  cfg.initial_lr = 1e-5;
  cfg.base_lr = 1e-4;
  cfg.warmup_steps = 100;
  cfg.decay_every = 200;
  cfg.decay_factor = 0.1;
  cfg.max_steps = 1000;
  CHECK(lr_at(0, cfg) == doctest::Approx(1e-5));
  CHECK(lr_at(100, cfg) == 1e-4);  // ramp endpoint, exact
  CHECK(lr_at(500, cfg) == doctest::Approx(1e-4 * 0.01));

  double prev = 0.0;
  for (int64_t s = 0; s <= 100; ++s) {
    CHECK(lr_at(s, cfg) >= prev - 1e-18);
    prev = lr_at(s, cfg);
  }
  for (int64_t s = 100; s < 1000; ++s) {
    CHECK(lr_at(s, cfg) <= prev + 1e-18);
    prev = lr_at(s, cfg);
  }
}

TEST_CASE("augment: all toggles off is the identity") {
  phantom::Sample sample = phantom::make_sample(tiny_pspec(), 3);
  AugmentToggles off{};
  off.image_crop = off.image_rotate = off.image_scale = false;
  off.image_sharpen = off.image_smooth = off.image_noise = false;
  phantom::Sample out = augment_image(sample, off, 99);
  CHECK(out.ct.data == sample.ct.data);
  CHECK(out.labels.data == sample.labels.data);
  REQUIRE(out.anomalies.size() == sample.anomalies.size());
  for (size_t i = 0; i < out.anomalies.size(); ++i)
    CHECK(out.anomalies[i].mask.data == sample.anomalies[i].mask.data);
}

TEST_CASE("augment: right-angle rotation permutes the lattice") {
  phantom::Sample sample = phantom::make_sample(tiny_pspec(), 4);
  AugmentToggles rot{};
  rot.image_crop = rot.image_scale = false;
  rot.image_sharpen = rot.image_smooth = rot.image_noise = false;
  rot.image_rotate = true;
  bool exercised = false;
  for (uint64_t seed = 0; seed < 20 && !exercised; ++seed) {
    phantom::Sample out = augment_image(sample, rot, seed);
    if (out.ct.data == sample.ct.data) continue;
    exercised = true;
    // permutation: sorted voxel values identical
    auto a = sample.ct.data, b = out.ct.data;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
    for (size_t i = 0; i < out.anomalies.size(); ++i)
      CHECK(vol::mask_count(out.anomalies[i].mask) == vol::mask_count(sample.anomalies[i].mask));
  }
  CHECK(exercised);
}

TEST_CASE("augment: anomaly-in-organ invariant survives 500 augmented samples") {
  AugmentToggles all{};
  int64_t checked = 0;
  for (uint64_t seed = 0; seed < 500; ++seed) {
    phantom::Sample sample = phantom::make_sample(tiny_pspec(), seed);
    phantom::Sample out = augment_image(sample, all, hash_key(seed, 1));
    REQUIRE(out.anomalies.size() == sample.anomalies.size());
    for (const auto& a : out.anomalies) {
      const int64_t total = vol::mask_count(a.mask);
      REQUIRE(total > 0);  // crop never cuts an anomaly
      int64_t inside = 0;
      for (int64_t i = 0; i < a.mask.numel(); ++i)
        if (a.mask.data[static_cast<size_t>(i)] &&
            out.labels.data[static_cast<size_t>(i)] == a.organ_id)
          ++inside;
      CHECK(inside * 2 >= total);
      ++checked;
    }
  }
  CHECK(checked > 400);
}

TEST_CASE("train_step: deterministic, thread-count invariant, zero lr freezes params") {
  MiniCorpus corpus(4);
  grounder::GrounderConfig gcfg = tiny_gcfg();
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.warmup_steps = 2;
  cfg.max_steps = 10;
  cfg.val_every = 0;
  cfg.threads = 1;

  std::vector<Example> batch;
  for (int slot = 0; slot < 2; ++slot) {
    const auto& s = corpus.samples[static_cast<size_t>(slot)];
    batch.push_back(make_example(s, corpus.docs[static_cast<size_t>(slot)],
                                 s.anomalies.front().id, gcfg, &cfg.augment,
                                 hash_key(7, static_cast<uint64_t>(slot))));
  }

  auto run = [&](int threads) {
    grounder::Model model(gcfg, 11);
    TrainState state = TrainState::fresh(model);
    TrainConfig c = cfg;
    c.threads = threads;
    const double loss = train_step(model, state, batch, c);
    return std::make_pair(loss, model.params()[0].second.values());
  };
  auto [l1, p1] = run(1);
  auto [l2, p2] = run(2);
  CHECK(l1 == l2);
  CHECK(p1 == p2);  // bit-identical regardless of worker count

  grounder::Model frozen(gcfg, 11);
  TrainState state = TrainState::fresh(frozen);
  std::vector<std::vector<double>> before;
  for (const auto& [n, t] : frozen.params()) before.push_back(t.values());
  TrainConfig zero = cfg;
  zero.base_lr = 0.0;
  zero.initial_lr = 0.0;
  train_step(frozen, state, batch, zero);
  size_t i = 0;
  for (const auto& [n, t] : frozen.params()) CHECK(t.values() == before[i++]);
}

TEST_CASE("overfit sanity: loss decreases on a repeated batch") {
  MiniCorpus corpus(2);
  grounder::GrounderConfig gcfg = tiny_gcfg();
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.warmup_steps = 20;
  cfg.max_steps = 200;
  cfg.decay_every = 1000;
  cfg.threads = 2;

  std::vector<Example> batch;
  for (int64_t i = 0; i < 2; ++i) {
    const auto& s = corpus.samples[static_cast<size_t>(i)];
    batch.push_back(make_example(s, corpus.docs[static_cast<size_t>(i)],
                                 s.anomalies.front().id, gcfg, nullptr, 0));
  }
  grounder::Model model(gcfg, 21);
  TrainState state = TrainState::fresh(model);
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 150; ++step) {
    const double loss = train_step(model, state, batch, cfg);
    if (step == 0) first = loss;
    last = loss;
  }
  MESSAGE("overfit: first ", first, " last ", last);
  CHECK(last < first);
  CHECK(last < 0.6);
}

TEST_CASE("checkpoint round trip is bit-exact and forward-identical") {
  const std::string dir = "/tmp/vg_test_ckpt";
  std::filesystem::create_directories(dir);
  grounder::GrounderConfig gcfg = tiny_gcfg();
  grounder::Model model(gcfg, 31);
  checkpoint::Meta meta;
  meta.config_fingerprint = gcfg.fingerprint();
  meta.class_order_fingerprint = structuring::class_order_fingerprint();
  meta.corpus_fingerprint = 0x1234;

  const std::string p1 = dir + "/a.vgc";
  const std::string p2 = dir + "/b.vgc";
  checkpoint::save(p1, model, meta);
  grounder::Model loaded = checkpoint::load(p1);
  checkpoint::save(p2, loaded, meta);
  CHECK(file_bytes_equal(p1, p2));

  // forward after round trip is bit-identical
  MiniCorpus corpus(1);
  Example ex = make_example(corpus.samples[0], corpus.docs[0],
                            corpus.samples[0].anomalies.front().id, gcfg, nullptr, 0);
  grounder::ForwardCtx ctx;
  auto a = model.forward(ex.ct, ex.labels_norm, ex.text, ex.char_mask, ex.organ_class, ctx);
  auto b = loaded.forward(ex.ct, ex.labels_norm, ex.text, ex.char_mask, ex.organ_class, ctx);
  for (int64_t i = 0; i < a.m.numel(); ++i) REQUIRE(a.m.get(i) == b.m.get(i));

  // fingerprint mismatch refusal
  checkpoint::Meta wrong = meta;
  wrong.corpus_fingerprint = 0x9999;
  CHECK_THROWS_AS(checkpoint::load(p1, nullptr, nullptr, wrong), DataError);
}

TEST_CASE("fit: zero steps writes the initial checkpoint and an empty log") {
  const std::string dir = "/tmp/vg_test_fit0";
  std::filesystem::remove_all(dir);
  MiniCorpus corpus(4);
  grounder::GrounderConfig gcfg = tiny_gcfg();
  grounder::Model model(gcfg, 41);
  TrainConfig cfg;
  cfg.max_steps = 0;
  cfg.threads = 2;
  checkpoint::Meta meta;
  meta.config_fingerprint = gcfg.fingerprint();
  meta.class_order_fingerprint = structuring::class_order_fingerprint();
  FitResult res = fit(model, corpus.view, cfg, dir, meta);
  CHECK(res.steps_run == 0);
  CHECK(std::filesystem::exists(dir + "/ckpt_last.vgc"));
  std::ifstream log(dir + "/log.csv");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 1);  // header only
}

TEST_CASE("fit: resumed run equals the unbroken run byte for byte") {
  MiniCorpus corpus(5);
  grounder::GrounderConfig gcfg = tiny_gcfg();
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.warmup_steps = 2;
  cfg.max_steps = 8;
  cfg.val_every = 4;
  cfg.threads = 2;
  checkpoint::Meta meta;
  meta.config_fingerprint = gcfg.fingerprint();
  meta.class_order_fingerprint = structuring::class_order_fingerprint();
  meta.corpus_fingerprint = corpus.view.fingerprint;

  const std::string da = "/tmp/vg_fit_unbroken";
  const std::string db = "/tmp/vg_fit_resumed";
  std::filesystem::remove_all(da);
  std::filesystem::remove_all(db);

  grounder::Model ma(gcfg, 51);
  fit(ma, corpus.view, cfg, da, meta);

  grounder::Model mb(gcfg, 51);
  TrainConfig half = cfg;
  half.max_steps = 4;
  fit(mb, corpus.view, half, db, meta);
  grounder::Model mc(gcfg, 51);
  fit(mc, corpus.view, cfg, db, meta, /*resume=*/true);

  CHECK(file_bytes_equal(da + "/ckpt_last.vgc", db + "/ckpt_last.vgc"));
  CHECK(file_bytes_equal(da + "/log.csv", db + "/log.csv"));
}
