#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "vg/grounder.hpp"
#include "vg/phantom.hpp"

using namespace vg;
using namespace vg::grounder;
using tc::Dtype;
using tc::Tensor;

namespace {

GrounderConfig tiny_config() {
  GrounderConfig cfg;
  cfg.d = 4;
  cfg.dn = 3;
  cfg.conv_stages = {{1, 2}, {1, 3}, {1, 4}};
  cfg.organ_vocab = 3;
  cfg.max_text_len = 64;
  return cfg;
}

vol::FloatVolume random_volume(int64_t n, uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
  vol::FloatVolume v(n, n, n);
  Rng rng(seed);
  for (auto& x : v.data) x = static_cast<float>(rng.uniform(lo, hi));
  return v;
}

}  // namespace

TEST_CASE("encode_image shape chain: 32^3 with d=32 gives 4x4x4 grid") {
  GrounderConfig cfg;  // default desk config, 9 conv / 3 pools
  CHECK(cfg.conv_layers() == 9);
  CHECK(cfg.pool_layers() == 3);
  CHECK(cfg.downsample_factor() == 8);
  Model model(cfg, 1);
  ForwardCtx ctx;
  ForwardOut meta;
  Tensor input = model.input_tensor(random_volume(32, 2), random_volume(32, 3), meta);
  CHECK(!meta.padded);
  Tensor v = model.encode_image(input, ctx);
  CHECK(v.shape() == tc::Shape{32, 4, 4, 4});
}

TEST_CASE("pad-then-crop policy for extents not divisible by 8") {
  Model model(tiny_config(), 1);
  ForwardCtx ctx;
  ForwardOut meta;
  vol::FloatVolume ct(20, 20, 20, 0.5f);
  vol::FloatVolume labels(20, 20, 20, 0.0f);
  Tensor input = model.input_tensor(ct, labels, meta);
  CHECK(meta.padded);
  CHECK(meta.pad_d == 24);
  Tensor v = model.encode_image(input, ctx);
  CHECK(v.shape() == tc::Shape{4, 3, 3, 3});

  meta.m = Tensor::constant({3, 3, 3}, 0.25, Dtype::f32);
  vol::FloatVolume full = predicted_mask_volume(meta);
  CHECK(full.d == 20);
  CHECK(full.h == 20);
  CHECK(full.w == 20);
}

TEST_CASE("zero conv weights give an identically zero feature grid") {
  Model model(tiny_config(), 1);
  for (auto& [name, t] : model.params())
    if (name.find("conv") == 0)
      for (int64_t i = 0; i < t.numel(); ++i) t.set(i, 0.0);
  ForwardCtx ctx;
  ForwardOut meta;
  Tensor input = model.input_tensor(random_volume(16, 4), random_volume(16, 5), meta);
  Tensor v = model.encode_image(input, ctx);
  // gamma*0 + beta = 0 under inference stats, relu keeps it 0
  for (int64_t i = 0; i < v.numel(); ++i) CHECK(v.get(i) == 0.0);
}

TEST_CASE("anatomy channel toggle changes the embedding") {
  GrounderConfig cfg = tiny_config();
  Model with(cfg, 7);
  cfg.use_anatomy_channel = false;
  Model without(cfg, 7);  // identical weights, different input wiring
  ForwardCtx ctx;
  ForwardOut ma, mb;
  vol::FloatVolume ct = random_volume(16, 8);
  vol::FloatVolume labels = random_volume(16, 9, 0.1f, 1.0f);
  Tensor va = with.encode_image(with.input_tensor(ct, labels, ma), ctx);
  Tensor vb = without.encode_image(without.input_tensor(ct, labels, mb), ctx);
  double linf = 0.0;
  for (int64_t i = 0; i < va.numel(); ++i)
    linf = std::max(linf, std::fabs(va.get(i) - vb.get(i)));
  CHECK(linf > 0.0);
}

TEST_CASE("encode_text shapes, positions and unknown characters") {
  Model model(tiny_config(), 3);
  ForwardCtx ctx;
  Tensor empty = model.encode_text("", ctx);
  CHECK(empty.shape() == tc::Shape{0, 4});

  Tensor r = model.encode_text("aaaaaaaaaaaaaaaaa", ctx);  // 17 identical chars
  CHECK(r.shape() == tc::Shape{17, 4});
  double linf = 0.0;
  for (int64_t j = 0; j < 4; ++j) linf = std::max(linf, std::fabs(r.get(j) - r.get(4 + j)));
  CHECK(linf > 0.0);  // positional term separates identical characters

  CHECK(ctx.unknown_chars == 0);
  model.encode_text("a#b", ctx);
  CHECK(ctx.unknown_chars == 1);
}

TEST_CASE("aggregate: sequence lengths follow Eq. 5 and empty classes depend only on tables") {
  Model model(tiny_config(), 4);
  ForwardCtx ctx;
  Tensor r1 = model.encode_text("right S1 nodule seen", ctx);
  Tensor r2 = model.encode_text("left S6 cysts noted.", ctx);  // same length, different chars
  REQUIRE(r1.dim(0) == r2.dim(0));
  std::vector<uint8_t> zero_mask(static_cast<size_t>(r1.dim(0)), 0);

  int64_t len = 0;
  Tensor l1 = model.aggregate(r1, zero_mask, 1, &len);
  CHECK(len == 10);  // v_organ + 9 class tokens, no gathered characters
  Tensor l2 = model.aggregate(r2, zero_mask, 1);
  for (int64_t i = 0; i < l1.numel(); ++i) CHECK(l1.get(i) == l2.get(i));  // bit-identical

  std::vector<uint8_t> mask3 = zero_mask;
  mask3[2] = 2;
  mask3[5] = 2;
  mask3[9] = 2;
  model.aggregate(r1, mask3, 1, &len);
  CHECK(len == 13);  // C + 1 + 3
}

TEST_CASE("AFA locality: characters outside the mask never change L") {
  Model model(tiny_config(), 5);
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t n = 8 + rng.uniform_int(24);
    Tensor r = Tensor::randn({n, 4}, rng, 1.0, Dtype::f32);
    std::vector<uint8_t> mask(static_cast<size_t>(n), 0);
    for (int64_t i = 0; i < n; ++i)
      if (rng.bernoulli(0.3)) mask[static_cast<size_t>(i)] = static_cast<uint8_t>(1 + rng.uniform_int(9));
    Tensor l1 = model.aggregate(r, mask, 1);
    Tensor r2 = r.clone();
    for (int64_t i = 0; i < n; ++i)
      if (mask[static_cast<size_t>(i)] == 0)
        for (int64_t j = 0; j < 4; ++j) r2.set(i * 4 + j, rng.normal());
    Tensor l2 = model.aggregate(r2, mask, 1);
    for (int64_t i = 0; i < l1.numel(); ++i) REQUIRE(l1.get(i) == l2.get(i));
  }
}

TEST_CASE("ground: zero query gives the uniform half mask") {
  Model model(tiny_config(), 6);
  Tensor wq = model.param("attn.w_q");
  for (int64_t i = 0; i < wq.numel(); ++i) wq.set(i, 0.0);
  Rng rng(1);
  Tensor v = Tensor::randn({4, 2, 2, 2}, rng, 1.0, Dtype::f32);
  Tensor l = Tensor::randn({1, 4}, rng, 1.0, Dtype::f32);
  Tensor m = model.ground(l, v);
  CHECK(m.shape() == tc::Shape{2, 2, 2});
  for (int64_t i = 0; i < m.numel(); ++i) CHECK(m.get(i) == doctest::Approx(0.5));
}

TEST_CASE("ground: hand-computed 1x1x2 case") {
  GrounderConfig cfg = tiny_config();
  cfg.d = 2;
  cfg.dn = 2;
  cfg.conv_stages = {{1, 2}, {1, 2}, {1, 2}};
  Model model(cfg, 7, Dtype::f64);
  Tensor wq = model.param("attn.w_q");
  Tensor wk = model.param("attn.w_k");
  const double wq_v[4] = {0.3, -0.2, 0.5, 0.4};
  const double wk_v[4] = {-0.1, 0.6, 0.2, -0.3};
  for (int i = 0; i < 4; ++i) {
    wq.set(i, wq_v[i]);
    wk.set(i, wk_v[i]);
  }
  Tensor v = Tensor::from_values({2, 1, 1, 2}, {0.7, -0.4, 0.1, 0.9});  // {d, dz, dy, dx}
  Tensor l = Tensor::from_values({1, 2}, {0.5, -0.6});
  Tensor m = model.ground(l, v);
  REQUIRE(m.shape() == tc::Shape{1, 1, 2});

  // independent scalar evaluation of sigmoid(L W_Q (V W_K)^T)
  const double q0 = 0.5 * wq_v[0] + (-0.6) * wq_v[2];
  const double q1 = 0.5 * wq_v[1] + (-0.6) * wq_v[3];
  const double vrow[2][2] = {{0.7, 0.1}, {-0.4, 0.9}};  // voxel-major rows of V
  for (int voxel = 0; voxel < 2; ++voxel) {
    const double k0 = vrow[voxel][0] * wk_v[0] + vrow[voxel][1] * wk_v[2];
    const double k1 = vrow[voxel][0] * wk_v[1] + vrow[voxel][1] * wk_v[3];
    const double logit = q0 * k0 + q1 * k1;
    const double expected = 1.0 / (1.0 + std::exp(-logit));
    CHECK(std::fabs(m.get(voxel) - expected) < 1e-6);
  }
}

TEST_CASE("ground: M depends on L only through the W_Q projection") {
  GrounderConfig cfg = tiny_config();
  Model model(cfg, 8, Dtype::f64);
  Tensor wq = model.param("attn.w_q");
  for (int64_t j = 0; j < cfg.dn; ++j) wq.set((cfg.d - 1) * cfg.dn + j, 0.0);  // null row
  Rng rng(2);
  Tensor v = Tensor::randn({4, 2, 2, 2}, rng, 1.0, Dtype::f64);
  Tensor l1 = Tensor::randn({1, 4}, rng, 1.0, Dtype::f64);
  Tensor l2 = l1.clone();
  l2.set(3, l1.get(3) + 5.0);  // moves only along the null direction
  Tensor m1 = model.ground(l1, v);
  Tensor m2 = model.ground(l2, v);
  for (int64_t i = 0; i < m1.numel(); ++i) CHECK(m1.get(i) == doctest::Approx(m2.get(i)));
}

TEST_CASE("full forward: determinism, output range, baseline differs from AFA") {
  GrounderConfig cfg = tiny_config();
  cfg.max_text_len = 256;
  Model model(cfg, 9);
  phantom::PhantomSpec pspec;
  pspec.grid_d = pspec.grid_h = pspec.grid_w = 16;
  auto sample = phantom::make_sample(pspec, 42);
  vol::FloatVolume labels_norm = phantom::normalize_labels(sample.labels, pspec.organ_count);
  const std::string text = "In the right S1 of the liver, a 6 mm nodule is seen. Another left S6 cyst.";
  std::vector<uint8_t> mask(text.size(), 0);
  for (size_t i = 7; i < 15; ++i) mask[i] = 1;
  for (size_t i = 37; i < 43; ++i) mask[i] = 2;

  ForwardCtx ctx;
  ForwardOut a = model.forward(sample.ct, labels_norm, text, mask, 1, ctx);
  ForwardOut b = model.forward(sample.ct, labels_norm, text, mask, 1, ctx);
  for (int64_t i = 0; i < a.m.numel(); ++i) {
    REQUIRE(a.m.get(i) == b.m.get(i));  // bit-identical
    CHECK(a.m.get(i) > 0.0);
    CHECK(a.m.get(i) < 1.0);
  }

  // baseline aggregation path differs for the same inputs
  GrounderConfig base_cfg = cfg;
  base_cfg.use_afa = false;
  Model baseline(base_cfg, 9);  // same weights
  ForwardOut c = baseline.forward(sample.ct, labels_norm, text, mask, 1, ctx);
  double linf = 0.0;
  for (int64_t i = 0; i < a.m.numel(); ++i)
    linf = std::max(linf, std::fabs(a.m.get(i) - c.m.get(i)));
  CHECK(linf > 0.0);
}

TEST_CASE("full model gradient check at 8^3 in float64") {
  GrounderConfig cfg = tiny_config();
  Model model(cfg, 10, Dtype::f64);
  vol::FloatVolume ct = random_volume(8, 11);
  vol::FloatVolume labels = random_volume(8, 12, 0.0f, 1.0f);
  const std::string text = "right S1 nodule 6 mm";
  std::vector<uint8_t> mask(text.size(), 0);
  for (size_t i = 0; i < 8; ++i) mask[i] = 1;
  for (size_t i = 9; i < 15; ++i) mask[i] = 2;
  for (size_t i = 16; i < 20; ++i) mask[i] = 8;

  std::vector<Tensor> params;
  for (auto& [name, t] : model.params()) params.push_back(t);
  auto res = fd::check(params, [&] {
    ForwardCtx ctx;
    ctx.training = true;  // renorm in plain-BN regime (r_max=1, d_max=0)
    ForwardOut out = model.forward(ct, labels, text, mask, 1, ctx);
    Rng rng(13);
    Tensor proj = Tensor::randn(out.m.shape(), rng, 1.0, Dtype::f64);
    return tc::sum(tc::mul(out.m, proj));
  });
  MESSAGE("full-model fd: ", res.checked, " params, max rel err ", res.max_rel_err);
  CHECK(res.checked > 1000);
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("upsample_mask identity, constants, and block-mean round trip") {
  vol::FloatVolume m(2, 2, 2);
  for (int64_t i = 0; i < 8; ++i) m.data[static_cast<size_t>(i)] = 0.1f * static_cast<float>(i + 1);
  vol::FloatVolume same = upsample_mask(m, 1);
  CHECK(same.data == m.data);

  vol::FloatVolume c(2, 2, 2, 0.42f);
  vol::FloatVolume up = upsample_mask(c, 4);
  CHECK(up.d == 8);
  for (float v : up.data) CHECK(v == doctest::Approx(0.42f));

  // smooth input: upsample then block-mean reproduces the grid within 0.05
  vol::FloatVolume smooth(4, 4, 4);
  for (int64_t z = 0; z < 4; ++z)
    for (int64_t y = 0; y < 4; ++y)
      for (int64_t x = 0; x < 4; ++x)
        smooth.at(z, y, x) = 0.5f + 0.2f * std::sin(0.5f * static_cast<float>(z + y)) *
                                        std::cos(0.4f * static_cast<float>(x));
  vol::FloatVolume up2 = upsample_mask(smooth, 8);
  vol::FloatVolume down = vol::downsample_blockmean(up2, 8);
  double linf = 0.0;
  for (size_t i = 0; i < smooth.data.size(); ++i)
    linf = std::max(linf, std::fabs(static_cast<double>(smooth.data[i]) - down.data[i]));
  CHECK(linf < 0.05);
}
