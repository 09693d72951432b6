#include <catch2/catch_amalgamated.hpp>

#include "fose/diffusion/schedule.hpp"
#include "fose/nn/denoiser.hpp"
#include "fose/nn/optimizer.hpp"
#include "oracles.hpp"

using namespace fose;
using namespace fose::nn;

TEST_CASE("time embedding: sinusoid pattern, determinism, length", "[denoiser]") {
  Tensor e0 = sinusoidal_embedding(0, 16);
  for (int k = 0; k < 8; ++k) {
    CHECK(e0[k] == 0.0);       // sin(0)
    CHECK(e0[8 + k] == 1.0);   // cos(0)
  }
  Rng rng(1);
  TimeEmbedding te(16, 32, rng);
  Var a = te.forward({123});
  Var b = te.forward({123});
  CHECK(a.shape() == Shape{1, 32});
  CHECK(t_max_abs_diff(a.value(), b.value()) == 0.0);
}

TEST_CASE("fmim: constant kill, full mask, checkerboard passthrough", "[denoiser]") {
  Tensor cst({1, 2, 8, 8}, 0.73);
  Tensor out = fmim_highpass_plain(cst, 0.25);
  CHECK(t_max_abs_diff(out, Tensor({1, 2, 8, 8})) < 1e-5);

  Rng rng(2);
  Tensor x = rng.rand_uniform({1, 1, 8, 8}, -1.0, 1.0);
  Tensor all_masked = fmim_highpass_plain(x, 0.999);
  CHECK(t_mean_abs(all_masked) < 1e-10);

  // pure highest-frequency checkerboard lives outside the low-frequency box
  Tensor cb({1, 1, 16, 16});
  for (int y = 0; y < 16; ++y)
    for (int xx = 0; xx < 16; ++xx) cb.at(0, 0, y, xx) = ((y + xx) % 2 == 0) ? 1.0 : -1.0;
  Tensor kept = fmim_highpass_plain(cb, 0.25);
  CHECK(t_max_abs_diff(kept, cb) < 1e-5);

  // zero spatial mean per channel
  Tensor r = rng.rand_uniform({2, 3, 12, 12}, 0.0, 1.0);
  Tensor hp = fmim_highpass_plain(r, 0.25);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      double m = 0.0;
      for (int i = 0; i < 144; ++i) m += hp.data()[((int64_t)n * 3 + c) * 144 + i];
      CHECK(std::abs(m / 144.0) < 1e-5);
    }
}

TEST_CASE("fmim matches a naive spectral-mask oracle", "[denoiser]") {
  Rng rng(4);
  int H = 6, W = 10;  // non-power-of-two exercises the fallback transform
  Tensor x = rng.rand_uniform({1, 1, H, W}, -1.0, 1.0);
  Tensor got = fmim_highpass_plain(x, 0.3);

  auto spec = oracles::naive_dft2(x.data(), H, W);
  int sh = (int)std::ceil(0.3 * H), sw = (int)std::ceil(0.3 * W);
  for (int ky = 0; ky < H; ++ky)
    for (int kx = 0; kx < W; ++kx)
      if (fose::fftutil::in_centered_box(ky, H, sh) && fose::fftutil::in_centered_box(kx, W, sw))
        spec[(size_t)ky * W + kx] = 0.0;
  // inverse DFT, real part
  for (int y = 0; y < H; ++y)
    for (int xx = 0; xx < W; ++xx) {
      std::complex<double> acc(0.0, 0.0);
      for (int ky = 0; ky < H; ++ky)
        for (int kx = 0; kx < W; ++kx) {
          double ang = 2.0 * M_PI * ((double)ky * y / H + (double)kx * xx / W);
          acc += spec[(size_t)ky * W + kx] * std::complex<double>(std::cos(ang), std::sin(ang));
        }
      CHECK(std::abs(got.at(0, 0, y, xx) - acc.real() / (H * W)) < 1e-9);
    }
}

TEST_CASE("fmim gradient (self-adjoint filter) against finite differences", "[denoiser]") {
  Rng rng(5);
  Tensor x = rng.rand_uniform({1, 1, 8, 8}, -1.0, 1.0);
  Tensor probe = rng.rand_uniform({1, 1, 8, 8}, -1.0, 1.0);
  CHECK(oracles::max_rel_grad_err(x, [&](const Var& v) {
          return mean_all(vmul(fmim_highpass(v, 0.25), Var(probe)));
        }) < 1e-3);
}

TEST_CASE("arconv degenerates to standard convolution at fixed (3,3)", "[denoiser]") {
  Rng rng(6);
  int Ci = 3, Co = 4, H = 9, W = 9;
  Tensor x = rng.rand_uniform({2, Ci, H, W}, -1.0, 1.0);
  Tensor w = rng.rand_uniform({Co, Ci, 3, 3}, -0.5, 0.5);
  Tensor bank({16, Co, Ci, 3, 3});
  // size (3,3) -> index (1,1) -> entry 1*4+1 = 5
  std::copy(w.data(), w.data() + w.numel(), bank.data() + 5 * w.numel());
  Tensor sz({2, 1, H, W}, 3.0);
  Tensor got = arconv(Var(x), Var(bank), Var(sz), Var(sz), 7).value();
  Tensor want = conv2d(Var(x), Var(w), Var(), 1, 1).value();
  CHECK(t_max_abs_diff(got, want) < 1e-5);
}

TEST_CASE("arconv at (1,1) behaves as a pointwise convolution", "[denoiser]") {
  Rng rng(7);
  int Ci = 2, Co = 3, H = 8, W = 8;
  Tensor x = rng.rand_uniform({1, Ci, H, W}, -1.0, 1.0);
  Tensor bank({16, Co, Ci, 3, 3});
  for (int64_t i = 0; i < bank.numel(); ++i) bank[i] = rng.uniform(-0.3, 0.3);
  Tensor sz({1, 1, H, W}, 1.0);
  Tensor got = arconv(Var(x), Var(bank), Var(sz), Var(sz), 7).value();

  // every sample lands on the center pixel: equivalent 1x1 kernel sums the grid
  Tensor w1({Co, Ci, 1, 1});
  for (int o = 0; o < Co; ++o)
    for (int c = 0; c < Ci; ++c) {
      double s = 0.0;
      for (int g = 0; g < 9; ++g) s += bank.data()[((int64_t)o * Ci + c) * 9 + g];
      w1.at(o, c, 0, 0) = s;
    }
  Tensor want = conv2d(Var(x), Var(w1), Var(), 1, 0).value();
  CHECK(t_max_abs_diff(got, want) < 1e-10);
}

TEST_CASE("arconv gradients: input, bank, and size maps", "[denoiser]") {
  Rng rng(8);
  int Ci = 2, Co = 2, H = 8, W = 8;
  Tensor x = rng.rand_uniform({1, Ci, H, W}, -1.0, 1.0);
  Tensor bank = rng.rand_uniform({16, Co, Ci, 3, 3}, -0.4, 0.4);
  // continuous sizes away from rounding boundaries
  Tensor sh = rng.rand_uniform({1, 1, H, W}, 2.7, 3.3);
  Tensor sw = rng.rand_uniform({1, 1, H, W}, 4.7, 5.3);

  CHECK(oracles::max_rel_grad_err(x, [&](const Var& v) {
          return mean_all(arconv(v, Var(bank), Var(sh), Var(sw), 7));
        }) < 1e-3);
  CHECK(oracles::max_rel_grad_err(bank, [&](const Var& v) {
          return mean_all(arconv(Var(x), v, Var(sh), Var(sw), 7));
        }) < 1e-3);
  CHECK(oracles::max_rel_grad_err(sh, [&](const Var& v) {
          return mean_all(vsquare(arconv(Var(x), Var(bank), v, Var(sw), 7)));
        }) < 1e-3);
  CHECK(oracles::max_rel_grad_err(sw, [&](const Var& v) {
          return mean_all(vsquare(arconv(Var(x), Var(bank), Var(sh), v, 7)));
        }) < 1e-3);
}

TEST_CASE("arconv layer end-to-end gradient through the size head", "[denoiser]") {
  Rng rng(9);
  ARConv layer(2, 2, rng);
  Tensor x = rng.rand_uniform({1, 2, 8, 8}, -1.0, 1.0);
  CHECK(oracles::max_rel_grad_err(x, [&](const Var& v) {
          return mean_all(vsquare(layer.forward(v)));
        }) < 1e-3);
}

TEST_CASE("arconv routing freeze semantics", "[denoiser]") {
  Rng rng(10);
  ARConv layer(2, 2, rng);
  Tensor xa = rng.rand_uniform({1, 2, 8, 8}, -1.0, 1.0);
  Tensor xb = rng.rand_uniform({1, 2, 8, 8}, -1.0, 1.0);

  // live routing: different inputs may select different sizes
  auto [ha, wa] = layer.predict_sizes(Var(xa));
  auto [hb, wb] = layer.predict_sizes(Var(xb));
  CHECK(t_max_abs_diff(ha.value(), hb.value()) > 0.0);

  layer.freeze_routing();
  (void)layer.forward(Var(xa));
  Tensor cache1 = layer.frozen_size_h().clone();
  (void)layer.forward(Var(xb));
  Tensor cache2 = layer.frozen_size_h().clone();
  CHECK(t_max_abs_diff(cache1, cache2) == 0.0);  // bit-identical after freeze

  // bank still receives gradients after freeze
  Var out = mean_all(vsquare(layer.forward(Var(xb))));
  out.backward();
  bool bank_grad_nonzero = false;
  layer.visit_params("", [&](const std::string& name, Var& v) {
    if (name == "bank" && v.has_grad() && t_mean_abs(v.grad()) > 0.0) bank_grad_nonzero = true;
    if (name.rfind("head_", 0) == 0) CHECK_FALSE(v.requires_grad());
  });
  CHECK(bank_grad_nonzero);
}

TEST_CASE("apfm identity at init, attention rows, batch equivariance", "[denoiser]") {
  Rng rng(11);
  APFM apfm(4, 8, rng);
  Tensor spec = rng.rand_uniform({2, 4, 8, 8}, -1.0, 1.0);
  Tensor temb = rng.rand_uniform({2, 8}, -1.0, 1.0);

  // zero spatial branch + zero-init output projection -> identity
  Tensor zero_spat({2, 4, 8, 8});
  Var out = apfm.forward(Var(zero_spat), Var(spec), Var(temb));
  CHECK(t_max_abs_diff(out.value(), spec) == 0.0);

  Tensor spat = rng.rand_uniform({2, 4, 8, 8}, -1.0, 1.0);
  auto det = apfm.forward_detail(Var(spat), Var(spec), Var(temb));
  const Tensor& attn = det.attn.value();
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 4; ++i) {
      double s = 0.0;
      for (int j = 0; j < 4; ++j) s += attn.data()[((int64_t)n * 4 + i) * 4 + j];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }

  // swapping batch elements permutes outputs identically
  auto swap_batch = [](const Tensor& t) {
    Tensor s(t.shape());
    int64_t per = t.numel() / 2;
    std::copy(t.data(), t.data() + per, s.data() + per);
    std::copy(t.data() + per, t.data() + 2 * per, s.data());
    return s;
  };
  Tensor out_orig = apfm.forward(Var(spat), Var(spec), Var(temb)).value();
  Tensor out_swap =
      apfm.forward(Var(swap_batch(spat)), Var(swap_batch(spec)), Var(swap_batch(temb))).value();
  CHECK(t_max_abs_diff(swap_batch(out_orig), out_swap) < 1e-12);
}

TEST_CASE("apfm gradient against finite differences", "[denoiser]") {
  Rng rng(12);
  APFM apfm(2, 4, rng);
  Tensor spec = rng.rand_uniform({1, 2, 8, 8}, -1.0, 1.0);
  Tensor spat = rng.rand_uniform({1, 2, 8, 8}, -1.0, 1.0);
  Tensor temb = rng.rand_uniform({1, 4}, -1.0, 1.0);
  // exercise a non-zero output projection
  apfm.visit_params("", [&](const std::string& name, Var& v) {
    if (name.rfind("wo", 0) == 0)
      for (int64_t i = 0; i < v.value().numel(); ++i) v.value_mut()[i] = rng.uniform(-0.3, 0.3);
  });
  CHECK(oracles::max_rel_grad_err(spec, [&](const Var& v) {
          return mean_all(vsquare(apfm.forward(Var(spat), v, Var(temb))));
        }) < 1e-3);
  CHECK(oracles::max_rel_grad_err(spat, [&](const Var& v) {
          return mean_all(vsquare(apfm.forward(v, Var(spec), Var(temb))));
        }) < 1e-3);
}

TEST_CASE("denoiser shape contract, zero head, eval determinism", "[denoiser]") {
  Rng rng(13);
  DenoiserConfig cfg;
  cfg.bands = 8;
  cfg.base_channels = 8;
  cfg.num_scales = 2;
  cfg.blocks_per_scale = 1;
  cfg.arconv_enabled = false;
  DenoiserNet net(cfg, rng);

  Tensor xt = rng.rand_uniform({1, 8, 16, 16}, -1.0, 1.0);
  Tensor pan = rng.rand_uniform({1, 1, 16, 16}, 0.0, 1.0);
  Tensor lms = rng.rand_uniform({1, 8, 16, 16}, 0.0, 1.0);
  Tensor out = net.denoise(xt, pan, lms, 500);
  CHECK(out.shape() == xt.shape());
  CHECK(t_mean_abs(out) == 0.0);  // zero-initialized final projection

  Tensor again = net.denoise(xt, pan, lms, 500);
  CHECK(t_max_abs_diff(out, again) == 0.0);

  Tensor bad_lms = rng.rand_uniform({1, 8, 8, 8}, 0.0, 1.0);
  CHECK_THROWS_AS(net.denoise(xt, pan, bad_lms, 500), ShapeError);
}

TEST_CASE("denoiser smoke training decreases the stage-1 loss", "[denoiser]") {
  Rng rng(14);
  DenoiserConfig cfg;
  cfg.bands = 4;
  cfg.base_channels = 8;
  cfg.num_scales = 2;
  cfg.blocks_per_scale = 1;
  cfg.arconv_enabled = true;
  DenoiserNet net(cfg, rng);

  auto sched = diffusion::make_linear_schedule(1000, 1e-4, 0.02);
  Tensor gt = rng.rand_uniform({2, 4, 16, 16}, 0.0, 1.0);
  Tensor lms = rng.rand_uniform({2, 4, 16, 16}, 0.0, 1.0);
  Tensor pan = rng.rand_uniform({2, 1, 16, 16}, 0.0, 1.0);
  Tensor res = t_sub(gt, lms);

  AdamW opt(net.parameters(), 3e-3);
  double first = -1.0, last = 0.0;
  for (int step = 0; step < 50; ++step) {
    int t = rng.uniform_int(1, 1000);
    Tensor eps = rng.randn(res.shape());
    Tensor xt = diffusion::forward_sample(res, t, eps, sched);
    std::vector<int> ts(2, t);
    Var pred = net.forward(Var(xt), Var(pan), Var(lms), ts);
    Var loss = l1_loss(pred, Var(res));
    if (first < 0) first = loss.value()[0];
    last = loss.value()[0];
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  CHECK(last < first);

  // after updates, every trainable parameter has seen a nonzero gradient path
  int t = 700;
  Tensor eps = rng.randn(res.shape());
  Tensor xt = diffusion::forward_sample(res, t, eps, sched);
  std::vector<int> ts(2, t);
  opt.zero_grad();
  Var loss = l1_loss(net.forward(Var(xt), Var(pan), Var(lms), ts), Var(res));
  loss.backward();
  int dead = 0, total = 0;
  net.visit_params("", [&](const std::string&, Var& v) {
    ++total;
    if (!v.has_grad() || t_mean_abs(v.grad()) == 0.0) ++dead;
  });
  CHECK(total > 0);
  CHECK(dead == 0);
}
