#include <catch2/catch_amalgamated.hpp>

#include "fose/core/rng.hpp"
#include "fose/data/raster.hpp"
#include "fose/metrics/metrics.hpp"
#include "oracles.hpp"

using namespace fose;
using namespace fose::metrics;

TEST_CASE("sam identities and the 45-degree case", "[metrics]") {
  Rng rng(5);
  Tensor x = rng.rand_uniform({4, 8, 8}, 0.1, 0.9);
  CHECK(sam(x, x) == 0.0);
  CHECK(std::abs(sam(t_scale(x, 2.0), x)) < 1e-10);  // collinearity

  Tensor f({2, 1, 1}, std::vector<double>{1.0, 0.0});
  Tensor r({2, 1, 1}, std::vector<double>{1.0, 1.0});
  CHECK(std::abs(sam(f, r) - 45.0) < 1e-10);

  Tensor zf({2, 1, 1});
  CHECK(sam(zf, zf) == 0.0);  // all-zero defined as 0
}

TEST_CASE("ergas identity, hand case, homogeneity", "[metrics]") {
  Rng rng(6);
  Tensor x = rng.rand_uniform({4, 8, 8}, 0.1, 0.9);
  CHECK(ergas(x, x, 4) == 0.0);

  // 1 band: ref mean 2, RMSE 1, ratio 4 -> 12.5
  Tensor ref({1, 1, 2}, std::vector<double>{1.0, 3.0});
  Tensor fused({1, 1, 2}, std::vector<double>{2.0, 2.0});
  CHECK(std::abs(ergas(fused, ref, 4) - 12.5) < 1e-12);

  Tensor y = rng.rand_uniform({4, 8, 8}, 0.1, 0.9);
  CHECK(std::abs(ergas(y, x, 4) - ergas(t_scale(y, 2.0), t_scale(x, 2.0), 4)) < 1e-10);

  Tensor zero_band = x.clone();
  for (int i = 0; i < 64; ++i) zero_band[i] = 0.0;
  CHECK_THROWS_AS(ergas(y, zero_band, 4), MetricError);
}

TEST_CASE("q2n identity, symmetry, scalar degeneration", "[metrics]") {
  Rng rng(7);
  MetricConfig cfg;
  cfg.q_block = 16;

  for (int bands : {4, 8}) {
    Tensor x = rng.rand_uniform({bands, 32, 32}, 0.1, 0.9);
    CHECK(std::abs(q2n(x, x, cfg) - 1.0) < 1e-12);
    Tensor y = rng.rand_uniform({bands, 32, 32}, 0.1, 0.9);
    double qab = q2n(x, y, cfg), qba = q2n(y, x, cfg);
    CHECK(std::abs(qab - qba) < 1e-12);
    CHECK(qab <= 1.0 + 1e-12);
    CHECK(qab >= -1.0 - 1e-12);
  }

  // bands = 1 degenerates to the scalar universal image quality index
  Tensor a = rng.rand_uniform({1, 32, 32}, 0.0, 1.0);
  Tensor b = rng.rand_uniform({1, 32, 32}, 0.0, 1.0);
  double got = q2n(a, b, cfg);
  double want = oracles::naive_uiqi_blockwise(a, b, 32, 32, 16);
  CHECK(std::abs(got - want) < 1e-10);

  // zero-mean anti-correlation -> -1 in the scalar case
  Tensor z({1, 16, 16});
  for (int i = 0; i < 256; ++i) z[i] = rng.normal();
  double mean = 0.0;
  for (int i = 0; i < 256; ++i) mean += z[i];
  for (int i = 0; i < 256; ++i) z[i] -= mean / 256.0;
  Tensor nz = t_scale(z, -1.0);
  MetricConfig whole;
  whole.q_block = 16;
  CHECK(std::abs(q2n(z, nz, whole) - (-1.0)) < 1e-10);

  // constant-block conventions
  Tensor cst({1, 16, 16}, 0.5);
  CHECK(q2n(cst, cst, whole) == 1.0);
  CHECK(q2n(cst, z, whole) == 0.0);
}

TEST_CASE("scc identity, offset invariance, degenerate skip", "[metrics]") {
  Rng rng(8);
  Tensor x = rng.rand_uniform({3, 16, 16}, 0.1, 0.9);
  CHECK(std::abs(scc(x, x) - 1.0) < 1e-12);

  Tensor shifted = x.clone();
  for (int64_t i = 0; i < shifted.numel(); ++i) shifted[i] += 0.05;
  CHECK(std::abs(scc(shifted, x) - 1.0) < 1e-9);

  Tensor cst({3, 16, 16}, 0.7);
  CHECK(scc(cst, x) == 0.0);  // every band skipped

  CHECK(std::abs(scc(x, shifted) - scc(shifted, x)) < 1e-12);
}

TEST_CASE("d_lambda structural zero, range, upsampled-ms case", "[metrics]") {
  Rng rng(9);
  MetricConfig cfg;
  cfg.q_block = 16;

  Tensor ms = rng.rand_uniform({4, 16, 16}, 0.1, 0.9);
  CHECK(d_lambda(ms, ms, cfg) == 0.0);  // identical inter-band matrices

  data::MSImage m;
  m.bands = 4;
  m.sensor_tag = "qb-like";
  auto [gt, pan] = data::generate_synthetic_scene(11, 4, 64, 64, 4);
  auto sp = data::wald_degrade(gt, pan, 4);
  // fused == upsampled ms preserves inter-band relations approximately
  CHECK(d_lambda(sp.lms.data, sp.ms.data, cfg) < 0.02);

  Tensor f = rng.rand_uniform({4, 32, 32}, 0.0, 1.0);
  Tensor r = rng.rand_uniform({4, 8, 8}, 0.0, 1.0);
  double v = d_lambda(f, r, cfg);
  CHECK(v >= 0.0);
  CHECK(v <= 1.0);

  Tensor one_band = rng.rand_uniform({1, 16, 16}, 0.0, 1.0);
  CHECK_THROWS_AS(d_lambda(one_band, one_band, cfg), MetricError);
}

TEST_CASE("d_s structural zero, range, brute-force equality", "[metrics]") {
  Rng rng(10);
  MetricConfig cfg;
  cfg.q_block = 8;

  // replicated pan in every band at both scales -> exactly 0
  Tensor pan = rng.rand_uniform({1, 32, 32}, 0.1, 0.9);
  Tensor pan_l = rng.rand_uniform({1, 8, 8}, 0.1, 0.9);
  Tensor fused({2, 32, 32}), msr({2, 8, 8});
  for (int c = 0; c < 2; ++c) {
    std::copy(pan.data(), pan.data() + 32 * 32, fused.data() + (int64_t)c * 32 * 32);
    std::copy(pan_l.data(), pan_l.data() + 64, msr.data() + (int64_t)c * 64);
  }
  CHECK(d_s(fused, msr, pan, pan_l, cfg) == 0.0);

  // hand-built 2-band case against a naive oracle
  Tensor f2 = rng.rand_uniform({2, 32, 32}, 0.0, 1.0);
  Tensor m2 = rng.rand_uniform({2, 8, 8}, 0.0, 1.0);
  double got = d_s(f2, m2, pan, pan_l, cfg);
  double acc = 0.0;
  for (int c = 0; c < 2; ++c) {
    Tensor fc({1, 32, 32}), mc({1, 8, 8});
    std::copy(f2.data() + (int64_t)c * 1024, f2.data() + (int64_t)(c + 1) * 1024, fc.data());
    std::copy(m2.data() + (int64_t)c * 64, m2.data() + (int64_t)(c + 1) * 64, mc.data());
    double qf = oracles::naive_uiqi_blockwise(fc, pan, 32, 32, 8);
    // footprint-matched reduced block: 8 / (32/8) = 2
    double qm = oracles::naive_uiqi_blockwise(mc, pan_l, 8, 8, 2);
    acc += std::abs(qf - qm);
  }
  CHECK(std::abs(got - acc / 2.0) < 1e-10);
  CHECK(got >= 0.0);
  CHECK(got <= 1.0);
}

TEST_CASE("hqnr product form and the reported-values consistency", "[metrics]") {
  CHECK(hqnr(0.0, 0.0) == 1.0);
  CHECK(hqnr(1.0, 0.42) == 0.0);
  CHECK(std::abs(hqnr(0.013, 0.053) - 0.933) < 0.005);
}

TEST_CASE("report aggregates are recomputable from per-image rows", "[metrics]") {
  MetricReport rep;
  rep.resolution = "RR";
  rep.names = {"SAM", "ERGAS"};
  rep.per_image = {{2.0, 1.0}, {4.0, 3.0}, {3.0, 2.0}};
  auto m = rep.mean();
  CHECK(std::abs(m[0] - 3.0) < 1e-12);
  CHECK(std::abs(m[1] - 2.0) < 1e-12);
  auto s = rep.stddev();
  CHECK(std::abs(s[0] - std::sqrt(2.0 / 3.0)) < 1e-12);
  std::string csv = rep.to_csv();
  CHECK(csv.find("aggregate") != std::string::npos);
  // one row per image + header + aggregate
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
}
