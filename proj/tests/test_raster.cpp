#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "fose/data/raster.hpp"

using namespace fose;
using namespace fose::data;
namespace fs = std::filesystem;

TEST_CASE("synthetic scene shape/determinism contracts", "[raster]") {
  auto [gt, pan] = generate_synthetic_scene(0, 8, 64, 64, 4);
  CHECK(gt.data.shape() == Shape{8, 64, 64});
  CHECK(pan.data.shape() == Shape{1, 256, 256});
  validate(gt);

  auto [gt2, pan2] = generate_synthetic_scene(0, 8, 64, 64, 4);
  CHECK(t_max_abs_diff(gt.data, gt2.data) == 0.0);
  CHECK(t_max_abs_diff(pan.data, pan2.data) == 0.0);

  auto [gt3, pan3] = generate_synthetic_scene(1, 8, 64, 64, 4);
  CHECK(t_max_abs_diff(gt.data, gt3.data) > 0.0);

  CHECK_THROWS_AS(generate_synthetic_scene(0, 5, 64, 64, 4), DataError);
  CHECK_THROWS_AS(generate_synthetic_scene(0, 8, 63, 64, 4), DataError);
}

TEST_CASE("wald degradation on constants and shapes", "[raster]") {
  MSImage gt;
  gt.bands = 8;
  gt.sensor_tag = "wv3-like";
  gt.data = Tensor({8, 64, 64}, 0.5);
  PanImage pan;
  pan.ratio = 4;
  pan.data = Tensor({1, 256, 256}, 0.5);

  SamplePair sp = wald_degrade(gt, pan, 4);
  CHECK(sp.ms.data.shape() == Shape{8, 16, 16});
  CHECK(sp.lms.data.shape() == Shape{8, 64, 64});
  CHECK(sp.pan.data.shape() == Shape{1, 64, 64});
  CHECK(t_max_abs_diff(sp.ms.data, Tensor({8, 16, 16}, 0.5)) < 1e-12);
  CHECK(t_max_abs_diff(sp.lms.data, Tensor({8, 64, 64}, 0.5)) < 1e-12);
}

TEST_CASE("impulse mass: blur preserves the sum, decimation matches kernel weights", "[raster]") {
  Tensor x({1, 64, 64});
  x.at(0, 33, 30) = 1.0;
  Tensor blurred = mtf_blur(x, 4, 0.30);
  double sum_blur = 0.0;
  for (int64_t i = 0; i < blurred.numel(); ++i) sum_blur += blurred[i];
  CHECK(std::abs(sum_blur - 1.0) < 1e-6);  // unit DC gain, interior impulse

  // decimated mass equals the explicit separable-kernel weights at the
  // sampled offsets (brute-force oracle)
  Tensor ms = decimate(blurred, 4);
  double sum_ms = 0.0;
  for (int64_t i = 0; i < ms.numel(); ++i) sum_ms += ms[i];

  double sigma = mtf_sigma(4, 0.30);
  int half = (int)std::ceil(3.5 * sigma);
  std::vector<double> k((size_t)(2 * half + 1));
  double ksum = 0.0;
  for (int i = -half; i <= half; ++i) {
    k[(size_t)(i + half)] = std::exp(-0.5 * i * i / (sigma * sigma));
    ksum += k[(size_t)(i + half)];
  }
  for (double& v : k) v /= ksum;
  auto axis_mass = [&](int impulse_pos) {
    double acc = 0.0;
    for (int i = 0; i < 16; ++i) {
      int off = 4 * i + 2 - impulse_pos;
      if (std::abs(off) <= half) acc += k[(size_t)(off + half)];
    }
    return acc;
  };
  double want = axis_mass(33) * axis_mass(30);
  CHECK(std::abs(sum_ms - want) < 1e-6);
}

TEST_CASE("degradation keeps band means on smooth content", "[raster]") {
  // integer-wavenumber cosines + offset: decimated mean equals the offset
  Tensor smooth({2, 64, 64});
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      double u = (x + 0.5) / 64.0, v = (y + 0.5) / 64.0;
      smooth.at(0, y, x) = 0.4 + 0.2 * std::cos(2 * M_PI * (2 * u + v)) +
                           0.1 * std::cos(2 * M_PI * (u - 3 * v) + 0.7);
      smooth.at(1, y, x) = 0.6 + 0.15 * std::cos(2 * M_PI * (u + 2 * v) + 1.1);
    }
  Tensor ms = decimate(mtf_blur(smooth, 4, 0.30), 4);
  for (int c = 0; c < 2; ++c) {
    double mg = 0.0, mm = 0.0;
    for (int i = 0; i < 64 * 64; ++i) mg += smooth[(int64_t)c * 64 * 64 + i];
    for (int i = 0; i < 16 * 16; ++i) mm += ms[(int64_t)c * 16 * 16 + i];
    CHECK(std::abs(mg / 4096.0 - mm / 256.0) < 1e-4);
  }

  // full synthetic scene: looser sanity bound (aliasing from sharp primitives)
  auto [gt, pan] = generate_synthetic_scene(3, 4, 64, 64, 4);
  SamplePair sp = wald_degrade(gt, pan, 4);
  for (int c = 0; c < 4; ++c) {
    double mg = 0.0, mm = 0.0;
    for (int i = 0; i < 64 * 64; ++i) mg += gt.data[(int64_t)c * 64 * 64 + i];
    for (int i = 0; i < 16 * 16; ++i) mm += sp.ms.data[(int64_t)c * 16 * 16 + i];
    CHECK(std::abs(mg / 4096.0 - mm / 256.0) < 5e-3);
  }
}

TEST_CASE("kernel larger than image is rejected", "[raster]") {
  Tensor tiny({1, 8, 8}, 0.5);
  CHECK_THROWS_AS(mtf_blur(tiny, 4, 0.30), DataError);
}

TEST_CASE("cubic upsampling contracts", "[raster]") {
  MSImage c;
  c.bands = 1;
  c.sensor_tag = "wv3-like";

  c.data = Tensor({1, 2, 2}, 0.3);
  MSImage up = upsample(c, 2);
  CHECK(up.data.shape() == Shape{1, 4, 4});
  CHECK(t_max_abs_diff(up.data, Tensor({1, 4, 4}, 0.3)) < 1e-12);

  c.data = Tensor({1, 8, 8}, 0.3);
  MSImage up4 = upsample(c, 4);
  CHECK(up4.data.shape() == Shape{1, 32, 32});
  CHECK(t_max_abs_diff(up4.data, Tensor({1, 32, 32}, 0.3)) < 1e-12);

  // linear ramp is reproduced exactly away from the reflected border
  MSImage ramp;
  ramp.bands = 1;
  ramp.data = Tensor({1, 16, 16});
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) ramp.data.at(0, y, x) = 0.2 + 0.02 * x + 0.015 * y;
  MSImage rup = upsample(ramp, 4);
  int r = 4;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      double sx = (x + 0.5) / r - 0.5, sy = (y + 0.5) / r - 0.5;
      int ix = (int)std::floor(sx), iy = (int)std::floor(sy);
      if (ix - 1 < 0 || ix + 2 > 15 || iy - 1 < 0 || iy + 2 > 15) continue;
      double want = 0.2 + 0.02 * sx + 0.015 * sy;
      CHECK(std::abs(rup.data.at(0, y, x) - want) < 1e-5);
    }

  CHECK_THROWS_AS(upsample(c, 1), DataError);
}

TEST_CASE("dataset container round trip and error paths", "[raster]") {
  fs::path root = fs::temp_directory_path() / "fose_test_ds";
  fs::remove_all(root);

  std::vector<SamplePair> pairs;
  for (int i = 0; i < 4; ++i) {
    auto [gt, pan] = generate_synthetic_scene((uint64_t)i, 4, 32, 32, 4);
    pairs.push_back(wald_degrade(gt, pan, 4));
  }
  DatasetManifest m;
  m.sensor_tag = "qb-like";
  m.bands = 4;
  m.ratio = 4;
  m.count = 4;
  m.split = "train";
  m.seed = 0;
  save_dataset(pairs, m, root.string());

  auto [loaded, lm] = load_dataset(root.string(), "train");
  REQUIRE(loaded.size() == 4);
  CHECK(lm.bands == 4);
  CHECK(lm.sensor_tag == "qb-like");
  for (int i = 0; i < 4; ++i) {
    // lossless at f32 precision
    Tensor orig = pairs[(size_t)i].gt.data;
    Tensor want(orig.shape());
    for (int64_t j = 0; j < orig.numel(); ++j) want[j] = (double)(float)orig[j];
    CHECK(t_max_abs_diff(loaded[(size_t)i].gt.data, want) == 0.0);
  }

  // missing component error names the dataset
  fs::remove(root / "train" / "pan.arr");
  try {
    load_dataset(root.string(), "train");
    FAIL("expected missing-pan error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("pan") != std::string::npos);
  }

  // manifest count mismatch
  save_dataset(pairs, m, root.string());
  {
    std::ofstream mf(root / "train" / "manifest.txt");
    mf << "sensor = qb-like\nbands = 4\nratio = 4\ncount = 9\nseed = 0\n";
  }
  CHECK_THROWS_AS(load_dataset(root.string(), "train"), DataError);

  DatasetManifest bad = m;
  bad.count = 7;
  CHECK_THROWS_AS(save_dataset(pairs, bad, root.string()), DataError);
  fs::remove_all(root);
}
