#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "fose/core/arrayio.hpp"
#include "fose/core/rng.hpp"
#include "fose/core/tensor.hpp"

namespace fose::data {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Multi-band raster in [0,1], layout bands x H x W. Bit depth is provenance
/// metadata only; values are always normalized.
struct MSImage {
  Tensor data;  // [C,H,W]
  int bands = 0;
  std::string sensor_tag;
  int bit_depth = 11;

  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

struct PanImage {
  Tensor data;  // [1,H,W]
  int ratio = 4;

  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

inline int expected_bands_for_tag(const std::string& tag) {
  if (tag.rfind("wv", 0) == 0) return 8;
  if (tag.rfind("qb", 0) == 0 || tag.rfind("gf", 0) == 0) return 4;
  return -1;  // unknown family: band count unconstrained
}

inline void validate(const MSImage& img) {
  if (img.data.ndim() != 3 || img.data.dim(0) != img.bands)
    throw DataError("MSImage: data shape does not match band count");
  if (img.bands != 4 && img.bands != 8) throw DataError("MSImage: bands must be 4 or 8");
  int want = expected_bands_for_tag(img.sensor_tag);
  if (want > 0 && want != img.bands)
    throw DataError("MSImage: sensor tag '" + img.sensor_tag + "' implies " +
                    std::to_string(want) + " bands");
  for (int64_t i = 0; i < img.data.numel(); ++i) {
    double v = img.data[i];
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw DataError("MSImage: value outside [0,1]");
  }
}

/// (gt, ms, lms, pan) as produced by the reduced-resolution protocol:
/// gt/lms/pan co-registered at one grid, ms at 1/ratio of it.
struct SamplePair {
  MSImage gt;
  MSImage ms;
  MSImage lms;
  PanImage pan;
};

struct DatasetManifest {
  std::string sensor_tag;
  int bands = 0;
  int ratio = 4;
  int count = 0;
  std::string split;  // train / val / test
  uint64_t seed = 0;
};

// ------------------------------------------------------------- interpolation

namespace detail {

inline int reflect_index(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

inline double cubic_weight(double d) {
  double a = std::abs(d);
  if (a <= 1.0) return 1.5 * a * a * a - 2.5 * a * a + 1.0;
  if (a < 2.0) return -0.5 * a * a * a + 2.5 * a * a - 4.0 * a + 2.0;
  return 0.0;
}

/// 1-D cubic resample of each length-n row to length n*r (half-pixel mapping).
inline void upsample_rows_cubic(const double* src, int rows, int n, int r, double* dst) {
  int out_n = n * r;
  for (int row = 0; row < rows; ++row) {
    const double* s = src + (int64_t)row * n;
    double* d = dst + (int64_t)row * out_n;
    for (int o = 0; o < out_n; ++o) {
      double sx = (o + 0.5) / (double)r - 0.5;
      int ix = (int)std::floor(sx);
      double f = sx - ix;
      double acc = 0.0;
      for (int k = -1; k <= 2; ++k)
        acc += cubic_weight(f - k) * s[reflect_index(ix + k, n)];
      d[o] = acc;
    }
  }
}

inline void transpose_plane(const double* src, int h, int w, double* dst) {
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) dst[(int64_t)x * h + y] = src[(int64_t)y * w + x];
}

inline std::vector<double> gaussian_kernel(double sigma) {
  int half = (int)std::ceil(3.5 * sigma);
  std::vector<double> k((size_t)(2 * half + 1));
  double sum = 0.0;
  for (int i = -half; i <= half; ++i) {
    k[(size_t)(i + half)] = std::exp(-0.5 * (double)i * i / (sigma * sigma));
    sum += k[(size_t)(i + half)];
  }
  for (double& v : k) v /= sum;  // unit DC gain
  return k;
}

inline void blur_rows(const double* src, int rows, int n, const std::vector<double>& k,
                      double* dst) {
  int half = ((int)k.size() - 1) / 2;
  for (int row = 0; row < rows; ++row) {
    const double* s = src + (int64_t)row * n;
    double* d = dst + (int64_t)row * n;
    for (int x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int j = -half; j <= half; ++j) acc += k[(size_t)(j + half)] * s[reflect_index(x + j, n)];
      d[x] = acc;
    }
  }
}

}  // namespace detail

/// Gaussian whose frequency response equals `gain` at the Nyquist frequency of
/// the grid decimated by `ratio`.
inline double mtf_sigma(int ratio, double gain) {
  return (double)ratio * std::sqrt(-2.0 * std::log(gain)) / M_PI;
}

/// Separable Gaussian blur with reflective padding, per channel.
inline Tensor mtf_blur(const Tensor& x, int ratio, double gain) {
  if (!(gain > 0.0 && gain < 1.0)) throw DataError("mtf gain must lie in (0,1)");
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  auto k = detail::gaussian_kernel(mtf_sigma(ratio, gain));
  if ((int)k.size() > H || (int)k.size() > W)
    throw DataError("mtf_blur: kernel larger than image (" + std::to_string(k.size()) + " vs " +
                    std::to_string(H) + "x" + std::to_string(W) + ")");
  Tensor tmp({C, H, W}), tr({C, W, H}), tr2({C, W, H}), out({C, H, W});
  for (int c = 0; c < C; ++c) {
    detail::blur_rows(x.data() + (int64_t)c * H * W, H, W, k, tmp.data() + (int64_t)c * H * W);
    detail::transpose_plane(tmp.data() + (int64_t)c * H * W, H, W, tr.data() + (int64_t)c * H * W);
    detail::blur_rows(tr.data() + (int64_t)c * H * W, W, H, k, tr2.data() + (int64_t)c * H * W);
    detail::transpose_plane(tr2.data() + (int64_t)c * H * W, W, H, out.data() + (int64_t)c * H * W);
  }
  return out;
}

inline Tensor decimate(const Tensor& x, int ratio) {
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (H % ratio != 0 || W % ratio != 0)
    throw DataError("decimate: dimensions not divisible by ratio");
  int h = H / ratio, w = W / ratio, off = ratio / 2;
  Tensor y({C, h, w});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) y.at(c, i, j) = x.at(c, i * ratio + off, j * ratio + off);
  return y;
}

/// Cubic-kernel interpolation to ratio x resolution, clipped to [0,1].
inline MSImage upsample(const MSImage& ms, int ratio) {
  if (ratio < 2) throw DataError("upsample: ratio must be >= 2");
  int C = ms.bands, H = ms.height(), W = ms.width();
  Tensor rows({C, H, W * ratio});
  for (int c = 0; c < C; ++c)
    detail::upsample_rows_cubic(ms.data.data() + (int64_t)c * H * W, H, W, ratio,
                                rows.data() + (int64_t)c * H * W * ratio);
  Tensor tr({C, W * ratio, H});
  Tensor tr_up({C, W * ratio, H * ratio});
  Tensor out({C, H * ratio, W * ratio});
  for (int c = 0; c < C; ++c) {
    detail::transpose_plane(rows.data() + (int64_t)c * H * W * ratio, H, W * ratio,
                            tr.data() + (int64_t)c * H * W * ratio);
    detail::upsample_rows_cubic(tr.data() + (int64_t)c * H * W * ratio, W * ratio, H, ratio,
                                tr_up.data() + (int64_t)c * (int64_t)W * ratio * H * ratio);
    detail::transpose_plane(tr_up.data() + (int64_t)c * (int64_t)W * ratio * H * ratio, W * ratio,
                            H * ratio, out.data() + (int64_t)c * (int64_t)H * ratio * W * ratio);
  }
  MSImage up;
  up.data = t_clip(out, 0.0, 1.0);
  up.bands = C;
  up.sensor_tag = ms.sensor_tag;
  up.bit_depth = ms.bit_depth;
  return up;
}

// ------------------------------------------------------------ scene synthesis

/// Deterministic synthetic scene: smooth low-frequency spectral fields plus
/// sharp primitives shared across bands, and a co-located panchromatic plane at
/// ratio x resolution carrying extra high-frequency texture absent from gt.
inline std::pair<MSImage, PanImage> generate_synthetic_scene(uint64_t seed, int bands, int height,
                                                             int width, int ratio) {
  if (bands != 4 && bands != 8) throw DataError("generate_synthetic_scene: bands must be 4 or 8");
  if (height % ratio != 0 || width % ratio != 0)
    throw DataError("generate_synthetic_scene: dimensions must be divisible by ratio");
  Rng rng(Rng::mix(seed, (uint64_t)bands * 1000003ULL + (uint64_t)height * 1009ULL +
                             (uint64_t)width * 13ULL + (uint64_t)ratio));

  struct Wave {
    double kx, ky, phase, amp;
  };
  const int n_fields = 3;
  std::vector<std::vector<Wave>> fields((size_t)n_fields);
  for (auto& f : fields)
    for (int m = 0; m < 3; ++m)
      f.push_back({rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(0.0, 2.0 * M_PI),
                   rng.uniform(0.2, 0.5)});

  struct Primitive {
    int kind;  // 0 rect, 1 disk, 2 line
    double cu, cv, p0, p1, p2;
  };
  const int n_prims = 10;
  std::vector<Primitive> prims;
  for (int p = 0; p < n_prims; ++p) {
    Primitive pr;
    pr.kind = rng.uniform_int(0, 2);
    pr.cu = rng.uniform(0.1, 0.9);
    pr.cv = rng.uniform(0.1, 0.9);
    pr.p0 = rng.uniform(0.05, 0.25);   // half-width / radius / angle scale
    pr.p1 = rng.uniform(0.05, 0.25);   // half-height / unused / length
    pr.p2 = rng.uniform(0.0, M_PI);    // line angle
    prims.push_back(pr);
  }
  // band mixes for fields, band amplitudes for primitives (shared geometry)
  Tensor field_mix({bands, n_fields}), band_off({bands}), prim_amp({bands, n_prims});
  for (int b = 0; b < bands; ++b) {
    band_off[b] = rng.uniform(-0.3, 0.3);
    for (int k = 0; k < n_fields; ++k) field_mix.at(b, k) = rng.uniform(-0.8, 0.8);
    for (int p = 0; p < n_prims; ++p) prim_amp.at(b, p) = rng.uniform(-0.7, 0.7);
  }
  // pan mixing weights: positive, fixed per seed
  std::vector<double> pan_w((size_t)bands);
  double wsum = 0.0;
  for (int b = 0; b < bands; ++b) {
    pan_w[(size_t)b] = rng.uniform(0.5, 1.5);
    wsum += pan_w[(size_t)b];
  }
  for (double& w : pan_w) w /= wsum;
  // pan-only texture: gratings near the high-resolution Nyquist
  struct Grating {
    double fx, fy, phase, amp;
  };
  std::vector<Grating> gratings;
  for (int j = 0; j < 3; ++j)
    gratings.push_back({rng.uniform(0.25, 0.45) * width * ratio,
                        rng.uniform(0.25, 0.45) * height * ratio, rng.uniform(0.0, 2.0 * M_PI),
                        0.025});

  auto inside = [&](const Primitive& pr, double u, double v) -> bool {
    switch (pr.kind) {
      case 0:
        return std::abs(u - pr.cu) <= pr.p0 && std::abs(v - pr.cv) <= pr.p1;
      case 1:
        return (u - pr.cu) * (u - pr.cu) + (v - pr.cv) * (v - pr.cv) <= pr.p0 * pr.p0;
      default: {
        double du = u - pr.cu, dv = v - pr.cv;
        double along = du * std::cos(pr.p2) + dv * std::sin(pr.p2);
        double across = -du * std::sin(pr.p2) + dv * std::cos(pr.p2);
        return std::abs(along) <= pr.p1 && std::abs(across) <= 0.012;
      }
    }
  };

  auto band_raw = [&](int b, double u, double v) -> double {
    double raw = band_off[b];
    for (int k = 0; k < n_fields; ++k) {
      double f = 0.0;
      for (const Wave& w : fields[(size_t)k])
        f += w.amp * std::cos(2.0 * M_PI * (w.kx * u + w.ky * v) + w.phase);
      raw += field_mix.at(b, k) * f;
    }
    for (int p = 0; p < n_prims; ++p)
      if (inside(prims[(size_t)p], u, v)) raw += prim_amp.at(b, p);
    return raw;
  };
  auto squash = [](double v) { return 0.5 + 0.45 * std::tanh(v); };

  MSImage gt;
  gt.bands = bands;
  gt.sensor_tag = bands == 8 ? "wv3-like" : "qb-like";
  gt.data = Tensor({bands, height, width});
  for (int b = 0; b < bands; ++b)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        double u = (x + 0.5) / width, v = (y + 0.5) / height;
        gt.data.at(b, y, x) = squash(band_raw(b, u, v));
      }

  PanImage pan;
  pan.ratio = ratio;
  int ph = height * ratio, pw = width * ratio;
  pan.data = Tensor({1, ph, pw});
  for (int y = 0; y < ph; ++y)
    for (int x = 0; x < pw; ++x) {
      double u = (x + 0.5) / pw, v = (y + 0.5) / ph;
      double mix = 0.0;
      for (int b = 0; b < bands; ++b) mix += pan_w[(size_t)b] * squash(band_raw(b, u, v));
      double tex = 0.0;
      for (const Grating& g : gratings)
        tex += g.amp * std::cos(2.0 * M_PI * (g.fx * u + g.fy * v) + g.phase);
      pan.data.at(0, y, x) = std::min(1.0, std::max(0.0, mix + tex));
    }
  return {gt, pan};
}

// --------------------------------------------------------- Wald-style pairing

/// Reduce a panchromatic plane by ratio with its own MTF gain (also the D_s
/// degraded-pan path).
inline PanImage degrade_pan(const PanImage& pan, int ratio, double mtf_gain_pan) {
  PanImage out;
  out.ratio = ratio;
  out.data = decimate(mtf_blur(pan.data, ratio, mtf_gain_pan), ratio);
  return out;
}

/// Standard reduced-resolution pairing: gt stays the reference; ms is the
/// MTF-degraded decimation of gt, lms its cubic upsampling, and pan the
/// original panchromatic plane degraded onto the gt grid.
inline SamplePair wald_degrade(const MSImage& gt, const PanImage& pan, int ratio,
                               double mtf_gain_ms = 0.30, double mtf_gain_pan = 0.15) {
  if (pan.height() != gt.height() * ratio || pan.width() != gt.width() * ratio)
    throw DataError("wald_degrade: pan must be ratio x the gt grid");
  SamplePair sp;
  sp.gt = gt;
  sp.ms.bands = gt.bands;
  sp.ms.sensor_tag = gt.sensor_tag;
  sp.ms.bit_depth = gt.bit_depth;
  sp.ms.data = decimate(mtf_blur(gt.data, ratio, mtf_gain_ms), ratio);
  sp.lms = upsample(sp.ms, ratio);
  sp.pan = degrade_pan(pan, ratio, mtf_gain_pan);
  return sp;
}

// ---------------------------------------------------------------- dataset I/O

inline std::string data_root_default() {
  const char* env = std::getenv("FOSE_DATA_ROOT");
  return env ? env : "data";
}

inline void save_dataset(const std::vector<SamplePair>& pairs, const DatasetManifest& manifest,
                         const std::string& root) {
  if (manifest.count != (int)pairs.size())
    throw DataError("save_dataset: manifest count " + std::to_string(manifest.count) +
                    " != pair count " + std::to_string(pairs.size()));
  if (pairs.empty()) throw DataError("save_dataset: empty dataset");
  namespace fs = std::filesystem;
  fs::path dir = fs::path(root) / manifest.split;
  fs::create_directories(dir);
  int N = (int)pairs.size();
  auto stack = [&](auto get) {
    Tensor first = get(pairs[0]);
    Shape s = {N, first.dim(0), first.dim(1), first.dim(2)};
    Tensor out(s);
    int64_t per = first.numel();
    for (int n = 0; n < N; ++n) {
      Tensor t = get(pairs[(size_t)n]);
      if (t.numel() != per) throw DataError("save_dataset: inconsistent pair shapes");
      std::copy(t.data(), t.data() + per, out.data() + (int64_t)n * per);
    }
    return out;
  };
  write_array((dir / "gt.arr").string(), stack([](const SamplePair& p) { return p.gt.data; }));
  write_array((dir / "ms.arr").string(), stack([](const SamplePair& p) { return p.ms.data; }));
  write_array((dir / "lms.arr").string(), stack([](const SamplePair& p) { return p.lms.data; }));
  write_array((dir / "pan.arr").string(), stack([](const SamplePair& p) { return p.pan.data; }));
  std::ofstream mf(dir / "manifest.txt");
  mf << "sensor = " << manifest.sensor_tag << "\n";
  mf << "bands = " << manifest.bands << "\n";
  mf << "ratio = " << manifest.ratio << "\n";
  mf << "count = " << manifest.count << "\n";
  mf << "seed = " << manifest.seed << "\n";
}

/// Whole-split tensors (training works on these directly).
struct DatasetTensors {
  Tensor gt, ms, lms, pan;  // each [N,C,H,W]
  DatasetManifest manifest;
  int count() const { return gt.dim(0); }
};

inline DatasetTensors load_dataset_tensors(const std::string& root, const std::string& split) {
  namespace fs = std::filesystem;
  fs::path dir = fs::path(root) / split;
  if (!fs::exists(dir / "manifest.txt"))
    throw DataError("load_dataset: missing manifest.txt under " + dir.string());
  DatasetManifest m;
  m.split = split;
  std::ifstream mf(dir / "manifest.txt");
  std::string line;
  while (std::getline(mf, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t");
      size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
    if (key == "sensor") m.sensor_tag = val;
    else if (key == "bands") m.bands = std::stoi(val);
    else if (key == "ratio") m.ratio = std::stoi(val);
    else if (key == "count") m.count = std::stoi(val);
    else if (key == "seed") m.seed = (uint64_t)std::stoull(val);
  }
  DatasetTensors d;
  d.manifest = m;
  for (const char* name : {"gt", "ms", "lms", "pan"}) {
    fs::path p = dir / (std::string(name) + ".arr");
    if (!fs::exists(p))
      throw DataError("load_dataset: missing dataset component '" + std::string(name) + "' (" +
                      p.string() + ")");
  }
  d.gt = read_array((dir / "gt.arr").string());
  d.ms = read_array((dir / "ms.arr").string());
  d.lms = read_array((dir / "lms.arr").string());
  d.pan = read_array((dir / "pan.arr").string());
  for (const Tensor* t : {&d.gt, &d.ms, &d.lms, &d.pan})
    if (t->dim(0) != m.count)
      throw DataError("load_dataset: manifest count " + std::to_string(m.count) +
                      " does not match stored arrays (" + std::to_string(t->dim(0)) + ")");
  return d;
}

inline std::pair<std::vector<SamplePair>, DatasetManifest> load_dataset(const std::string& root,
                                                                        const std::string& split) {
  DatasetTensors d = load_dataset_tensors(root, split);
  std::vector<SamplePair> pairs;
  int N = d.count();
  auto unstack = [&](const Tensor& t, int n) {
    Tensor out({t.dim(1), t.dim(2), t.dim(3)});
    int64_t per = out.numel();
    std::copy(t.data() + (int64_t)n * per, t.data() + (int64_t)(n + 1) * per, out.data());
    return out;
  };
  for (int n = 0; n < N; ++n) {
    SamplePair p;
    p.gt.data = unstack(d.gt, n);
    p.gt.bands = d.manifest.bands;
    p.gt.sensor_tag = d.manifest.sensor_tag;
    p.ms.data = unstack(d.ms, n);
    p.ms.bands = d.manifest.bands;
    p.ms.sensor_tag = d.manifest.sensor_tag;
    p.lms.data = unstack(d.lms, n);
    p.lms.bands = d.manifest.bands;
    p.lms.sensor_tag = d.manifest.sensor_tag;
    p.pan.data = unstack(d.pan, n);
    p.pan.ratio = d.manifest.ratio;
    pairs.push_back(std::move(p));
  }
  return {pairs, d.manifest};
}

}  // namespace fose::data
