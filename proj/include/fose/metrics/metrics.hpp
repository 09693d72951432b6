#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fose/core/tensor.hpp"

namespace fose::metrics {

struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MetricConfig {
  int ratio = 4;
  int q_block = 32;  // clamped to the evaluated image when larger
  double p = 1.0;    // D_lambda exponent
  double q = 1.0;    // D_s exponent
};

// --------------------------------------------------------------- scalar UIQI

namespace detail {

constexpr double kVarEps = 1e-12;

struct BlockGrid {
  int block, by, bx;
};

inline BlockGrid block_grid(int H, int W, int q_block) {
  int b = std::min({q_block, H, W});
  return {b, H / b, W / b};
}

/// Universal image quality index of two scalar blocks, with the degenerate
/// conventions: both constant -> 1, exactly one constant -> 0, and the
/// luminance factor -> 1 when both means vanish (equal-mean limit).
inline double uiqi_block(const double* a, const double* b, int n, int stride_row, int ncols) {
  double ma = 0.0, mb = 0.0;
  int cnt = 0;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < ncols; ++c) {
      ma += a[(int64_t)r * stride_row + c];
      mb += b[(int64_t)r * stride_row + c];
      ++cnt;
    }
  ma /= cnt;
  mb /= cnt;
  double va = 0.0, vb = 0.0, cov = 0.0;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < ncols; ++c) {
      double da = a[(int64_t)r * stride_row + c] - ma;
      double db = b[(int64_t)r * stride_row + c] - mb;
      va += da * da;
      vb += db * db;
      cov += da * db;
    }
  va /= cnt;
  vb /= cnt;
  cov /= cnt;
  if (va < kVarEps && vb < kVarEps) return 1.0;
  if (va < kVarEps || vb < kVarEps) return 0.0;
  double cc = 2.0 * cov / (va + vb);
  double lum = (ma * ma + mb * mb) < kVarEps ? 1.0 : 2.0 * ma * mb / (ma * ma + mb * mb);
  return cc * lum;
}

/// Blockwise mean of the scalar UIQI over non-overlapping blocks of plane
/// a vs plane b (each H x W).
inline double uiqi_blockwise(const double* a, const double* b, int H, int W, int q_block) {
  BlockGrid g = block_grid(H, W, q_block);
  double acc = 0.0;
  int nb = 0;
  for (int by = 0; by < g.by; ++by)
    for (int bx = 0; bx < g.bx; ++bx) {
      const double* pa = a + (int64_t)by * g.block * W + (int64_t)bx * g.block;
      const double* pb = b + (int64_t)by * g.block * W + (int64_t)bx * g.block;
      acc += uiqi_block(pa, pb, g.block, W, g.block);
      ++nb;
    }
  return acc / nb;
}

// ------------------------------------------------- hypercomplex machinery

/// Cayley-Dickson product for dim in {1,2,4,8}: (a,b)(c,d) = (ac - d*b, da + bc*).
inline void cd_mult(const double* x, const double* y, double* out, int dim) {
  if (dim == 1) {
    out[0] = x[0] * y[0];
    return;
  }
  int h = dim / 2;
  std::vector<double> ac(h), db(h), da(h), bc(h), tmp(h);
  auto conj_into = [&](const double* v, std::vector<double>& dst) {
    dst.assign(v, v + h);
    for (int i = 1; i < h; ++i) dst[(size_t)i] = -dst[(size_t)i];
  };
  std::vector<double> dconj, cconj;
  conj_into(y + h, dconj);
  conj_into(y, cconj);
  cd_mult(x, y, ac.data(), h);
  cd_mult(dconj.data(), x + h, db.data(), h);
  cd_mult(y + h, x, da.data(), h);
  cd_mult(x + h, cconj.data(), bc.data(), h);
  for (int i = 0; i < h; ++i) {
    out[i] = ac[(size_t)i] - db[(size_t)i];
    out[h + i] = da[(size_t)i] + bc[(size_t)i];
  }
}

inline void cd_conj(const double* x, double* out, int dim) {
  out[0] = x[0];
  for (int i = 1; i < dim; ++i) out[i] = -x[i];
}

/// Q2n of one block: pixel vectors as 2^n-dimensional hypercomplex numbers.
inline double q2n_block(const Tensor& fused, const Tensor& ref, int y0, int x0, int block) {
  int C = ref.dim(0), W = ref.dim(2);
  (void)W;
  int cnt = block * block;
  std::vector<double> mz((size_t)C, 0.0), mw((size_t)C, 0.0);
  for (int y = y0; y < y0 + block; ++y)
    for (int x = x0; x < x0 + block; ++x)
      for (int c = 0; c < C; ++c) {
        mz[(size_t)c] += ref.at(c, y, x);
        mw[(size_t)c] += fused.at(c, y, x);
      }
  for (int c = 0; c < C; ++c) {
    mz[(size_t)c] /= cnt;
    mw[(size_t)c] /= cnt;
  }
  double var_z = 0.0, var_w = 0.0;
  std::vector<double> cov((size_t)C, 0.0), dz((size_t)C), dw((size_t)C), dwc((size_t)C),
      prod((size_t)C);
  for (int y = y0; y < y0 + block; ++y)
    for (int x = x0; x < x0 + block; ++x) {
      for (int c = 0; c < C; ++c) {
        dz[(size_t)c] = ref.at(c, y, x) - mz[(size_t)c];
        dw[(size_t)c] = fused.at(c, y, x) - mw[(size_t)c];
        var_z += dz[(size_t)c] * dz[(size_t)c];
        var_w += dw[(size_t)c] * dw[(size_t)c];
      }
      cd_conj(dw.data(), dwc.data(), C);
      cd_mult(dz.data(), dwc.data(), prod.data(), C);
      for (int c = 0; c < C; ++c) cov[(size_t)c] += prod[(size_t)c];
    }
  var_z /= cnt;
  var_w /= cnt;
  for (int c = 0; c < C; ++c) cov[(size_t)c] /= cnt;
  if (var_z < kVarEps && var_w < kVarEps) return 1.0;
  if (var_z < kVarEps || var_w < kVarEps) return 0.0;
  // C == 1 degenerates to the signed scalar UIQI; C > 1 takes the norm of the
  // hypercomplex covariance and mean magnitudes.
  if (C == 1) {
    double cc = 2.0 * cov[0] / (var_z + var_w);
    double m2 = mz[0] * mz[0] + mw[0] * mw[0];
    double lum = m2 < kVarEps ? 1.0 : 2.0 * mz[0] * mw[0] / m2;
    return cc * lum;
  }
  double nrm = 0.0;
  for (int c = 0; c < C; ++c) nrm += cov[(size_t)c] * cov[(size_t)c];
  double cc = 2.0 * std::sqrt(nrm) / (var_z + var_w);
  double lz2 = 0.0, lw2 = 0.0;
  for (int c = 0; c < C; ++c) {
    lz2 += mz[(size_t)c] * mz[(size_t)c];
    lw2 += mw[(size_t)c] * mw[(size_t)c];
  }
  double lum = (lz2 + lw2) < kVarEps ? 1.0 : 2.0 * std::sqrt(lz2) * std::sqrt(lw2) / (lz2 + lw2);
  return cc * lum;
}

}  // namespace detail

// ------------------------------------------------------------------- metrics

/// Spectral angle mapper in degrees; zero-norm pixels are skipped.
inline double sam(const Tensor& fused, const Tensor& ref) {
  check_same_shape(fused, ref, "sam");
  int C = ref.dim(0), H = ref.dim(1), W = ref.dim(2);
  double acc = 0.0;
  int64_t valid = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double dot = 0.0, nf = 0.0, nr = 0.0;
      for (int c = 0; c < C; ++c) {
        double f = fused.at(c, y, x), r = ref.at(c, y, x);
        dot += f * r;
        nf += f * f;
        nr += r * r;
      }
      if (nf <= 0.0 || nr <= 0.0) continue;
      double cosv = dot / std::sqrt(nf * nr);
      cosv = std::min(1.0, std::max(-1.0, cosv));
      acc += std::acos(cosv);
      ++valid;
    }
  if (valid == 0) return 0.0;
  return acc / (double)valid * (180.0 / M_PI);
}

/// Relative dimensionless global error in synthesis.
inline double ergas(const Tensor& fused, const Tensor& ref, int ratio) {
  check_same_shape(fused, ref, "ergas");
  int C = ref.dim(0);
  int64_t per = ref.numel() / C;
  double acc = 0.0;
  for (int c = 0; c < C; ++c) {
    const double* fp = fused.data() + (int64_t)c * per;
    const double* rp = ref.data() + (int64_t)c * per;
    double mu = 0.0, mse = 0.0;
    for (int64_t i = 0; i < per; ++i) {
      mu += rp[i];
      double d = fp[i] - rp[i];
      mse += d * d;
    }
    mu /= (double)per;
    mse /= (double)per;
    if (mu == 0.0)
      throw MetricError("ergas: reference band " + std::to_string(c) + " has zero mean");
    acc += mse / (mu * mu);
  }
  return 100.0 / (double)ratio * std::sqrt(acc / (double)C);
}

/// Hypercomplex universal image quality index (Q4/Q8 family) over
/// non-overlapping blocks; bands must be a power of two in {1,2,4,8}.
inline double q2n(const Tensor& fused, const Tensor& ref, const MetricConfig& cfg = {}) {
  check_same_shape(fused, ref, "q2n");
  int C = ref.dim(0), H = ref.dim(1), W = ref.dim(2);
  if (C != 1 && C != 2 && C != 4 && C != 8)
    throw MetricError("q2n: band count must be one of {1,2,4,8}");
  detail::BlockGrid g = detail::block_grid(H, W, cfg.q_block);
  double acc = 0.0;
  int nb = 0;
  for (int by = 0; by < g.by; ++by)
    for (int bx = 0; bx < g.bx; ++bx) {
      acc += detail::q2n_block(fused, ref, by * g.block, bx * g.block, g.block);
      ++nb;
    }
  return acc / nb;
}

/// Spatial correlation coefficient: Pearson correlation of Laplacian
/// high-passed bands (reflective padding); zero-variance bands are skipped.
inline double scc(const Tensor& fused, const Tensor& ref) {
  check_same_shape(fused, ref, "scc");
  int C = ref.dim(0), H = ref.dim(1), W = ref.dim(2);
  auto hp = [&](const Tensor& t, int c, int y, int x) {
    auto refl = [](int i, int n) { return i < 0 ? -i - 1 : (i >= n ? 2 * n - 1 - i : i); };
    double s = 0.0;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        double w = (dy == 0 && dx == 0) ? 8.0 : -1.0;
        s += w * t.at(c, refl(y + dy, H), refl(x + dx, W));
      }
    return s;
  };
  double acc = 0.0;
  int kept = 0;
  for (int c = 0; c < C; ++c) {
    double ma = 0.0, mb = 0.0;
    int64_t n = (int64_t)H * W;
    std::vector<double> fa((size_t)n), fb((size_t)n);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        fa[(size_t)(y * W + x)] = hp(fused, c, y, x);
        fb[(size_t)(y * W + x)] = hp(ref, c, y, x);
        ma += fa[(size_t)(y * W + x)];
        mb += fb[(size_t)(y * W + x)];
      }
    ma /= (double)n;
    mb /= (double)n;
    double va = 0.0, vb = 0.0, cov = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      double da = fa[(size_t)i] - ma, db = fb[(size_t)i] - mb;
      va += da * da;
      vb += db * db;
      cov += da * db;
    }
    if (va < detail::kVarEps || vb < detail::kVarEps) continue;
    acc += cov / std::sqrt(va * vb);
    ++kept;
  }
  return kept ? acc / kept : 0.0;
}

namespace detail {
/// Reduced-resolution block size covering the same ground footprint as
/// q_block does at full resolution.
inline int matched_block(int q_block, int full_h, int reduced_h) {
  int r = std::max(1, full_h / std::max(1, reduced_h));
  return std::max(2, q_block / r);
}
}  // namespace detail

/// Spectral distortion (inter-band QNR form): deviation of the fused image's
/// inter-band UIQI matrix from the low-resolution one. Blocks at the reduced
/// scale are shrunk by the resolution ratio so both matrices are computed over
/// the same ground footprints.
inline double d_lambda(const Tensor& fused, const Tensor& ms, const MetricConfig& cfg = {}) {
  int C = fused.dim(0);
  if (ms.dim(0) != C) throw MetricError("d_lambda: band count mismatch");
  if (C < 2) throw MetricError("d_lambda: needs at least 2 bands");
  int FH = fused.dim(1), FW = fused.dim(2), MH = ms.dim(1), MW = ms.dim(2);
  int mblock = detail::matched_block(cfg.q_block, FH, MH);
  int64_t fper = (int64_t)FH * FW, mper = (int64_t)MH * MW;
  double acc = 0.0;
  for (int i = 0; i < C; ++i)
    for (int j = 0; j < C; ++j) {
      if (i == j) continue;
      double qf = detail::uiqi_blockwise(fused.data() + i * fper, fused.data() + j * fper, FH, FW,
                                         cfg.q_block);
      double qm =
          detail::uiqi_blockwise(ms.data() + i * mper, ms.data() + j * mper, MH, MW, mblock);
      acc += std::pow(std::abs(qf - qm), cfg.p);
    }
  return std::pow(acc / ((double)C * (C - 1)), 1.0 / cfg.p);
}

/// Spatial distortion: deviation of band-vs-pan UIQI between resolutions.
/// pan_degraded must be the pan plane reduced by the ratio (wald pan path).
inline double d_s(const Tensor& fused, const Tensor& ms, const Tensor& pan,
                  const Tensor& pan_degraded, const MetricConfig& cfg = {}) {
  int C = fused.dim(0);
  int FH = fused.dim(1), FW = fused.dim(2), MH = ms.dim(1), MW = ms.dim(2);
  if (pan.dim(1) != FH || pan.dim(2) != FW) throw MetricError("d_s: pan/fused size mismatch");
  if (pan_degraded.dim(1) != MH || pan_degraded.dim(2) != MW)
    throw MetricError("d_s: degraded pan must match the ms grid");
  int mblock = detail::matched_block(cfg.q_block, FH, MH);
  int64_t fper = (int64_t)FH * FW, mper = (int64_t)MH * MW;
  double acc = 0.0;
  for (int c = 0; c < C; ++c) {
    double qf = detail::uiqi_blockwise(fused.data() + c * fper, pan.data(), FH, FW, cfg.q_block);
    double qm =
        detail::uiqi_blockwise(ms.data() + c * mper, pan_degraded.data(), MH, MW, mblock);
    acc += std::pow(std::abs(qf - qm), cfg.q);
  }
  return std::pow(acc / (double)C, 1.0 / cfg.q);
}

/// Hybrid no-reference index, product form.
inline double hqnr(double d_lambda_v, double d_s_v) {
  return (1.0 - d_lambda_v) * (1.0 - d_s_v);
}

// -------------------------------------------------------------------- report

/// Per-image metric values plus the aggregate row, serializable as CSV and a
/// line summary in the "mean±std" style.
struct MetricReport {
  std::string resolution;  // "RR" or "FR"
  std::vector<std::string> names;
  std::vector<std::vector<double>> per_image;

  std::vector<double> mean() const {
    std::vector<double> m(names.size(), 0.0);
    for (const auto& row : per_image)
      for (size_t i = 0; i < m.size(); ++i) m[i] += row[i];
    for (double& v : m) v /= (double)per_image.size();
    return m;
  }

  std::vector<double> stddev() const {
    std::vector<double> m = mean(), s(names.size(), 0.0);
    for (const auto& row : per_image)
      for (size_t i = 0; i < s.size(); ++i) s[i] += (row[i] - m[i]) * (row[i] - m[i]);
    for (double& v : s) v = std::sqrt(v / (double)per_image.size());
    return s;
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "image";
    for (const auto& n : names) os << "," << n;
    os << "\n";
    for (size_t r = 0; r < per_image.size(); ++r) {
      os << r;
      for (double v : per_image[r]) os << "," << format(v);
      os << "\n";
    }
    auto m = mean();
    auto s = stddev();
    os << "aggregate";
    for (size_t i = 0; i < m.size(); ++i) os << "," << format(m[i]) << "±" << format(s[i]);
    os << "\n";
    return os.str();
  }

  std::string summary() const {
    auto m = mean();
    auto s = stddev();
    std::ostringstream os;
    os << resolution << ":";
    for (size_t i = 0; i < names.size(); ++i)
      os << " " << names[i] << " " << format(m[i]) << "±" << format(s[i]);
    return os.str();
  }

  static std::string format(double v) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    os << v;
    return os.str();
  }
};

}  // namespace fose::metrics
