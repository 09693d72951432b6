#pragma once

#include <cmath>
#include <complex>
#include <vector>

namespace fose::fftutil {

using cplx = std::complex<double>;

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

/// Iterative radix-2 Cooley-Tukey; inverse includes the 1/n scale.
inline void fft_pow2(cplx* a, int n, bool inverse) {
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (int len = 2; len <= n; len <<= 1) {
    double ang = 2.0 * M_PI / len * (inverse ? 1.0 : -1.0);
    cplx wl(std::cos(ang), std::sin(ang));
    for (int i = 0; i < n; i += len) {
      cplx w(1.0, 0.0);
      for (int k = 0; k < len / 2; ++k) {
        cplx u = a[i + k];
        cplx v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse)
    for (int i = 0; i < n; ++i) a[i] /= (double)n;
}

/// O(n^2) fallback for non-power-of-two lengths (spatial dims stay small).
inline void dft_naive(cplx* a, int n, bool inverse) {
  std::vector<cplx> out((size_t)n);
  double sgn = inverse ? 1.0 : -1.0;
  for (int k = 0; k < n; ++k) {
    cplx acc(0.0, 0.0);
    for (int j = 0; j < n; ++j) {
      double ang = sgn * 2.0 * M_PI * (double)((int64_t)k * j % n) / (double)n;
      acc += a[j] * cplx(std::cos(ang), std::sin(ang));
    }
    out[(size_t)k] = inverse ? acc / (double)n : acc;
  }
  for (int i = 0; i < n; ++i) a[i] = out[(size_t)i];
}

inline void fft(cplx* a, int n, bool inverse) {
  if (n == 1) return;
  if (is_pow2(n))
    fft_pow2(a, n, inverse);
  else
    dft_naive(a, n, inverse);
}

/// In-place 2-D transform of an H x W row-major plane.
inline void fft2(std::vector<cplx>& plane, int h, int w, bool inverse) {
  for (int r = 0; r < h; ++r) fft(plane.data() + (size_t)r * w, w, inverse);
  std::vector<cplx> col((size_t)h);
  for (int c = 0; c < w; ++c) {
    for (int r = 0; r < h; ++r) col[(size_t)r] = plane[(size_t)r * w + c];
    fft(col.data(), h, inverse);
    for (int r = 0; r < h; ++r) plane[(size_t)r * w + c] = col[(size_t)r];
  }
}

/// Low-frequency membership for a centered box of the given side: index k of
/// an H-point spectrum is "low" when its fftshifted position falls within the
/// box around the DC bin.
inline bool in_centered_box(int k, int n, int side) {
  int c = n / 2;
  int shifted = (k + c) % n;
  int start = c - side / 2;
  return shifted >= start && shifted < start + side;
}

}  // namespace fose::fftutil
