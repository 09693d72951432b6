#pragma once

#include <vector>

#include "fose/nn/layers.hpp"
#include "fose/nn/ops.hpp"

namespace fose::nn {

namespace detail {

/// Bilinear read with zero padding outside the plane.
inline double bilerp(const double* p, int H, int W, double py, double px) {
  int y0 = (int)std::floor(py), x0 = (int)std::floor(px);
  double fy = py - y0, fx = px - x0;
  auto tap = [&](int y, int x) -> double {
    return (y >= 0 && y < H && x >= 0 && x < W) ? p[(int64_t)y * W + x] : 0.0;
  };
  return (1 - fy) * ((1 - fx) * tap(y0, x0) + fx * tap(y0, x0 + 1)) +
         fy * ((1 - fx) * tap(y0 + 1, x0) + fx * tap(y0 + 1, x0 + 1));
}

inline void bilerp_grads(const double* p, int H, int W, double py, double px, double* dval_dpy,
                         double* dval_dpx) {
  int y0 = (int)std::floor(py), x0 = (int)std::floor(px);
  double fy = py - y0, fx = px - x0;
  auto tap = [&](int y, int x) -> double {
    return (y >= 0 && y < H && x >= 0 && x < W) ? p[(int64_t)y * W + x] : 0.0;
  };
  double v00 = tap(y0, x0), v01 = tap(y0, x0 + 1), v10 = tap(y0 + 1, x0), v11 = tap(y0 + 1, x0 + 1);
  *dval_dpy = (1 - fx) * (v10 - v00) + fx * (v11 - v01);
  *dval_dpx = (1 - fy) * (v01 - v00) + fy * (v11 - v10);
}

inline void bilerp_scatter(double* p, int H, int W, double py, double px, double g) {
  int y0 = (int)std::floor(py), x0 = (int)std::floor(px);
  double fy = py - y0, fx = px - x0;
  auto add = [&](int y, int x, double v) {
    if (y >= 0 && y < H && x >= 0 && x < W) p[(int64_t)y * W + x] += v;
  };
  add(y0, x0, (1 - fy) * (1 - fx) * g);
  add(y0, x0 + 1, (1 - fy) * fx * g);
  add(y0 + 1, x0, fy * (1 - fx) * g);
  add(y0 + 1, x0 + 1, fy * fx * g);
}

/// Nearest odd size index for a continuous extent in [1, kmax].
inline int odd_size_index(double v, int nsizes) {
  int idx = (int)std::llround((v - 1.0) * 0.5);
  return std::max(0, std::min(nsizes - 1, idx));
}

}  // namespace detail

/// Adaptive rectangular convolution: a fixed 3x3 grid of sample offsets is
/// scaled to a per-pixel continuous h x w rectangle, inputs are read by
/// bilinear interpolation, and the weighted sum uses the kernel-bank entry of
/// the rounded odd size. Differentiable in the input, the bank, and the
/// pre-rounding sizes (through the sample positions).
///
///   x:      [N,Ci,H,W]
///   bank:   [S,Co,Ci,g,g] with S = nsizes_h * nsizes_w, g the sample grid
///   size_h: [N,1,H,W] continuous in [1,kmax]
///   size_w: [N,1,H,W]
inline Var arconv(const Var& x, const Var& bank, const Var& size_h, const Var& size_w, int kmax) {
  const Tensor& xv = x.value();
  const Tensor& bv = bank.value();
  const Tensor& hv = size_h.value();
  const Tensor& wv = size_w.value();
  int N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int S = bv.dim(0), Co = bv.dim(1), g = bv.dim(3);
  if (bv.dim(2) != Ci) throw ShapeError("arconv: bank/input channel mismatch");
  int nsizes = (kmax + 1) / 2;
  if (S != nsizes * nsizes) throw ShapeError("arconv: bank size count != nsizes^2");
  if (H < kmax || W < kmax) throw ShapeError("arconv: spatial size must be >= kmax");
  if (hv.dim(0) != N || hv.dim(2) != H || hv.dim(3) != W) throw ShapeError("arconv: size_h shape");
  const int G = g * g;
  const int K = Ci * G;
  const int64_t P = (int64_t)H * W;
  const double gc = (g - 1) / 2.0;  // grid center index

  Tensor y({N, Co, H, W});
#pragma omp parallel for schedule(static)
  for (int n = 0; n < N; ++n) {
    std::vector<double> col((size_t)K * P);
    std::vector<int> sid((size_t)P);
    const double* hp = hv.data() + (int64_t)n * P;
    const double* wp = wv.data() + (int64_t)n * P;
    for (int64_t p = 0; p < P; ++p) {
      int py = (int)(p / W), px = (int)(p % W);
      double hh = hp[p], ww = wp[p];
      sid[(size_t)p] =
          detail::odd_size_index(hh, nsizes) * nsizes + detail::odd_size_index(ww, nsizes);
      double sy = (hh - 1.0) / 2.0, sx = (ww - 1.0) / 2.0;
      for (int ci = 0; ci < Ci; ++ci) {
        const double* plane = xv.data() + ((int64_t)n * Ci + ci) * P;
        for (int gy = 0; gy < g; ++gy)
          for (int gx = 0; gx < g; ++gx) {
            double oy = (gy - gc) / (gc > 0 ? gc : 1.0) * sy;
            double ox = (gx - gc) / (gc > 0 ? gc : 1.0) * sx;
            col[(size_t)((ci * G + gy * g + gx) * P + p)] =
                detail::bilerp(plane, H, W, py + oy, px + ox);
          }
      }
    }
    // group pixels by bank entry, one GEMM per present size
    std::vector<std::vector<int>> groups((size_t)S);
    for (int64_t p = 0; p < P; ++p) groups[(size_t)sid[(size_t)p]].push_back((int)p);
    double* out = y.data() + (int64_t)n * Co * P;
    for (int s = 0; s < S; ++s) {
      const auto& idx = groups[(size_t)s];
      if (idx.empty()) continue;
      int Pk = (int)idx.size();
      MatRM sub(K, Pk);
      for (int q = 0; q < K; ++q)
        for (int j = 0; j < Pk; ++j) sub(q, j) = col[(size_t)q * P + idx[(size_t)j]];
      CMapM Ws(bv.data() + (int64_t)s * Co * K, Co, K);
      MatRM res = Ws * sub;
      for (int o = 0; o < Co; ++o)
        for (int j = 0; j < Pk; ++j) out[(int64_t)o * P + idx[(size_t)j]] = res(o, j);
    }
  }

  Tensor xc = xv, bc = bv, hc = hv, wc = wv;
  return make_op_output(std::move(y), {x, bank, size_h, size_w}, [xc, bc, hc, wc, kmax,
                                                                  g](Var::Node& node) {
    int N = xc.dim(0), Ci = xc.dim(1), H = xc.dim(2), W = xc.dim(3);
    int S = bc.dim(0), Co = bc.dim(1);
    int nsizes = (kmax + 1) / 2;
    const int G = g * g;
    const int K = Ci * G;
    const int64_t P = (int64_t)H * W;
    const double gc = (g - 1) / 2.0;
    bool need_x = node.parents[0]->requires_grad;
    bool need_b = node.parents[1]->requires_grad;
    bool need_h = node.parents[2]->requires_grad;
    bool need_w = node.parents[3]->requires_grad;

    Tensor gx = need_x ? Tensor(xc.shape()) : Tensor();
    Tensor gh = need_h ? Tensor(hc.shape()) : Tensor();
    Tensor gw = need_w ? Tensor(wc.shape()) : Tensor();
    std::vector<Tensor> gb_per(need_b ? (size_t)N : 0);

#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
      const double* hp = hc.data() + (int64_t)n * P;
      const double* wp = wc.data() + (int64_t)n * P;
      const double* gout = node.grad.data() + (int64_t)n * Co * P;
      std::vector<int> sid((size_t)P);
      std::vector<double> col;
      if (need_b) col.assign((size_t)K * P, 0.0);
      for (int64_t p = 0; p < P; ++p) {
        int py = (int)(p / W), px = (int)(p % W);
        double hh = hp[p], ww = wp[p];
        sid[(size_t)p] =
            detail::odd_size_index(hh, nsizes) * nsizes + detail::odd_size_index(ww, nsizes);
        if (need_b) {
          double sy = (hh - 1.0) / 2.0, sx = (ww - 1.0) / 2.0;
          for (int ci = 0; ci < Ci; ++ci) {
            const double* plane = xc.data() + ((int64_t)n * Ci + ci) * P;
            for (int gy = 0; gy < g; ++gy)
              for (int gx = 0; gx < g; ++gx) {
                double oy = (gy - gc) / (gc > 0 ? gc : 1.0) * sy;
                double ox = (gx - gc) / (gc > 0 ? gc : 1.0) * sx;
                col[(size_t)((ci * G + gy * g + gx) * P + p)] =
                    detail::bilerp(plane, H, W, py + oy, px + ox);
              }
          }
        }
      }
      if (need_b) gb_per[(size_t)n] = Tensor(bc.shape());
      // d_col = W_s^T gout per pixel; then scatter through the interpolation
      for (int64_t p = 0; p < P; ++p) {
        int py = (int)(p / W), px = (int)(p % W);
        int s = sid[(size_t)p];
        const double* Ws = bc.data() + (int64_t)s * Co * K;
        double hh = hp[p], ww = wp[p];
        double sy = (hh - 1.0) / 2.0, sx = (ww - 1.0) / 2.0;
        double acc_h = 0.0, acc_w = 0.0;
        for (int ci = 0; ci < Ci; ++ci) {
          const double* plane = xc.data() + ((int64_t)n * Ci + ci) * P;
          double* gplane = need_x ? gx.data() + ((int64_t)n * Ci + ci) * P : nullptr;
          for (int gy = 0; gy < g; ++gy)
            for (int gx2 = 0; gx2 < g; ++gx2) {
              int q = ci * G + gy * g + gx2;
              double dcol = 0.0;
              for (int o = 0; o < Co; ++o)
                dcol += Ws[(int64_t)o * K + q] * gout[(int64_t)o * P + p];
              if (need_b) {
                double* gb = gb_per[(size_t)n].data() + (int64_t)s * Co * K;
                double cv = col[(size_t)q * P + p];
                for (int o = 0; o < Co; ++o)
                  gb[(int64_t)o * K + q] += gout[(int64_t)o * P + p] * cv;
              }
              double ny = (gy - gc) / (gc > 0 ? gc : 1.0);
              double nx = (gx2 - gc) / (gc > 0 ? gc : 1.0);
              double pyy = py + ny * sy, pxx = px + nx * sx;
              if (need_x) detail::bilerp_scatter(gplane, H, W, pyy, pxx, dcol);
              if (need_h || need_w) {
                double dv_dpy, dv_dpx;
                detail::bilerp_grads(plane, H, W, pyy, pxx, &dv_dpy, &dv_dpx);
                acc_h += dcol * dv_dpy * ny * 0.5;  // d(off_y)/d(h) = ny/2
                acc_w += dcol * dv_dpx * nx * 0.5;
              }
            }
        }
        if (need_h) gh.data()[(int64_t)n * P + p] = acc_h;
        if (need_w) gw.data()[(int64_t)n * P + p] = acc_w;
      }
    }
    if (need_x) node.parents[0]->accum(gx);
    if (need_b) {
      Tensor gb(bc.shape());
      for (int n = 0; n < N; ++n)
        for (int64_t i = 0; i < gb.numel(); ++i) gb[i] += gb_per[(size_t)n][i];
      node.parents[1]->accum(gb);
    }
    if (need_h) node.parents[2]->accum(gh);
    if (need_w) node.parents[3]->accum(gw);
  });
}

/// ARConv layer: a light head predicts per-pixel (h,w); the bank holds kernel
/// weights for every odd size pair. After routing freeze the size map of the
/// first subsequent forward is cached and reused verbatim while the bank keeps
/// training.
class ARConv : public Module {
 public:
  ARConv() = default;
  ARConv(int ci, int co, Rng& rng, int kmax = 7, int grid = 3, int head_hidden = 8)
      : ci_(ci), co_(co), kmax_(kmax), grid_(grid) {
    int nsizes = (kmax + 1) / 2;
    int S = nsizes * nsizes;
    Tensor b({S, co, ci, grid, grid});
    double std = std::sqrt(2.0 / ((double)ci * grid * grid));
    for (int64_t i = 0; i < b.numel(); ++i) b[i] = rng.normal() * std;
    bank_ = Var(b, true);
    head_a_ = Conv2d(ci, head_hidden, 3, rng);
    head_b_ = Conv2d(head_hidden, 2, 3, rng);
    // start near size 3 (away from rounding boundaries): sigma(z) = 1/3
    head_b_.bias().value_mut().fill(std::log(0.5));
    for (int64_t i = 0; i < head_b_.weight().value().numel(); ++i)
      head_b_.weight().value_mut()[i] *= 0.1;
  }

  /// Continuous per-pixel sizes in [1,kmax], shape [N,1,H,W] each.
  std::pair<Var, Var> predict_sizes(const Var& x) const {
    Var z = head_b_.forward(vsilu(head_a_.forward(x)));
    Var h = vaffine(vsigmoid(slice_ch(z, 0, 1)), (double)(kmax_ - 1), 1.0);
    Var w = vaffine(vsigmoid(slice_ch(z, 1, 2)), (double)(kmax_ - 1), 1.0);
    return {h, w};
  }

  Var forward(const Var& x) {
    Var h, w;
    if (frozen_flag_[0] != 0.0) {
      int H = x.value().dim(2), W = x.value().dim(3);
      if (!frozen_h_.defined() || frozen_h_.dim(2) != H || frozen_h_.dim(3) != W) {
        NoGradGuard ng;
        auto [hh, ww] = predict_sizes(x);
        // static routing: first sample's map, shared by every later input
        frozen_h_ = Tensor({1, 1, H, W});
        frozen_w_ = Tensor({1, 1, H, W});
        std::copy(hh.value().data(), hh.value().data() + (int64_t)H * W, frozen_h_.data());
        std::copy(ww.value().data(), ww.value().data() + (int64_t)H * W, frozen_w_.data());
      }
      int N = x.value().dim(0), H2 = frozen_h_.dim(2), W2 = frozen_h_.dim(3);
      Tensor hb({N, 1, H2, W2}), wb({N, 1, H2, W2});
      for (int n = 0; n < N; ++n) {
        std::copy(frozen_h_.data(), frozen_h_.data() + (int64_t)H2 * W2,
                  hb.data() + (int64_t)n * H2 * W2);
        std::copy(frozen_w_.data(), frozen_w_.data() + (int64_t)H2 * W2,
                  wb.data() + (int64_t)n * H2 * W2);
      }
      h = Var(hb);
      w = Var(wb);
    } else {
      auto hw = predict_sizes(x);
      h = hw.first;
      w = hw.second;
    }
    Var bank = bank_;
    if (lora_.active) bank = vadd(bank_, lora_.delta(bank_.value().shape()));
    return arconv(x, bank, h, w, kmax_);
  }

  void freeze_routing() { frozen_flag_[0] = 1.0; }
  bool routing_frozen() const { return frozen_flag_[0] != 0.0; }
  const Tensor& frozen_size_h() const { return frozen_h_; }

  void add_lora(int rank, double alpha, Rng& rng) {
    int nsizes = (kmax_ + 1) / 2;
    lora_.init(nsizes * nsizes * co_, ci_ * grid_ * grid_, rank, alpha, rng);
  }

  void merge_lora() {
    if (!lora_.active) return;
    NoGradGuard ng;
    Tensor merged = vadd(bank_, lora_.delta(bank_.value().shape())).value();
    bank_ = Var(merged, bank_.requires_grad());
    lora_ = LowRankAdapter{};
  }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Var&)>& f) override {
    f(join_name(prefix, "bank"), bank_);
    if (lora_.active) {
      f(join_name(prefix, "lora_a"), lora_.a);
      f(join_name(prefix, "lora_b"), lora_.b);
    }
    if (frozen_flag_[0] == 0.0) {
      head_a_.visit_params(join_name(prefix, "head_a"), f);
      head_b_.visit_params(join_name(prefix, "head_b"), f);
    } else {
      // frozen routing: the head stops training but stays in checkpoints
      auto freeze_visit = [&](const std::string& nm, Var& v) {
        v.set_requires_grad(false);
        f(nm, v);
      };
      head_a_.visit_params(join_name(prefix, "head_a"), freeze_visit);
      head_b_.visit_params(join_name(prefix, "head_b"), freeze_visit);
    }
  }

  void visit_buffers(const std::string& prefix,
                     const std::function<void(const std::string&, Tensor&)>& f) override {
    f(join_name(prefix, "frozen_flag"), frozen_flag_);
    f(join_name(prefix, "frozen_h"), frozen_h_);
    f(join_name(prefix, "frozen_w"), frozen_w_);
  }

  const Var& bank() const { return bank_; }
  Var& bank_mut() { return bank_; }
  Conv2d& head_a() { return head_a_; }
  Conv2d& head_b() { return head_b_; }
  const LowRankAdapter& lora() const { return lora_; }

  int64_t weight_param_count() const {
    int nsizes = (kmax_ + 1) / 2;
    return (int64_t)nsizes * nsizes * co_ * ci_ * grid_ * grid_ +
           head_a_.weight_param_count() + head_b_.weight_param_count();
  }
  /// Per-pixel cost equals one grid x grid convolution plus the size head.
  int64_t macs(int h, int w) const {
    return (int64_t)grid_ * grid_ * ci_ * co_ * h * w + head_a_.macs(h, w) + head_b_.macs(h, w);
  }

 private:
  int ci_ = 0, co_ = 0, kmax_ = 7, grid_ = 3;
  Var bank_;
  Conv2d head_a_, head_b_;
  LowRankAdapter lora_;
  Tensor frozen_flag_{Shape{1}};
  Tensor frozen_h_, frozen_w_;
};

/// Freeze routing across every ARConv layer of a model once the epoch reaches
/// the threshold; kernel banks keep training afterwards.
template <typename Model>
void freeze_arconv_routing(Model& model, int epoch, int freeze_epochs) {
  if (epoch < freeze_epochs) return;
  model.visit_arconv([](ARConv& layer) { layer.freeze_routing(); });
}

}  // namespace fose::nn
