#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <utility>
#include <vector>

#include "fose/core/autograd.hpp"
#include "fose/core/fft.hpp"
#include "fose/core/tensor.hpp"

namespace fose::nn {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

// ---------------------------------------------------------------- elementwise

namespace detail {

template <typename FwdFn, typename BwdFn>
Var unary_op(const Var& x, FwdFn fwd, BwdFn dfdx_from_xy) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  const int64_t n = xv.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) y[i] = fwd(xv[i]);
  Tensor yv = y;
  return make_op_output(std::move(y), {x}, [xv, yv, dfdx_from_xy](Var::Node& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    Tensor g(xv.shape());
    const int64_t m = xv.numel();
    for (int64_t i = 0; i < m; ++i) g[i] = node.grad[i] * dfdx_from_xy(xv[i], yv[i]);
    p.accum(g);
  });
}

}  // namespace detail

inline Var vadd(const Var& a, const Var& b) {
  Tensor y = t_add(a.value(), b.value());
  return make_op_output(std::move(y), {a, b}, [](Var::Node& node) {
    for (int k = 0; k < 2; ++k)
      if (node.parents[(size_t)k]->requires_grad) node.parents[(size_t)k]->accum(node.grad);
  });
}

inline Var vsub(const Var& a, const Var& b) {
  Tensor y = t_sub(a.value(), b.value());
  return make_op_output(std::move(y), {a, b}, [](Var::Node& node) {
    if (node.parents[0]->requires_grad) node.parents[0]->accum(node.grad);
    if (node.parents[1]->requires_grad) {
      Tensor g = t_scale(node.grad, -1.0);
      node.parents[1]->accum(g);
    }
  });
}

inline Var vmul(const Var& a, const Var& b) {
  Tensor av = a.value(), bv = b.value();
  Tensor y = t_mul(av, bv);
  return make_op_output(std::move(y), {a, b}, [av, bv](Var::Node& node) {
    if (node.parents[0]->requires_grad) node.parents[0]->accum(t_mul(node.grad, bv));
    if (node.parents[1]->requires_grad) node.parents[1]->accum(t_mul(node.grad, av));
  });
}

inline Var vscale(const Var& x, double s) {
  Tensor y = t_scale(x.value(), s);
  return make_op_output(std::move(y), {x}, [s](Var::Node& node) {
    if (node.parents[0]->requires_grad) node.parents[0]->accum(t_scale(node.grad, s));
  });
}

/// a*x + b elementwise.
inline Var vaffine(const Var& x, double a, double b) {
  return detail::unary_op(
      x, [a, b](double v) { return a * v + b; }, [a](double, double) { return a; });
}

inline Var vabs(const Var& x) {
  return detail::unary_op(
      x, [](double v) { return std::abs(v); },
      [](double xv, double) { return xv > 0.0 ? 1.0 : (xv < 0.0 ? -1.0 : 0.0); });
}

inline Var vsquare(const Var& x) {
  return detail::unary_op(
      x, [](double v) { return v * v; }, [](double xv, double) { return 2.0 * xv; });
}

inline Var vsigmoid(const Var& x) {
  return detail::unary_op(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double yv) { return yv * (1.0 - yv); });
}

inline Var vsilu(const Var& x) {
  return detail::unary_op(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double xv, double) {
        double s = 1.0 / (1.0 + std::exp(-xv));
        return s * (1.0 + xv * (1.0 - s));
      });
}

inline Var vrelu(const Var& x) {
  return detail::unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double xv, double) { return xv > 0.0 ? 1.0 : 0.0; });
}

/// Clamp to [0,1]; gradient passes through the closed interval.
inline Var clip01(const Var& x) {
  return detail::unary_op(
      x, [](double v) { return std::min(1.0, std::max(0.0, v)); },
      [](double xv, double) { return (xv >= 0.0 && xv <= 1.0) ? 1.0 : 0.0; });
}

inline Var mean_all(const Var& x) {
  const Tensor& xv = x.value();
  double inv = 1.0 / (double)xv.numel();
  double s = 0.0;
  for (int64_t i = 0; i < xv.numel(); ++i) s += xv[i];
  Shape xs = xv.shape();
  return make_op_output(Tensor::scalar(s * inv), {x}, [xs, inv](Var::Node& node) {
    if (!node.parents[0]->requires_grad) return;
    node.parents[0]->accum(Tensor(xs, node.grad[0] * inv));
  });
}

inline Var sum_all(const Var& x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (int64_t i = 0; i < xv.numel(); ++i) s += xv[i];
  Shape xs = xv.shape();
  return make_op_output(Tensor::scalar(s), {x}, [xs](Var::Node& node) {
    if (!node.parents[0]->requires_grad) return;
    node.parents[0]->accum(Tensor(xs, node.grad[0]));
  });
}

/// mean |a - b|
inline Var l1_loss(const Var& a, const Var& b) { return mean_all(vabs(vsub(a, b))); }
/// mean (a - b)^2
inline Var mse_loss(const Var& a, const Var& b) { return mean_all(vsquare(vsub(a, b))); }

/// Multiply by a learnable scalar (shape {1}).
inline Var mul_scalarv(const Var& x, const Var& s) {
  Tensor xv = x.value();
  double sv = s.value()[0];
  Tensor y = t_scale(xv, sv);
  return make_op_output(std::move(y), {x, s}, [xv, sv](Var::Node& node) {
    if (node.parents[0]->requires_grad) node.parents[0]->accum(t_scale(node.grad, sv));
    if (node.parents[1]->requires_grad) {
      double acc = 0.0;
      for (int64_t i = 0; i < xv.numel(); ++i) acc += node.grad[i] * xv[i];
      node.parents[1]->accum(Tensor::scalar(acc));
    }
  });
}

// --------------------------------------------------------------- shape moves

inline Var view(const Var& x, Shape s) {
  Shape xs = x.value().shape();
  Tensor y = x.value().clone().viewed(std::move(s));
  return make_op_output(std::move(y), {x}, [xs](Var::Node& node) {
    if (!node.parents[0]->requires_grad) return;
    node.parents[0]->accum(node.grad.viewed(xs));
  });
}

/// Concatenate along the channel dim of NCHW.
inline Var concat_ch(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.ndim() != 4 || bv.ndim() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) ||
      av.dim(3) != bv.dim(3))
    throw ShapeError("concat_ch: incompatible " + shape_str(av.shape()) + " / " +
                     shape_str(bv.shape()));
  int N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), H = av.dim(2), W = av.dim(3);
  Tensor y({N, Ca + Cb, H, W});
  int64_t plane = (int64_t)H * W;
  for (int n = 0; n < N; ++n) {
    std::copy(av.data() + (int64_t)n * Ca * plane, av.data() + (int64_t)(n + 1) * Ca * plane,
              y.data() + (int64_t)n * (Ca + Cb) * plane);
    std::copy(bv.data() + (int64_t)n * Cb * plane, bv.data() + (int64_t)(n + 1) * Cb * plane,
              y.data() + ((int64_t)n * (Ca + Cb) + Ca) * plane);
  }
  Shape as = av.shape(), bs = bv.shape();
  return make_op_output(std::move(y), {a, b}, [as, bs](Var::Node& node) {
    int N = as[0], Ca = as[1], Cb = bs[1], H = as[2], W = as[3];
    int64_t plane = (int64_t)H * W;
    if (node.parents[0]->requires_grad) {
      Tensor ga(as);
      for (int n = 0; n < N; ++n)
        std::copy(node.grad.data() + (int64_t)n * (Ca + Cb) * plane,
                  node.grad.data() + ((int64_t)n * (Ca + Cb) + Ca) * plane,
                  ga.data() + (int64_t)n * Ca * plane);
      node.parents[0]->accum(ga);
    }
    if (node.parents[1]->requires_grad) {
      Tensor gb(bs);
      for (int n = 0; n < N; ++n)
        std::copy(node.grad.data() + ((int64_t)n * (Ca + Cb) + Ca) * plane,
                  node.grad.data() + (int64_t)(n + 1) * (Ca + Cb) * plane,
                  gb.data() + (int64_t)n * Cb * plane);
      node.parents[1]->accum(gb);
    }
  });
}

inline Var slice_ch(const Var& x, int c0, int c1) {
  const Tensor& xv = x.value();
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Tensor y({N, c1 - c0, H, W});
  int64_t plane = (int64_t)H * W;
  for (int n = 0; n < N; ++n)
    std::copy(xv.data() + ((int64_t)n * C + c0) * plane, xv.data() + ((int64_t)n * C + c1) * plane,
              y.data() + (int64_t)n * (c1 - c0) * plane);
  Shape xs = xv.shape();
  return make_op_output(std::move(y), {x}, [xs, c0, c1](Var::Node& node) {
    if (!node.parents[0]->requires_grad) return;
    int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    int64_t plane = (int64_t)H * W;
    Tensor g(xs);
    for (int n = 0; n < N; ++n)
      std::copy(node.grad.data() + (int64_t)n * (c1 - c0) * plane,
                node.grad.data() + (int64_t)(n + 1) * (c1 - c0) * plane,
                g.data() + ((int64_t)n * C + c0) * plane);
    node.parents[0]->accum(g);
  });
}

// ------------------------------------------------------- linear algebra cores

/// y = x W^T + b ; x:[N,in] W:[out,in] b:[out] -> [N,out]
inline Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  int N = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
  if (wv.dim(1) != in) throw ShapeError("linear: weight/input mismatch");
  Tensor y({N, out});
  {
    CMapM X(xv.data(), N, in), W(wv.data(), out, in);
    MapM Y(y.data(), N, out);
    Y.noalias() = X * W.transpose();
  }
  if (b.defined()) {
    const Tensor& bv = b.value();
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < out; ++o) y.at(n, o) += bv[o];
  }
  Tensor xc = xv, wc = wv;
  std::vector<Var> parents = b.defined() ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
  return make_op_output(std::move(y), std::move(parents), [xc, wc](Var::Node& node) {
    int N = xc.dim(0), in = xc.dim(1), out = wc.dim(0);
    CMapM G(node.grad.data(), N, out), X(xc.data(), N, in), W(wc.data(), out, in);
    if (node.parents[0]->requires_grad) {
      Tensor gx({N, in});
      MapM GX(gx.data(), N, in);
      GX.noalias() = G * W;
      node.parents[0]->accum(gx);
    }
    if (node.parents[1]->requires_grad) {
      Tensor gw({out, in});
      MapM GW(gw.data(), out, in);
      GW.noalias() = G.transpose() * X;
      node.parents[1]->accum(gw);
    }
    if (node.parents.size() > 2 && node.parents[2]->requires_grad) {
      Tensor gb({out});
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < out; ++o) gb[o] += node.grad[(int64_t)n * out + o];
      node.parents[2]->accum(gb);
    }
  });
}

/// 2-D matmul, y = A B ; A:[m,k] B:[k,n]
inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) throw ShapeError("matmul: inner dim mismatch");
  Tensor y({m, n});
  {
    CMapM A(av.data(), m, k), B(bv.data(), k, n);
    MapM Y(y.data(), m, n);
    Y.noalias() = A * B;
  }
  Tensor ac = av, bc = bv;
  return make_op_output(std::move(y), {a, b}, [ac, bc](Var::Node& node) {
    int m = ac.dim(0), k = ac.dim(1), n = bc.dim(1);
    CMapM G(node.grad.data(), m, n), A(ac.data(), m, k), B(bc.data(), k, n);
    if (node.parents[0]->requires_grad) {
      Tensor ga({m, k});
      MapM GA(ga.data(), m, k);
      GA.noalias() = G * B.transpose();
      node.parents[0]->accum(ga);
    }
    if (node.parents[1]->requires_grad) {
      Tensor gb({k, n});
      MapM GB(gb.data(), k, n);
      GB.noalias() = A.transpose() * G;
      node.parents[1]->accum(gb);
    }
  });
}

/// Batched matmul over leading dim: a:[N,p,q] b:[N,q,r] -> [N,p,r]
inline Var bmm(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  int N = av.dim(0), p = av.dim(1), q = av.dim(2), r = bv.dim(2);
  if (bv.dim(0) != N || bv.dim(1) != q) throw ShapeError("bmm: shape mismatch");
  Tensor y({N, p, r});
  for (int n = 0; n < N; ++n) {
    CMapM A(av.data() + (int64_t)n * p * q, p, q), B(bv.data() + (int64_t)n * q * r, q, r);
    MapM Y(y.data() + (int64_t)n * p * r, p, r);
    Y.noalias() = A * B;
  }
  Tensor ac = av, bc = bv;
  return make_op_output(std::move(y), {a, b}, [ac, bc](Var::Node& node) {
    int N = ac.dim(0), p = ac.dim(1), q = ac.dim(2), r = bc.dim(2);
    for (int n = 0; n < N; ++n) {
      CMapM G(node.grad.data() + (int64_t)n * p * r, p, r);
      CMapM A(ac.data() + (int64_t)n * p * q, p, q), B(bc.data() + (int64_t)n * q * r, q, r);
      if (node.parents[0]->requires_grad) {
        if (!node.parents[0]->grad.defined()) node.parents[0]->grad = Tensor(ac.shape());
        MapM GA(node.parents[0]->grad.data() + (int64_t)n * p * q, p, q);
        GA.noalias() += G * B.transpose();
      }
      if (node.parents[1]->requires_grad) {
        if (!node.parents[1]->grad.defined()) node.parents[1]->grad = Tensor(bc.shape());
        MapM GB(node.parents[1]->grad.data() + (int64_t)n * q * r, q, r);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

inline Var transpose12(const Var& x) {
  const Tensor& xv = x.value();
  int N = xv.dim(0), p = xv.dim(1), q = xv.dim(2);
  Tensor y({N, q, p});
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < q; ++j)
        y.data()[((int64_t)n * q + j) * p + i] = xv.data()[((int64_t)n * p + i) * q + j];
  Shape xs = xv.shape();
  return make_op_output(std::move(y), {x}, [xs](Var::Node& node) {
    if (!node.parents[0]->requires_grad) return;
    int N = xs[0], p = xs[1], q = xs[2];
    Tensor g(xs);
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < p; ++i)
        for (int j = 0; j < q; ++j)
          g.data()[((int64_t)n * p + i) * q + j] = node.grad.data()[((int64_t)n * q + j) * p + i];
    node.parents[0]->accum(g);
  });
}

inline Var softmax_last(const Var& x) {
  const Tensor& xv = x.value();
  int L = xv.dim(xv.ndim() - 1);
  int64_t rows = xv.numel() / L;
  Tensor y(xv.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * L;
    double* yr = y.data() + r * L;
    double mx = xr[0];
    for (int i = 1; i < L; ++i) mx = std::max(mx, xr[i]);
    double s = 0.0;
    for (int i = 0; i < L; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      s += yr[i];
    }
    for (int i = 0; i < L; ++i) yr[i] /= s;
  }
  Tensor yc = y;
  return make_op_output(std::move(y), {x}, [yc, L, rows](Var::Node& node) {
    if (!node.parents[0]->requires_grad) return;
    Tensor g(yc.shape());
    for (int64_t r = 0; r < rows; ++r) {
      const double* yr = yc.data() + r * L;
      const double* gr = node.grad.data() + r * L;
      double dot = 0.0;
      for (int i = 0; i < L; ++i) dot += gr[i] * yr[i];
      for (int i = 0; i < L; ++i) g.data()[r * L + i] = yr[i] * (gr[i] - dot);
    }
    node.parents[0]->accum(g);
  });
}

// ------------------------------------------------------------- NCHW utilities

/// Per-(sample,channel) additive bias: x[n,c,:,:] += b[n,c]
inline Var add_bias_nc(const Var& x, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (bv.dim(0) != N || bv.dim(1) != C) throw ShapeError("add_bias_nc: bias shape");
  Tensor y(xv.shape());
  int64_t plane = (int64_t)H * W;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double add = bv.at(n, c);
      const double* xp = xv.data() + ((int64_t)n * C + c) * plane;
      double* yp = y.data() + ((int64_t)n * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) yp[i] = xp[i] + add;
    }
  return make_op_output(std::move(y), {x, b}, [N, C, plane](Var::Node& node) {
    if (node.parents[0]->requires_grad) node.parents[0]->accum(node.grad);
    if (node.parents[1]->requires_grad) {
      Tensor gb({N, C});
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const double* gp = node.grad.data() + ((int64_t)n * C + c) * plane;
          double s = 0.0;
          for (int64_t i = 0; i < plane; ++i) s += gp[i];
          gb.at(n, c) = s;
        }
      node.parents[1]->accum(gb);
    }
  });
}

/// x[n,c,:,:] * (1 + s[n,c]) + t[n,c]
inline Var scale_shift_nc(const Var& x, const Var& s, const Var& t) {
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  const Tensor& tv = t.value();
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Tensor y(xv.shape());
  int64_t plane = (int64_t)H * W;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double sc = 1.0 + sv.at(n, c), sh = tv.at(n, c);
      const double* xp = xv.data() + ((int64_t)n * C + c) * plane;
      double* yp = y.data() + ((int64_t)n * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) yp[i] = xp[i] * sc + sh;
    }
  Tensor xc = xv, sc = sv;
  return make_op_output(std::move(y), {x, s, t}, [xc, sc, N, C, plane](Var::Node& node) {
    if (node.parents[0]->requires_grad) {
      Tensor gx(xc.shape());
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          double k = 1.0 + sc.at(n, c);
          const double* gp = node.grad.data() + ((int64_t)n * C + c) * plane;
          double* gxp = gx.data() + ((int64_t)n * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) gxp[i] = gp[i] * k;
        }
      node.parents[0]->accum(gx);
    }
    if (node.parents[1]->requires_grad) {
      Tensor gs({N, C});
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const double* gp = node.grad.data() + ((int64_t)n * C + c) * plane;
          const double* xp = xc.data() + ((int64_t)n * C + c) * plane;
          double acc = 0.0;
          for (int64_t i = 0; i < plane; ++i) acc += gp[i] * xp[i];
          gs.at(n, c) = acc;
        }
      node.parents[1]->accum(gs);
    }
    if (node.parents[2]->requires_grad) {
      Tensor gt({N, C});
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const double* gp = node.grad.data() + ((int64_t)n * C + c) * plane;
          double acc = 0.0;
          for (int64_t i = 0; i < plane; ++i) acc += gp[i];
          gt.at(n, c) = acc;
        }
      node.parents[2]->accum(gt);
    }
  });
}

/// Broadcast per-sample vectors to per-token: [N,d] -> [N,C,d]
inline Var expand_tokens(const Var& t, int C) {
  const Tensor& tv = t.value();
  int N = tv.dim(0), d = tv.dim(1);
  Tensor y({N, C, d});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      std::copy(tv.data() + (int64_t)n * d, tv.data() + (int64_t)(n + 1) * d,
                y.data() + ((int64_t)n * C + c) * d);
  return make_op_output(std::move(y), {t}, [N, C, d](Var::Node& node) {
    if (!node.parents[0]->requires_grad) return;
    Tensor g({N, d});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < d; ++i)
          g.data()[(int64_t)n * d + i] += node.grad.data()[((int64_t)n * C + c) * d + i];
    node.parents[0]->accum(g);
  });
}

inline Var concat_last(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  int N = av.dim(0), C = av.dim(1), da = av.dim(2), db = bv.dim(2);
  if (bv.dim(0) != N || bv.dim(1) != C) throw ShapeError("concat_last: shape mismatch");
  Tensor y({N, C, da + db});
  for (int64_t r = 0; r < (int64_t)N * C; ++r) {
    std::copy(av.data() + r * da, av.data() + (r + 1) * da, y.data() + r * (da + db));
    std::copy(bv.data() + r * db, bv.data() + (r + 1) * db, y.data() + r * (da + db) + da);
  }
  Shape as = av.shape(), bs = bv.shape();
  return make_op_output(std::move(y), {a, b}, [as, bs, N, C, da, db](Var::Node& node) {
    if (node.parents[0]->requires_grad) {
      Tensor g(as);
      for (int64_t r = 0; r < (int64_t)N * C; ++r)
        std::copy(node.grad.data() + r * (da + db), node.grad.data() + r * (da + db) + da,
                  g.data() + r * da);
      node.parents[0]->accum(g);
    }
    if (node.parents[1]->requires_grad) {
      Tensor g(bs);
      for (int64_t r = 0; r < (int64_t)N * C; ++r)
        std::copy(node.grad.data() + r * (da + db) + da, node.grad.data() + (r + 1) * (da + db),
                  g.data() + r * db);
      node.parents[1]->accum(g);
    }
  });
}

/// Select one index of the last dim: [N,C,d] -> [N,C]
inline Var narrow_last(const Var& x, int idx) {
  const Tensor& xv = x.value();
  int N = xv.dim(0), C = xv.dim(1), d = xv.dim(2);
  Tensor y({N, C});
  for (int64_t r = 0; r < (int64_t)N * C; ++r) y[r] = xv[r * d + idx];
  Shape xs = xv.shape();
  return make_op_output(std::move(y), {x}, [xs, idx](Var::Node& node) {
    if (!node.parents[0]->requires_grad) return;
    int d = xs[2];
    Tensor g(xs);
    for (int64_t r = 0; r < (int64_t)xs[0] * xs[1]; ++r) g[r * d + idx] = node.grad[r];
    node.parents[0]->accum(g);
  });
}

// ----------------------------------------------------------------- pooling

inline Var adaptive_avg_pool(const Var& x, int P) {
  const Tensor& xv = x.value();
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Tensor y({N, C, P, P});
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
    const double* xp = xv.data() + nc * H * W;
    double* yp = y.data() + nc * P * P;
    for (int i = 0; i < P; ++i) {
      int h0 = (int)((int64_t)i * H / P), h1 = (int)((int64_t)(i + 1) * H / P);
      for (int j = 0; j < P; ++j) {
        int w0 = (int)((int64_t)j * W / P), w1 = (int)((int64_t)(j + 1) * W / P);
        double s = 0.0;
        for (int h = h0; h < h1; ++h)
          for (int w = w0; w < w1; ++w) s += xp[(int64_t)h * W + w];
        yp[(int64_t)i * P + j] = s / (double)((h1 - h0) * (w1 - w0));
      }
    }
  }
  Shape xs = xv.shape();
  return make_op_output(std::move(y), {x}, [xs, P](Var::Node& node) {
    if (!node.parents[0]->requires_grad) return;
    int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    Tensor g(xs);
    for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
      const double* gp = node.grad.data() + nc * P * P;
      double* gx = g.data() + nc * H * W;
      for (int i = 0; i < P; ++i) {
        int h0 = (int)((int64_t)i * H / P), h1 = (int)((int64_t)(i + 1) * H / P);
        for (int j = 0; j < P; ++j) {
          int w0 = (int)((int64_t)j * W / P), w1 = (int)((int64_t)(j + 1) * W / P);
          double v = gp[(int64_t)i * P + j] / (double)((h1 - h0) * (w1 - w0));
          for (int h = h0; h < h1; ++h)
            for (int w = w0; w < w1; ++w) gx[(int64_t)h * W + w] += v;
        }
      }
    }
    node.parents[0]->accum(g);
  });
}

inline Var upsample2_nearest(const Var& x) {
  const Tensor& xv = x.value();
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Tensor y({N, C, 2 * H, 2 * W});
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
    const double* xp = xv.data() + nc * H * W;
    double* yp = y.data() + nc * 4 * H * W;
    for (int h = 0; h < 2 * H; ++h)
      for (int w = 0; w < 2 * W; ++w) yp[(int64_t)h * 2 * W + w] = xp[(int64_t)(h / 2) * W + w / 2];
  }
  Shape xs = xv.shape();
  return make_op_output(std::move(y), {x}, [xs](Var::Node& node) {
    if (!node.parents[0]->requires_grad) return;
    int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    Tensor g(xs);
    for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
      const double* gp = node.grad.data() + nc * 4 * H * W;
      double* gx = g.data() + nc * H * W;
      for (int h = 0; h < 2 * H; ++h)
        for (int w = 0; w < 2 * W; ++w) gx[(int64_t)(h / 2) * W + w / 2] += gp[(int64_t)h * 2 * W + w];
    }
    node.parents[0]->accum(g);
  });
}

// -------------------------------------------------------------- convolution

namespace detail {

inline void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int Ho, int Wo, double* col) {
  // col: [C*kh*kw, Ho*Wo]
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        double* row = col + ((int64_t)(c * kh + ky) * kw + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            std::fill(row + (int64_t)oy * Wo, row + (int64_t)(oy + 1) * Wo, 0.0);
            continue;
          }
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * stride - pad + kx;
            row[(int64_t)oy * Wo + ox] = (ix >= 0 && ix < W) ? x[((int64_t)c * H + iy) * W + ix] : 0.0;
          }
        }
      }
}

inline void col2im_add(const double* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                       int Ho, int Wo, double* x) {
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const double* row = col + ((int64_t)(c * kh + ky) * kw + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) x[((int64_t)c * H + iy) * W + ix] += row[(int64_t)oy * Wo + ox];
          }
        }
      }
}

}  // namespace detail

/// Zero-padded cross-correlation; x:[N,Ci,H,W] w:[Co,Ci,kh,kw] b:[Co] or undefined.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride = 1, int pad = -1) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  int N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int Co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != Ci)
    throw ShapeError("conv2d: channel mismatch " + shape_str(xv.shape()) + " vs " +
                     shape_str(wv.shape()));
  if (pad < 0) pad = kh / 2;
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor y({N, Co, Ho, Wo});
  const int K = Ci * kh * kw;
  const bool has_b = b.defined();
  const Tensor bv = has_b ? b.value() : Tensor();
#pragma omp parallel for schedule(static)
  for (int n = 0; n < N; ++n) {
    std::vector<double> col((size_t)K * Ho * Wo);
    detail::im2col(xv.data() + (int64_t)n * Ci * H * W, Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                   col.data());
    CMapM Wm(wv.data(), Co, K), Cm(col.data(), K, Ho * Wo);
    MapM Ym(y.data() + (int64_t)n * Co * Ho * Wo, Co, Ho * Wo);
    Ym.noalias() = Wm * Cm;
    if (has_b)
      for (int o = 0; o < Co; ++o) Ym.row(o).array() += bv[o];
  }
  Tensor xc = xv, wc = wv;
  std::vector<Var> parents = has_b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
  return make_op_output(
      std::move(y), std::move(parents), [xc, wc, stride, pad, Ho, Wo](Var::Node& node) {
        int N = xc.dim(0), Ci = xc.dim(1), H = xc.dim(2), W = xc.dim(3);
        int Co = wc.dim(0), kh = wc.dim(2), kw = wc.dim(3);
        const int K = Ci * kh * kw;
        bool need_x = node.parents[0]->requires_grad;
        bool need_w = node.parents[1]->requires_grad;
        bool need_b = node.parents.size() > 2 && node.parents[2]->requires_grad;
        Tensor gx = need_x ? Tensor(xc.shape()) : Tensor();
        // per-sample weight grads, reduced in deterministic order afterwards
        std::vector<Tensor> gw_per(need_w ? (size_t)N : 0);
#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n) {
          std::vector<double> col((size_t)K * Ho * Wo);
          detail::im2col(xc.data() + (int64_t)n * Ci * H * W, Ci, H, W, kh, kw, stride, pad, Ho,
                         Wo, col.data());
          CMapM G(node.grad.data() + (int64_t)n * Co * Ho * Wo, Co, Ho * Wo);
          CMapM Wm(wc.data(), Co, K), Cm(col.data(), K, Ho * Wo);
          if (need_w) {
            gw_per[(size_t)n] = Tensor(wc.shape());
            MapM GW(gw_per[(size_t)n].data(), Co, K);
            GW.noalias() = G * Cm.transpose();
          }
          if (need_x) {
            std::vector<double> gcol((size_t)K * Ho * Wo);
            MapM GC(gcol.data(), K, Ho * Wo);
            GC.noalias() = Wm.transpose() * G;
            detail::col2im_add(gcol.data(), Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                               gx.data() + (int64_t)n * Ci * H * W);
          }
        }
        if (need_x) node.parents[0]->accum(gx);
        if (need_w) {
          Tensor gw(wc.shape());
          for (int n = 0; n < N; ++n)
            for (int64_t i = 0; i < gw.numel(); ++i) gw[i] += gw_per[(size_t)n][i];
          node.parents[1]->accum(gw);
        }
        if (need_b) {
          Tensor gb({Co});
          for (int n = 0; n < N; ++n)
            for (int o = 0; o < Co; ++o) {
              const double* gp = node.grad.data() + ((int64_t)n * Co + o) * Ho * Wo;
              double s = 0.0;
              for (int64_t i = 0; i < (int64_t)Ho * Wo; ++i) s += gp[i];
              gb[o] += s;
            }
          node.parents[2]->accum(gb);
        }
      });
}

// ------------------------------------------------------------- normalization

/// GroupNorm over NCHW; gamma/beta per channel.
inline Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta,
                      double eps = 1e-5) {
  const Tensor& xv = x.value();
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  int cg = C / groups;
  int64_t m = (int64_t)cg * H * W;
  Tensor xhat(xv.shape());
  Tensor istd({N, groups});
  int64_t plane = (int64_t)H * W;
  for (int n = 0; n < N; ++n)
    for (int g = 0; g < groups; ++g) {
      const double* xp = xv.data() + ((int64_t)n * C + (int64_t)g * cg) * plane;
      double mu = 0.0;
      for (int64_t i = 0; i < m; ++i) mu += xp[i];
      mu /= (double)m;
      double var = 0.0;
      for (int64_t i = 0; i < m; ++i) var += (xp[i] - mu) * (xp[i] - mu);
      var /= (double)m;
      double is = 1.0 / std::sqrt(var + eps);
      istd.at(n, g) = is;
      double* hp = xhat.data() + ((int64_t)n * C + (int64_t)g * cg) * plane;
      for (int64_t i = 0; i < m; ++i) hp[i] = (xp[i] - mu) * is;
    }
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor y(xv.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* hp = xhat.data() + ((int64_t)n * C + c) * plane;
      double* yp = y.data() + ((int64_t)n * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) yp[i] = gv[c] * hp[i] + bv[c];
    }
  Tensor xh = xhat, is = istd, gc = gv;
  return make_op_output(std::move(y), {x, gamma, beta}, [xh, is, gc, groups, cg,
                                                         plane](Var::Node& node) {
    int N = xh.dim(0), C = xh.dim(1);
    int64_t m = (int64_t)cg * plane;
    if (node.parents[1]->requires_grad) {
      Tensor gg({C});
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const double* hp = xh.data() + ((int64_t)n * C + c) * plane;
          const double* gp = node.grad.data() + ((int64_t)n * C + c) * plane;
          double s = 0.0;
          for (int64_t i = 0; i < plane; ++i) s += gp[i] * hp[i];
          gg[c] += s;
        }
      node.parents[1]->accum(gg);
    }
    if (node.parents[2]->requires_grad) {
      Tensor gb({C});
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const double* gp = node.grad.data() + ((int64_t)n * C + c) * plane;
          double s = 0.0;
          for (int64_t i = 0; i < plane; ++i) s += gp[i];
          gb[c] += s;
        }
      node.parents[2]->accum(gb);
    }
    if (node.parents[0]->requires_grad) {
      Tensor gx(xh.shape());
      for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
          // dxhat for the group
          double mean_d = 0.0, mean_dh = 0.0;
          for (int c0 = 0; c0 < cg; ++c0) {
            int c = g * cg + c0;
            const double* gp = node.grad.data() + ((int64_t)n * C + c) * plane;
            const double* hp = xh.data() + ((int64_t)n * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
              double d = gp[i] * gc[c];
              mean_d += d;
              mean_dh += d * hp[i];
            }
          }
          mean_d /= (double)m;
          mean_dh /= (double)m;
          double isv = is.at(n, g);
          for (int c0 = 0; c0 < cg; ++c0) {
            int c = g * cg + c0;
            const double* gp = node.grad.data() + ((int64_t)n * C + c) * plane;
            const double* hp = xh.data() + ((int64_t)n * C + c) * plane;
            double* gxp = gx.data() + ((int64_t)n * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
              double d = gp[i] * gc[c];
              gxp[i] = isv * (d - mean_d - hp[i] * mean_dh);
            }
          }
        }
      node.parents[0]->accum(gx);
    }
  });
}

/// BatchNorm2d with batch statistics (training path); stats returned for the
/// layer to fold into running estimates. Eval path is batch_norm_eval below.
struct BatchStats {
  Tensor mean;  // [C]
  Tensor var;   // [C], biased
};

inline Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, BatchStats* out_stats,
                            double eps = 1e-5) {
  const Tensor& xv = x.value();
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int64_t plane = (int64_t)H * W;
  int64_t m = (int64_t)N * plane;
  Tensor mean({C}), var({C});
  for (int c = 0; c < C; ++c) {
    double mu = 0.0;
    for (int n = 0; n < N; ++n) {
      const double* xp = xv.data() + ((int64_t)n * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) mu += xp[i];
    }
    mu /= (double)m;
    double v = 0.0;
    for (int n = 0; n < N; ++n) {
      const double* xp = xv.data() + ((int64_t)n * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) v += (xp[i] - mu) * (xp[i] - mu);
    }
    v /= (double)m;
    mean[c] = mu;
    var[c] = v;
  }
  if (out_stats) {
    out_stats->mean = mean.clone();
    out_stats->var = var.clone();
  }
  Tensor xhat(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor y(xv.shape());
  Tensor istd({C});
  for (int c = 0; c < C; ++c) istd[c] = 1.0 / std::sqrt(var[c] + eps);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* xp = xv.data() + ((int64_t)n * C + c) * plane;
      double* hp = xhat.data() + ((int64_t)n * C + c) * plane;
      double* yp = y.data() + ((int64_t)n * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        hp[i] = (xp[i] - mean[c]) * istd[c];
        yp[i] = gv[c] * hp[i] + bv[c];
      }
    }
  Tensor xh = xhat, is = istd, gc = gv;
  return make_op_output(std::move(y), {x, gamma, beta}, [xh, is, gc, plane](Var::Node& node) {
    int N = xh.dim(0), C = xh.dim(1);
    int64_t m = (int64_t)N * plane;
    if (node.parents[1]->requires_grad || node.parents[2]->requires_grad) {
      Tensor gg({C}), gb({C});
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const double* hp = xh.data() + ((int64_t)n * C + c) * plane;
          const double* gp = node.grad.data() + ((int64_t)n * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            gg[c] += gp[i] * hp[i];
            gb[c] += gp[i];
          }
        }
      if (node.parents[1]->requires_grad) node.parents[1]->accum(gg);
      if (node.parents[2]->requires_grad) node.parents[2]->accum(gb);
    }
    if (node.parents[0]->requires_grad) {
      int Nn = xh.dim(0);
      Tensor gx(xh.shape());
      for (int c = 0; c < C; ++c) {
        double mean_d = 0.0, mean_dh = 0.0;
        for (int n = 0; n < Nn; ++n) {
          const double* gp = node.grad.data() + ((int64_t)n * C + c) * plane;
          const double* hp = xh.data() + ((int64_t)n * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            double d = gp[i] * gc[c];
            mean_d += d;
            mean_dh += d * hp[i];
          }
        }
        mean_d /= (double)m;
        mean_dh /= (double)m;
        for (int n = 0; n < Nn; ++n) {
          const double* gp = node.grad.data() + ((int64_t)n * C + c) * plane;
          const double* hp = xh.data() + ((int64_t)n * C + c) * plane;
          double* gxp = gx.data() + ((int64_t)n * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            double d = gp[i] * gc[c];
            gxp[i] = is[c] * (d - mean_d - hp[i] * mean_dh);
          }
        }
      }
      node.parents[0]->accum(gx);
    }
  });
}

inline Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, const Tensor& rmean,
                           const Tensor& rvar, double eps = 1e-5) {
  const Tensor& xv = x.value();
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int64_t plane = (int64_t)H * W;
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor y(xv.shape());
  Tensor scale({C}), shift({C});
  for (int c = 0; c < C; ++c) {
    scale[c] = gv[c] / std::sqrt(rvar[c] + eps);
    shift[c] = bv[c] - scale[c] * rmean[c];
  }
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* xp = xv.data() + ((int64_t)n * C + c) * plane;
      double* yp = y.data() + ((int64_t)n * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) yp[i] = scale[c] * xp[i] + shift[c];
    }
  Tensor sc = scale;
  Tensor xc = xv;
  return make_op_output(std::move(y), {x, gamma, beta}, [sc, xc, plane](Var::Node& node) {
    int N = xc.dim(0), C = xc.dim(1);
    if (node.parents[0]->requires_grad) {
      Tensor gx(xc.shape());
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const double* gp = node.grad.data() + ((int64_t)n * C + c) * plane;
          double* gxp = gx.data() + ((int64_t)n * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) gxp[i] = gp[i] * sc[c];
        }
      node.parents[0]->accum(gx);
    }
    // gamma/beta grads of the eval path are not needed (connector trains with
    // batch statistics); inference runs under NoGradGuard anyway.
  });
}

// ---------------------------------------------------------- Fourier high-pass

/// Remove the centered low-frequency box (side = ceil(rho * dim) per axis) from
/// each channel's 2-D spectrum; returns the real part. The map is linear and
/// self-adjoint, so the backward pass applies the same filter to the gradient.
inline Tensor fmim_highpass_plain(const Tensor& xv, double rho) {
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int sh = (int)std::ceil(rho * H), sw = (int)std::ceil(rho * W);
  sh = std::min(sh, H);
  sw = std::min(sw, W);
  Tensor y(xv.shape());
  int64_t plane = (int64_t)H * W;
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < (int64_t)N * C; ++nc) {
    std::vector<fftutil::cplx> p((size_t)plane);
    const double* xp = xv.data() + nc * plane;
    for (int64_t i = 0; i < plane; ++i) p[(size_t)i] = fftutil::cplx(xp[i], 0.0);
    fftutil::fft2(p, H, W, false);
    for (int r = 0; r < H; ++r) {
      bool rlow = fftutil::in_centered_box(r, H, sh);
      for (int c = 0; c < W; ++c)
        if (rlow && fftutil::in_centered_box(c, W, sw)) p[(size_t)r * W + c] = 0.0;
    }
    fftutil::fft2(p, H, W, true);
    double* yp = y.data() + nc * plane;
    for (int64_t i = 0; i < plane; ++i) yp[i] = p[(size_t)i].real();
  }
  return y;
}

inline Var fmim_highpass(const Var& x, double rho) {
  if (x.value().dim(2) < 4 || x.value().dim(3) < 4)
    throw ShapeError("fmim_highpass: spatial dims must be >= 4");
  Tensor y = fmim_highpass_plain(x.value(), rho);
  return make_op_output(std::move(y), {x}, [rho](Var::Node& node) {
    if (!node.parents[0]->requires_grad) return;
    node.parents[0]->accum(fmim_highpass_plain(node.grad, rho));
  });
}

}  // namespace fose::nn
