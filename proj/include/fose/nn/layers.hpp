#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fose/core/rng.hpp"
#include "fose/nn/ops.hpp"

namespace fose::nn {

struct NamedParam {
  std::string name;
  Var var;
};

/// One row of an analytic cost tally (parameter count + multiply-accumulates
/// per forward at a stated input size).
struct CostItem {
  std::string name;
  int64_t params = 0;
  int64_t macs = 0;
};

/// Base for stateful layers/networks. Parameters are visited by name for the
/// optimizer, checkpoints and digests; buffers cover non-trainable state
/// (BatchNorm running stats, frozen ARConv size maps).
class Module {
 public:
  virtual ~Module() = default;
  virtual void visit_params(const std::string& prefix,
                            const std::function<void(const std::string&, Var&)>& f) = 0;
  virtual void visit_buffers(const std::string&,
                             const std::function<void(const std::string&, Tensor&)>&) {}

  std::vector<NamedParam> parameters() {
    std::vector<NamedParam> out;
    visit_params("", [&](const std::string& n, Var& v) { out.push_back({n, v}); });
    return out;
  }

  int64_t param_count() {
    int64_t n = 0;
    visit_params("", [&](const std::string&, Var& v) { n += v.value().numel(); });
    return n;
  }

  void set_requires_grad(bool b) {
    visit_params("", [&](const std::string&, Var& v) { v.set_requires_grad(b); });
  }
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

// --------------------------------------------------------------------- LoRA

/// Additive low-rank factors over a frozen base matrix: base + (alpha/rank) A B.
struct LowRankAdapter {
  bool active = false;
  int rank = 0;
  double alpha = 16.0;
  Var a;  // [rows, rank]
  Var b;  // [rank, cols]

  void init(int rows, int cols, int r, double al, Rng& rng) {
    rank = r;
    alpha = al;
    Tensor at({rows, r});
    double std = 1.0 / std::sqrt((double)cols);
    for (int64_t i = 0; i < at.numel(); ++i) at[i] = rng.normal() * std;
    a = Var(at, true);
    b = Var(Tensor({r, cols}), true);  // zero: adapted layer == base at init
    active = true;
  }

  Var delta(const Shape& weight_shape) const {
    Var d = matmul(a, b);
    d = vscale(d, alpha / (double)rank);
    return view(d, weight_shape);
  }

  int64_t trainable_count() const {
    return active ? a.value().numel() + b.value().numel() : 0;
  }
};

// -------------------------------------------------------------------- Conv2d

class Conv2d : public Module {
 public:
  Conv2d() = default;
  Conv2d(int ci, int co, int k, Rng& rng, bool zero_init = false, int stride = 1, int pad = -1,
         bool bias = true)
      : ci_(ci), co_(co), k_(k), stride_(stride), pad_(pad < 0 ? k / 2 : pad) {
    Tensor wt({co, ci, k, k});
    if (!zero_init) {
      double std = std::sqrt(2.0 / ((double)ci * k * k));
      for (int64_t i = 0; i < wt.numel(); ++i) wt[i] = rng.normal() * std;
    }
    w_ = Var(wt, true);
    if (bias) b_ = Var(Tensor({co}), true);
  }

  Var effective_weight() const {
    if (!lora_.active) return w_;
    return vadd(w_, lora_.delta(w_.value().shape()));
  }

  Var forward(const Var& x) const { return conv2d(x, effective_weight(), b_, stride_, pad_); }

  void add_lora(int rank, double alpha, Rng& rng) {
    lora_.init(co_, ci_ * k_ * k_, rank, alpha, rng);
  }

  void merge_lora() {
    if (!lora_.active) return;
    NoGradGuard ng;
    Tensor merged = vadd(w_, lora_.delta(w_.value().shape())).value();
    w_ = Var(merged, w_.requires_grad());
    lora_ = LowRankAdapter{};
  }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Var&)>& f) override {
    f(join_name(prefix, "w"), w_);
    if (b_.defined()) f(join_name(prefix, "b"), b_);
    if (lora_.active) {
      f(join_name(prefix, "lora_a"), lora_.a);
      f(join_name(prefix, "lora_b"), lora_.b);
    }
  }

  int in_channels() const { return ci_; }
  int out_channels() const { return co_; }
  int kernel() const { return k_; }
  int stride() const { return stride_; }
  const LowRankAdapter& lora() const { return lora_; }
  Var& weight() { return w_; }
  Var& bias() { return b_; }

  int64_t weight_param_count() const {
    return (int64_t)co_ * ci_ * k_ * k_ + (b_.defined() ? co_ : 0);
  }
  /// Multiply-accumulates for an Ho x Wo output.
  int64_t macs(int ho, int wo) const { return (int64_t)k_ * k_ * ci_ * co_ * ho * wo; }

 private:
  int ci_ = 0, co_ = 0, k_ = 0, stride_ = 1, pad_ = 0;
  Var w_, b_;
  LowRankAdapter lora_;
};

// -------------------------------------------------------------------- Linear

class Linear : public Module {
 public:
  Linear() = default;
  Linear(int in, int out, Rng& rng, bool zero_init = false) : in_(in), out_(out) {
    Tensor wt({out, in});
    if (!zero_init) {
      double std = std::sqrt(2.0 / (double)in);
      for (int64_t i = 0; i < wt.numel(); ++i) wt[i] = rng.normal() * std;
    }
    w_ = Var(wt, true);
    b_ = Var(Tensor({out}), true);
  }

  Var effective_weight() const {
    if (!lora_.active) return w_;
    return vadd(w_, lora_.delta(w_.value().shape()));
  }

  Var forward(const Var& x) const { return linear(x, effective_weight(), b_); }

  /// [N,C,in] -> [N,C,out]
  Var forward_tokens(const Var& x) const {
    int N = x.shape()[0], C = x.shape()[1];
    Var flat = view(x, {N * C, in_});
    return view(forward(flat), {N, C, out_});
  }

  void add_lora(int rank, double alpha, Rng& rng) { lora_.init(out_, in_, rank, alpha, rng); }

  void merge_lora() {
    if (!lora_.active) return;
    NoGradGuard ng;
    Tensor merged = vadd(w_, lora_.delta(w_.value().shape())).value();
    w_ = Var(merged, w_.requires_grad());
    lora_ = LowRankAdapter{};
  }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Var&)>& f) override {
    f(join_name(prefix, "w"), w_);
    f(join_name(prefix, "b"), b_);
    if (lora_.active) {
      f(join_name(prefix, "lora_a"), lora_.a);
      f(join_name(prefix, "lora_b"), lora_.b);
    }
  }

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Var& weight() { return w_; }
  Var& bias() { return b_; }
  const LowRankAdapter& lora() const { return lora_; }
  int64_t weight_param_count() const { return (int64_t)in_ * out_ + out_; }
  int64_t macs(int tokens) const { return (int64_t)in_ * out_ * tokens; }

 private:
  int in_ = 0, out_ = 0;
  Var w_, b_;
  LowRankAdapter lora_;
};

// ----------------------------------------------------------------- GroupNorm

class GroupNorm : public Module {
 public:
  GroupNorm() = default;
  explicit GroupNorm(int channels, int groups = -1) : channels_(channels) {
    groups_ = groups > 0 ? groups : (channels % 8 == 0 ? 8 : channels);
    gamma_ = Var(Tensor({channels}, 1.0), true);
    beta_ = Var(Tensor({channels}), true);
  }

  Var forward(const Var& x) const { return group_norm(x, groups_, gamma_, beta_); }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Var&)>& f) override {
    f(join_name(prefix, "gamma"), gamma_);
    f(join_name(prefix, "beta"), beta_);
  }

  int64_t weight_param_count() const { return 2LL * channels_; }

 private:
  int channels_ = 0, groups_ = 1;
  Var gamma_, beta_;
};

// --------------------------------------------------------------- BatchNorm2d

class BatchNorm2d : public Module {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels, double momentum = 0.1)
      : channels_(channels), momentum_(momentum) {
    gamma_ = Var(Tensor({channels}, 1.0), true);
    beta_ = Var(Tensor({channels}), true);
    running_mean_ = Tensor({channels});
    running_var_ = Tensor({channels}, 1.0);
  }

  /// Training path updates the running estimates with batch statistics.
  Var forward(const Var& x, bool training) {
    if (training) {
      BatchStats st;
      Var y = batch_norm_train(x, gamma_, beta_, &st);
      for (int c = 0; c < channels_; ++c) {
        running_mean_[c] = (1.0 - momentum_) * running_mean_[c] + momentum_ * st.mean[c];
        running_var_[c] = (1.0 - momentum_) * running_var_[c] + momentum_ * st.var[c];
      }
      return y;
    }
    return batch_norm_eval(x, gamma_, beta_, running_mean_, running_var_);
  }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Var&)>& f) override {
    f(join_name(prefix, "gamma"), gamma_);
    f(join_name(prefix, "beta"), beta_);
  }

  void visit_buffers(const std::string& prefix,
                     const std::function<void(const std::string&, Tensor&)>& f) override {
    f(join_name(prefix, "running_mean"), running_mean_);
    f(join_name(prefix, "running_var"), running_var_);
  }

  int64_t weight_param_count() const { return 2LL * channels_; }

 private:
  int channels_ = 0;
  double momentum_ = 0.1;
  Var gamma_, beta_;
  Tensor running_mean_, running_var_;
};

// ------------------------------------------------------------ time embedding

inline Tensor sinusoidal_embedding(int t, int dim) {
  if (dim % 2 != 0) throw ShapeError("sinusoidal_embedding: dim must be even");
  int half = dim / 2;
  Tensor e({dim});
  for (int k = 0; k < half; ++k) {
    double freq = std::exp(-std::log(10000.0) * (double)k / (double)half);
    e[k] = std::sin(t * freq);
    e[half + k] = std::cos(t * freq);
  }
  return e;
}

/// Sinusoid of the timestep followed by a two-layer learned projection.
class TimeEmbedding : public Module {
 public:
  TimeEmbedding() = default;
  TimeEmbedding(int sin_dim, int out_dim, Rng& rng)
      : sin_dim_(sin_dim), out_dim_(out_dim), l1_(sin_dim, out_dim, rng), l2_(out_dim, out_dim, rng) {}

  /// One embedding per batch element.
  Var forward(const std::vector<int>& ts) const {
    Tensor s({(int)ts.size(), sin_dim_});
    for (size_t n = 0; n < ts.size(); ++n) {
      Tensor e = sinusoidal_embedding(ts[n], sin_dim_);
      std::copy(e.data(), e.data() + sin_dim_, s.data() + (int64_t)n * sin_dim_);
    }
    return l2_.forward(vsilu(l1_.forward(Var(s))));
  }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Var&)>& f) override {
    l1_.visit_params(join_name(prefix, "l1"), f);
    l2_.visit_params(join_name(prefix, "l2"), f);
  }

  int out_dim() const { return out_dim_; }
  int64_t weight_param_count() const {
    return l1_.weight_param_count() + l2_.weight_param_count();
  }

 private:
  int sin_dim_ = 0, out_dim_ = 0;
  Linear l1_, l2_;
};

}  // namespace fose::nn
