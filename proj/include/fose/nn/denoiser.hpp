#pragma once

#include <memory>

#include "fose/nn/apfm.hpp"
#include "fose/nn/arconv.hpp"
#include "fose/nn/layers.hpp"

namespace fose::nn {

struct DenoiserConfig {
  int bands = 8;
  int base_channels = 16;  // 128 at publication scale
  int num_scales = 3;
  int blocks_per_scale = 2;
  bool arconv_enabled = true;
  int arconv_kmax = 7;
  int arconv_grid = 3;
  double fmim_rho = 0.25;
  int time_embed_dim = 0;  // 0 -> 4 * base_channels
  int apfm_pool = 4;

  int temb_dim() const { return time_embed_dim > 0 ? time_embed_dim : 4 * base_channels; }
  void validate() const {
    if (base_channels < 4) throw ShapeError("denoiser: base_channels must be >= 4");
    if (base_channels % 2 != 0) throw ShapeError("denoiser: base_channels must be even");
    if (!(fmim_rho > 0.0 && fmim_rho < 1.0)) throw ShapeError("denoiser: rho must lie in (0,1)");
    if (num_scales < 1) throw ShapeError("denoiser: num_scales must be >= 1");
  }
};

/// Pre-activation residual block with time-embedding bias between the two
/// convolutions; ARConv replaces both convolutions when enabled.
class ResBlock : public Module {
 public:
  ResBlock() = default;
  ResBlock(int ci, int co, int temb_dim, Rng& rng, bool use_arconv, int kmax, int grid)
      : ci_(ci), co_(co), use_ar_(use_arconv) {
    gn1_ = GroupNorm(ci);
    gn2_ = GroupNorm(co);
    tproj_ = Linear(temb_dim, co, rng);
    if (use_arconv) {
      a1_ = ARConv(ci, co, rng, kmax, grid);
      a2_ = ARConv(co, co, rng, kmax, grid);
    } else {
      c1_ = Conv2d(ci, co, 3, rng);
      c2_ = Conv2d(co, co, 3, rng);
    }
    if (ci != co) skip_ = Conv2d(ci, co, 1, rng);
  }

  Var forward(const Var& x, const Var& t_emb) {
    Var h = vsilu(gn1_.forward(x));
    h = use_ar_ ? a1_.forward(h) : c1_.forward(h);
    h = add_bias_nc(h, tproj_.forward(t_emb));
    h = vsilu(gn2_.forward(h));
    h = use_ar_ ? a2_.forward(h) : c2_.forward(h);
    return vadd(h, ci_ != co_ ? skip_.forward(x) : x);
  }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Var&)>& f) override {
    gn1_.visit_params(join_name(prefix, "gn1"), f);
    gn2_.visit_params(join_name(prefix, "gn2"), f);
    tproj_.visit_params(join_name(prefix, "tproj"), f);
    if (use_ar_) {
      a1_.visit_params(join_name(prefix, "ar1"), f);
      a2_.visit_params(join_name(prefix, "ar2"), f);
    } else {
      c1_.visit_params(join_name(prefix, "c1"), f);
      c2_.visit_params(join_name(prefix, "c2"), f);
    }
    if (ci_ != co_) skip_.visit_params(join_name(prefix, "skip"), f);
  }

  void visit_buffers(const std::string& prefix,
                     const std::function<void(const std::string&, Tensor&)>& f) override {
    if (use_ar_) {
      a1_.visit_buffers(join_name(prefix, "ar1"), f);
      a2_.visit_buffers(join_name(prefix, "ar2"), f);
    }
  }

  template <typename Fn>
  void visit_arconv(Fn&& fn) {
    if (use_ar_) {
      fn(a1_);
      fn(a2_);
    }
  }

  ARConv& ar1() { return a1_; }
  ARConv& ar2() { return a2_; }
  Conv2d& c1() { return c1_; }
  Conv2d& c2() { return c2_; }
  Conv2d& skip() { return skip_; }
  Linear& tproj() { return tproj_; }
  bool uses_arconv() const { return use_ar_; }
  bool has_skip() const { return ci_ != co_; }

  int64_t macs(int h, int w) const {
    int64_t m = use_ar_ ? a1_.macs(h, w) + a2_.macs(h, w) : c1_.macs(h, w) + c2_.macs(h, w);
    if (ci_ != co_) m += skip_.macs(h, w);
    m += tproj_.macs(1);
    m += 2LL * (int64_t)(ci_ + co_) * h * w;  // normalization scale+shift
    return m;
  }

 private:
  int ci_ = 0, co_ = 0;
  bool use_ar_ = false;
  GroupNorm gn1_, gn2_;
  Conv2d c1_, c2_, skip_;
  ARConv a1_, a2_;
  Linear tproj_;
};

/// Two-branch x0-predicting denoiser: the spectral branch consumes
/// concat(x_t, lms), the panchromatic branch consumes pan with a Fourier
/// high-pass injected at every scale, and APFM fuses the branches per scale in
/// a multiscale encoder-decoder. The output head is zero-initialized.
class DenoiserNet : public Module {
 public:
  DenoiserNet() = default;
  DenoiserNet(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    int B = cfg.base_channels, S = cfg.num_scales, td = cfg.temb_dim();
    temb_ = TimeEmbedding(B % 2 == 0 ? B : B + 1, td, rng);
    spec_in_ = Conv2d(2 * cfg.bands, B, 3, rng);
    pan_in_ = Conv2d(1, B, 3, rng);
    for (int s = 0; s < S; ++s) {
      int ch = B << s;
      std::vector<ResBlock> sb, pb;
      for (int i = 0; i < cfg.blocks_per_scale; ++i) {
        sb.emplace_back(ch, ch, td, rng, cfg.arconv_enabled, cfg.arconv_kmax, cfg.arconv_grid);
        pb.emplace_back(ch, ch, td, rng, cfg.arconv_enabled, cfg.arconv_kmax, cfg.arconv_grid);
      }
      spec_blocks_.push_back(std::move(sb));
      pan_blocks_.push_back(std::move(pb));
      apfm_.emplace_back(ch, td, rng, cfg.apfm_pool);
      if (s + 1 < S) {
        spec_down_.emplace_back(ch, ch * 2, 3, rng, false, 2);
        pan_down_.emplace_back(ch, ch * 2, 3, rng, false, 2);
      }
    }
    for (int d = S - 1; d >= 1; --d) {
      int ch = B << d;
      up_.emplace_back(ch, ch / 2, 3, rng);
      merge_.emplace_back(ch, ch / 2, 3, rng);  // concat(ch/2, skip ch/2)
      std::vector<ResBlock> db;
      for (int i = 0; i < cfg.blocks_per_scale; ++i)
        db.emplace_back(ch / 2, ch / 2, td, rng, cfg.arconv_enabled, cfg.arconv_kmax,
                        cfg.arconv_grid);
      dec_blocks_.push_back(std::move(db));
    }
    head_norm_ = GroupNorm(B);
    head_ = Conv2d(B, cfg.bands, 3, rng, /*zero_init=*/true);
  }

  const DenoiserConfig& config() const { return cfg_; }

  /// x_t: [N,C,H,W] residual state; pan: [N,1,H,W]; lms: [N,C,H,W];
  /// one timestep per sample.
  Var forward(const Var& x_t, const Var& pan, const Var& lms, const std::vector<int>& ts) {
    const Shape& xs = x_t.shape();
    if (lms.shape() != xs) throw ShapeError("denoiser: lms/x_t misaligned");
    if (pan.shape()[2] != xs[2] || pan.shape()[3] != xs[3])
      throw ShapeError("denoiser: pan misaligned with x_t");
    if ((int)ts.size() != xs[0]) throw ShapeError("denoiser: one timestep per sample");

    Var te = temb_.forward(ts);
    Var hs = spec_in_.forward(concat_ch(x_t, lms));
    Var hp = pan_in_.forward(pan);
    std::vector<Var> skips;
    int S = cfg_.num_scales;
    for (int s = 0; s < S; ++s) {
      hp = vadd(hp, fmim_highpass(hp, cfg_.fmim_rho));
      for (auto& b : pan_blocks_[(size_t)s]) hp = b.forward(hp, te);
      for (auto& b : spec_blocks_[(size_t)s]) hs = b.forward(hs, te);
      hs = apfm_[(size_t)s].forward(hp, hs, te);
      if (s + 1 < S) {
        skips.push_back(hs);
        hs = spec_down_[(size_t)s].forward(hs);
        hp = pan_down_[(size_t)s].forward(hp);
      }
    }
    Var h = hs;
    for (size_t d = 0; d < up_.size(); ++d) {
      h = up_[d].forward(upsample2_nearest(h));
      h = merge_[d].forward(concat_ch(h, skips[skips.size() - 1 - d]));
      for (auto& b : dec_blocks_[d]) h = b.forward(h, te);
    }
    return head_.forward(vsilu(head_norm_.forward(h)));
  }

  /// Convenience for samplers: plain-tensor call, no tape.
  Tensor denoise(const Tensor& x_t, const Tensor& pan, const Tensor& lms, int t) {
    NoGradGuard ng;
    std::vector<int> ts((size_t)x_t.dim(0), t);
    return forward(Var(x_t), Var(pan), Var(lms), ts).value();
  }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Var&)>& f) override {
    temb_.visit_params(join_name(prefix, "temb"), f);
    spec_in_.visit_params(join_name(prefix, "spec_in"), f);
    pan_in_.visit_params(join_name(prefix, "pan_in"), f);
    for (size_t s = 0; s < spec_blocks_.size(); ++s) {
      std::string ss = "s" + std::to_string(s);
      for (size_t i = 0; i < spec_blocks_[s].size(); ++i)
        spec_blocks_[s][i].visit_params(join_name(prefix, ss + ".spec" + std::to_string(i)), f);
      for (size_t i = 0; i < pan_blocks_[s].size(); ++i)
        pan_blocks_[s][i].visit_params(join_name(prefix, ss + ".pan" + std::to_string(i)), f);
      apfm_[s].visit_params(join_name(prefix, ss + ".apfm"), f);
    }
    for (size_t d = 0; d < spec_down_.size(); ++d) {
      spec_down_[d].visit_params(join_name(prefix, "down" + std::to_string(d) + ".spec"), f);
      pan_down_[d].visit_params(join_name(prefix, "down" + std::to_string(d) + ".pan"), f);
    }
    for (size_t d = 0; d < up_.size(); ++d) {
      up_[d].visit_params(join_name(prefix, "up" + std::to_string(d)), f);
      merge_[d].visit_params(join_name(prefix, "merge" + std::to_string(d)), f);
      for (size_t i = 0; i < dec_blocks_[d].size(); ++i)
        dec_blocks_[d][i].visit_params(
            join_name(prefix, "dec" + std::to_string(d) + ".b" + std::to_string(i)), f);
    }
    head_norm_.visit_params(join_name(prefix, "head_norm"), f);
    head_.visit_params(join_name(prefix, "head"), f);
  }

  void visit_buffers(const std::string& prefix,
                     const std::function<void(const std::string&, Tensor&)>& f) override {
    for (size_t s = 0; s < spec_blocks_.size(); ++s) {
      std::string ss = "s" + std::to_string(s);
      for (size_t i = 0; i < spec_blocks_[s].size(); ++i)
        spec_blocks_[s][i].visit_buffers(join_name(prefix, ss + ".spec" + std::to_string(i)), f);
      for (size_t i = 0; i < pan_blocks_[s].size(); ++i)
        pan_blocks_[s][i].visit_buffers(join_name(prefix, ss + ".pan" + std::to_string(i)), f);
    }
    for (size_t d = 0; d < up_.size(); ++d)
      for (size_t i = 0; i < dec_blocks_[d].size(); ++i)
        dec_blocks_[d][i].visit_buffers(
            join_name(prefix, "dec" + std::to_string(d) + ".b" + std::to_string(i)), f);
  }

  template <typename Fn>
  void visit_arconv(Fn&& fn) {
    for (auto& sv : spec_blocks_)
      for (auto& b : sv) b.visit_arconv(fn);
    for (auto& pv : pan_blocks_)
      for (auto& b : pv) b.visit_arconv(fn);
    for (auto& dv : dec_blocks_)
      for (auto& b : dv) b.visit_arconv(fn);
  }

  /// Apply fn to every Conv2d and Linear; ARConv banks are visited separately.
  template <typename ConvFn, typename LinFn, typename ArFn>
  void visit_layers(ConvFn&& cf, LinFn&& lf, ArFn&& af) {
    auto do_res = [&](ResBlock& b) {
      if (b.uses_arconv()) {
        af(b.ar1());
        af(b.ar2());
        cf(b.ar1().head_a());
        cf(b.ar1().head_b());
        cf(b.ar2().head_a());
        cf(b.ar2().head_b());
      } else {
        cf(b.c1());
        cf(b.c2());
      }
      if (b.has_skip()) cf(b.skip());
      lf(b.tproj());
    };
    cf(spec_in_);
    cf(pan_in_);
    for (auto& sv : spec_blocks_)
      for (auto& b : sv) do_res(b);
    for (auto& pv : pan_blocks_)
      for (auto& b : pv) do_res(b);
    for (auto& a : apfm_) a.visit_linear(lf);
    for (auto& c : spec_down_) cf(c);
    for (auto& c : pan_down_) cf(c);
    for (auto& c : up_) cf(c);
    for (auto& c : merge_) cf(c);
    for (auto& dv : dec_blocks_)
      for (auto& b : dv) do_res(b);
    cf(head_);
  }

  void add_lora_all(int rank, double alpha, Rng& rng) {
    visit_layers([&](Conv2d& c) { c.add_lora(rank, alpha, rng); },
                 [&](Linear& l) { l.add_lora(rank, alpha, rng); },
                 [&](ARConv& a) { a.add_lora(rank, alpha, rng); });
  }

  void merge_lora_all() {
    visit_layers([](Conv2d& c) { c.merge_lora(); }, [](Linear& l) { l.merge_lora(); },
                 [](ARConv& a) { a.merge_lora(); });
  }

  bool has_lora() const {
    bool any = false;
    auto& self = *const_cast<DenoiserNet*>(this);
    self.visit_layers([&](Conv2d& c) { any = any || c.lora().active; },
                      [&](Linear& l) { any = any || l.lora().active; },
                      [&](ARConv& a) { any = any || a.lora().active; });
    return any;
  }

  Conv2d& head() { return head_; }
  APFM& apfm_at(int s) { return apfm_[(size_t)s]; }

  /// Analytic parameter/MAC tally at an H x W input.
  std::vector<CostItem> cost_items(int H, int W) {
    std::vector<CostItem> items;
    int B = cfg_.base_channels, S = cfg_.num_scales;
    items.push_back({"temb", temb_.weight_param_count(), temb_.weight_param_count()});
    items.push_back({"spec_in", spec_in_.weight_param_count(), spec_in_.macs(H, W)});
    items.push_back({"pan_in", pan_in_.weight_param_count(), pan_in_.macs(H, W)});
    int h = H, w = W;
    for (int s = 0; s < S; ++s) {
      int ch = B << s;
      std::string nm = "s" + std::to_string(s);
      for (auto& b : pan_blocks_[(size_t)s])
        items.push_back({nm + ".pan_block", block_params(b), b.macs(h, w)});
      for (auto& b : spec_blocks_[(size_t)s])
        items.push_back({nm + ".spec_block", block_params(b), b.macs(h, w)});
      // FMIM: two complex 2-D transforms per channel, ~4 HW log2(HW) real MACs
      int64_t fm = (int64_t)(4.0 * ch * h * w * std::log2((double)h * w));
      items.push_back({nm + ".fmim", 0, fm});
      items.push_back({nm + ".apfm", apfm_[(size_t)s].weight_param_count(),
                       apfm_[(size_t)s].macs(ch)});
      if (s + 1 < S) {
        items.push_back({nm + ".down_spec", spec_down_[(size_t)s].weight_param_count(),
                         spec_down_[(size_t)s].macs(h / 2, w / 2)});
        items.push_back({nm + ".down_pan", pan_down_[(size_t)s].weight_param_count(),
                         pan_down_[(size_t)s].macs(h / 2, w / 2)});
        h /= 2;
        w /= 2;
      }
    }
    for (size_t d = 0; d < up_.size(); ++d) {
      h *= 2;
      w *= 2;
      std::string nm = "dec" + std::to_string(d);
      items.push_back({nm + ".up", up_[d].weight_param_count(), up_[d].macs(h, w)});
      items.push_back({nm + ".merge", merge_[d].weight_param_count(), merge_[d].macs(h, w)});
      for (auto& b : dec_blocks_[d]) items.push_back({nm + ".block", block_params(b), b.macs(h, w)});
    }
    items.push_back({"head_norm", head_norm_.weight_param_count(), 2LL * B * H * W});
    items.push_back({"head", head_.weight_param_count(), head_.macs(H, W)});
    return items;
  }

 private:
  static int64_t block_params(ResBlock& b) { return b.param_count(); }

  DenoiserConfig cfg_;
  TimeEmbedding temb_;
  Conv2d spec_in_, pan_in_;
  std::vector<std::vector<ResBlock>> spec_blocks_, pan_blocks_, dec_blocks_;
  std::vector<APFM> apfm_;
  std::vector<Conv2d> spec_down_, pan_down_, up_, merge_;
  GroupNorm head_norm_;
  Conv2d head_;
};

}  // namespace fose::nn
