#pragma once

#include "fose/nn/layers.hpp"
#include "fose/nn/ops.hpp"

namespace fose::nn {

/// Attention-like fusion of the panchromatic (spatial) branch into the
/// spectral branch. Channels act as tokens described by pooled spatial
/// descriptors; queries come from the spectral side, keys/values from the
/// spatial side, and the attended result — together with the time embedding —
/// drives a zero-initialized scale-and-shift of the spectral feature, so the
/// fused path starts as the identity.
class APFM : public Module {
 public:
  APFM() = default;
  APFM(int channels, int time_dim, Rng& rng, int pool = 4)
      : channels_(channels), pool_(pool), dk_(pool * pool) {
    wq_ = Linear(dk_, dk_, rng);
    wk_ = Linear(dk_, dk_, rng);
    wv_ = Linear(dk_, dk_, rng);
    tproj_ = Linear(time_dim, dk_, rng);
    wo_ = Linear(2 * dk_, 2, rng, /*zero_init=*/true);
    wo_.bias().value_mut().fill(0.0);
  }

  struct Detail {
    Var out;
    Var attn;  // [N,C,C]
  };

  Detail forward_detail(const Var& spatial_feat, const Var& spectral_feat, const Var& t_emb) const {
    const Shape& ss = spectral_feat.shape();
    if (spatial_feat.shape()[2] != ss[2] || spatial_feat.shape()[3] != ss[3])
      throw ShapeError("apfm: branch spatial dimensions differ");
    int N = ss[0], C = ss[1];
    Var dq = view(adaptive_avg_pool(spectral_feat, pool_), {N, C, dk_});
    Var dkv = view(adaptive_avg_pool(spatial_feat, pool_), {N, C, dk_});
    Var q = wq_.forward_tokens(dq);
    Var k = wk_.forward_tokens(dkv);
    Var v = wv_.forward_tokens(dkv);
    Var attn = softmax_last(vscale(bmm(q, transpose12(k)), 1.0 / std::sqrt((double)dk_)));
    Var z = bmm(attn, v);  // [N,C,dk]
    Var tf = expand_tokens(vsilu(tproj_.forward(t_emb)), C);
    Var m = wo_.forward_tokens(concat_last(z, tf));  // [N,C,2], zero at init
    Var gamma = narrow_last(m, 0);
    Var delta = narrow_last(m, 1);
    return {scale_shift_nc(spectral_feat, gamma, delta), attn};
  }

  Var forward(const Var& spatial_feat, const Var& spectral_feat, const Var& t_emb) const {
    return forward_detail(spatial_feat, spectral_feat, t_emb).out;
  }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Var&)>& f) override {
    wq_.visit_params(join_name(prefix, "wq"), f);
    wk_.visit_params(join_name(prefix, "wk"), f);
    wv_.visit_params(join_name(prefix, "wv"), f);
    tproj_.visit_params(join_name(prefix, "tproj"), f);
    wo_.visit_params(join_name(prefix, "wo"), f);
  }

  template <typename Fn>
  void visit_linear(Fn&& fn) {
    fn(wq_);
    fn(wk_);
    fn(wv_);
    fn(tproj_);
    fn(wo_);
  }

  int64_t weight_param_count() const {
    return wq_.weight_param_count() + wk_.weight_param_count() + wv_.weight_param_count() +
           tproj_.weight_param_count() + wo_.weight_param_count();
  }

  /// Attention matmuls dominate; descriptor projections are per channel-token.
  int64_t macs(int channels) const {
    int64_t tok = channels;
    int64_t proj = (int64_t)dk_ * dk_ * tok * 3 + (int64_t)2 * dk_ * 2 * tok;
    int64_t attn = 2LL * tok * tok * dk_;
    return proj + attn;
  }

 private:
  int channels_ = 0, pool_ = 4, dk_ = 16;
  Linear wq_, wk_, wv_, tproj_, wo_;
};

}  // namespace fose::nn
