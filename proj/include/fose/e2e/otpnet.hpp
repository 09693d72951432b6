#pragma once

#include <functional>

#include "fose/nn/layers.hpp"

namespace fose::e2e {

using nn::Conv2d;
using nn::CostItem;
using nn::GroupNorm;
using nn::Module;

enum class OdeScheme { kEuler, kRk2 };

inline OdeScheme parse_scheme(const std::string& s) {
  if (s == "euler") return OdeScheme::kEuler;
  if (s == "rk2") return OdeScheme::kRk2;
  throw ShapeError("scheme must be 'euler' or 'rk2', got '" + s + "'");
}

struct OTPConfig {
  int bands = 8;
  int num_blocks = 4;
  OdeScheme scheme = OdeScheme::kRk2;
  double step_size = 1.0;  // initial h, learnable per block
  int channels = 32;
};

/// One ODE-solver-style update of a feature state under a learned vector
/// field. euler: y + h f(y); rk2 (Heun): y + h/2 (f(y) + f(y + h f(y))).
inline Var otp_block(const Var& y, const std::function<Var(const Var&)>& f, const Var& h,
                     OdeScheme scheme) {
  if (scheme == OdeScheme::kEuler) return nn::vadd(y, nn::mul_scalarv(f(y), h));
  Var k1 = f(y);
  Var k2 = f(nn::vadd(y, nn::mul_scalarv(k1, h)));
  return nn::vadd(y, nn::mul_scalarv(nn::vadd(k1, k2), nn::vscale(h, 0.5)));
}

inline Var otp_block(const Var& y, const std::function<Var(const Var&)>& f, double h,
                     OdeScheme scheme) {
  return otp_block(y, f, Var(Tensor::scalar(h)), scheme);
}

/// Two-convolution vector field with a smooth nonlinearity in between.
class VectorField : public Module {
 public:
  VectorField() = default;
  VectorField(int ch, Rng& rng) : c1_(ch, ch, 3, rng), gn_(ch), c2_(ch, ch, 3, rng) {}

  Var forward(const Var& y) const { return c2_.forward(nn::vsilu(gn_.forward(c1_.forward(y)))); }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Var&)>& f) override {
    c1_.visit_params(nn::join_name(prefix, "c1"), f);
    gn_.visit_params(nn::join_name(prefix, "gn"), f);
    c2_.visit_params(nn::join_name(prefix, "c2"), f);
  }

  int64_t macs(int h, int w) const {
    return c1_.macs(h, w) + c2_.macs(h, w) + 2LL * c1_.out_channels() * h * w;
  }

 private:
  Conv2d c1_;
  GroupNorm gn_;
  Conv2d c2_;
};

class OTPBlock : public Module {
 public:
  OTPBlock() = default;
  OTPBlock(int ch, double h_init, OdeScheme scheme, Rng& rng)
      : f_(ch, rng), scheme_(scheme), h_(Tensor::scalar(h_init), true) {}

  Var forward(const Var& y) {
    return otp_block(y, [this](const Var& v) { return f_.forward(v); }, h_, scheme_);
  }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Var&)>& f) override {
    f_.visit_params(nn::join_name(prefix, "f"), f);
    f(nn::join_name(prefix, "h"), h_);
  }

  int64_t macs(int h, int w) const {
    int evals = scheme_ == OdeScheme::kRk2 ? 2 : 1;
    return (int64_t)evals * f_.macs(h, w);
  }

 private:
  VectorField f_;
  OdeScheme scheme_ = OdeScheme::kRk2;
  Var h_;
};

/// End-to-end fusion network: embed concat(lms, pan), run the ODE-style
/// blocks, project back to the band count (zero-initialized) and add lms —
/// the identity mapping at initialization.
class E2ENet : public Module {
 public:
  E2ENet() = default;
  E2ENet(const OTPConfig& cfg, Rng& rng) : cfg_(cfg) {
    embed_ = Conv2d(cfg.bands + 1, cfg.channels, 3, rng);
    for (int i = 0; i < cfg.num_blocks; ++i)
      blocks_.emplace_back(cfg.channels, cfg.step_size, cfg.scheme, rng);
    project_ = Conv2d(cfg.channels, cfg.bands, 3, rng, /*zero_init=*/true);
  }

  const OTPConfig& config() const { return cfg_; }

  Var forward(const Var& lms, const Var& pan) {
    const Shape& ls = lms.shape();
    if (pan.shape()[2] != ls[2] || pan.shape()[3] != ls[3])
      throw ShapeError("e2e: lms/pan misaligned");
    Var h = embed_.forward(nn::concat_ch(lms, pan));
    for (auto& b : blocks_) h = b.forward(h);
    return nn::clip01(nn::vadd(lms, project_.forward(h)));
  }

  Tensor fuse(const Tensor& lms, const Tensor& pan) {
    NoGradGuard ng;
    return forward(Var(lms), Var(pan)).value();
  }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Var&)>& f) override {
    embed_.visit_params(nn::join_name(prefix, "embed"), f);
    for (size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].visit_params(nn::join_name(prefix, "block" + std::to_string(i)), f);
    project_.visit_params(nn::join_name(prefix, "project"), f);
  }

  std::vector<CostItem> cost_items(int H, int W) {
    std::vector<CostItem> items;
    items.push_back({"embed", embed_.weight_param_count(), embed_.macs(H, W)});
    for (size_t i = 0; i < blocks_.size(); ++i)
      items.push_back(
          {"block" + std::to_string(i), blocks_[i].param_count(), blocks_[i].macs(H, W)});
    items.push_back({"project", project_.weight_param_count(), project_.macs(H, W)});
    return items;
  }

 private:
  OTPConfig cfg_;
  Conv2d embed_;
  std::vector<OTPBlock> blocks_;
  Conv2d project_;
};

}  // namespace fose::e2e
