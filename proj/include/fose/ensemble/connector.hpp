#pragma once

#include "fose/nn/layers.hpp"

namespace fose::ensemble {

using nn::BatchNorm2d;
using nn::Conv2d;
using nn::CostItem;
using nn::Module;

struct ConnectorConfig {
  int bands = 8;
  int num_blocks = 3;
  int hidden_channels = 32;
  int kernel = 3;
};

/// Lightweight Conv-BN-ReLU stack over the concatenated backbone outputs,
/// closed by a zero-initialized 1x1 projection added to the input average —
/// stage-4 training therefore starts at the ensemble-mean baseline.
class ConnectorNet : public Module {
 public:
  ConnectorNet() = default;
  ConnectorNet(const ConnectorConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.num_blocks < 1) throw ShapeError("connector: num_blocks must be >= 1");
    int in = 2 * cfg.bands;
    for (int i = 0; i < cfg.num_blocks; ++i) {
      int out = cfg.hidden_channels;
      convs_.emplace_back(in, out, cfg.kernel, rng);
      bns_.emplace_back(out);
      in = out;
    }
    final_ = Conv2d(in, cfg.bands, 1, rng, /*zero_init=*/true);
  }

  const ConnectorConfig& config() const { return cfg_; }

  Var forward(const Var& y_osd, const Var& y_e2e, bool training) {
    if (y_osd.shape() != y_e2e.shape())
      throw ShapeError("connector: input shapes differ " + shape_str(y_osd.shape()) + " vs " +
                       shape_str(y_e2e.shape()));
    Var x = nn::concat_ch(y_osd, y_e2e);
    for (size_t i = 0; i < convs_.size(); ++i)
      x = nn::vrelu(bns_[i].forward(convs_[i].forward(x), training));
    Var avg = nn::vscale(nn::vadd(y_osd, y_e2e), 0.5);
    return nn::clip01(nn::vadd(final_.forward(x), avg));
  }

  Tensor fuse(const Tensor& y_osd, const Tensor& y_e2e) {
    NoGradGuard ng;
    return forward(Var(y_osd), Var(y_e2e), /*training=*/false).value();
  }

  void visit_params(const std::string& prefix,
                    const std::function<void(const std::string&, Var&)>& f) override {
    for (size_t i = 0; i < convs_.size(); ++i) {
      convs_[i].visit_params(nn::join_name(prefix, "conv" + std::to_string(i)), f);
      bns_[i].visit_params(nn::join_name(prefix, "bn" + std::to_string(i)), f);
    }
    final_.visit_params(nn::join_name(prefix, "final"), f);
  }

  void visit_buffers(const std::string& prefix,
                     const std::function<void(const std::string&, Tensor&)>& f) override {
    for (size_t i = 0; i < bns_.size(); ++i)
      bns_[i].visit_buffers(nn::join_name(prefix, "bn" + std::to_string(i)), f);
  }

  std::vector<CostItem> cost_items(int H, int W) {
    std::vector<CostItem> items;
    for (size_t i = 0; i < convs_.size(); ++i) {
      items.push_back(
          {"conv" + std::to_string(i), convs_[i].weight_param_count(), convs_[i].macs(H, W)});
      items.push_back({"bn" + std::to_string(i), bns_[i].weight_param_count(),
                       2LL * cfg_.hidden_channels * H * W});
    }
    items.push_back({"final", final_.weight_param_count(), final_.macs(H, W)});
    return items;
  }

 private:
  ConnectorConfig cfg_;
  std::vector<Conv2d> convs_;
  std::vector<BatchNorm2d> bns_;
  Conv2d final_;
};

}  // namespace fose::ensemble
