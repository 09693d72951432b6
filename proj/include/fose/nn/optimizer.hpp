#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "fose/nn/layers.hpp"

namespace fose::nn {

/// Decoupled-weight-decay adaptive-moment optimizer with optional cosine
/// learning-rate decay. Parameters with requires_grad = false are skipped
/// entirely (no decay either), which is how frozen layers stay untouched.
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<NamedParam> params, double lr, double weight_decay = 1e-2,
        double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)),
        lr_(lr),
        wd_(weight_decay),
        b1_(beta1),
        b2_(beta2),
        eps_(eps) {
    for (auto& p : params_) {
      m_.push_back(Tensor(p.var.value().shape()));
      v_.push_back(Tensor(p.var.value().shape()));
    }
  }

  void set_cosine_schedule(int total_steps) { total_steps_ = total_steps; }

  double current_lr() const {
    if (total_steps_ <= 0) return lr_;
    double frac = std::min(1.0, (double)step_ / (double)total_steps_);
    return lr_ * 0.5 * (1.0 + std::cos(M_PI * frac));
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  void step() {
    double lr_t = current_lr();
    ++step_;
    double bc1 = 1.0 - std::pow(b1_, (double)step_);
    double bc2 = 1.0 - std::pow(b2_, (double)step_);
    for (size_t i = 0; i < params_.size(); ++i) {
      Var& p = params_[i].var;
      if (!p.requires_grad() || !p.has_grad()) continue;
      const Tensor& g = p.grad();
      Tensor& w = p.value_mut();
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      for (int64_t j = 0; j < w.numel(); ++j) {
        m[j] = b1_ * m[j] + (1.0 - b1_) * g[j];
        v[j] = b2_ * v[j] + (1.0 - b2_) * g[j] * g[j];
        double mhat = m[j] / bc1;
        double vhat = v[j] / bc2;
        w[j] -= lr_t * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w[j]);
      }
    }
  }

  int64_t step_count() const { return step_; }

  /// Moment/state blobs for bit-exact checkpoint resume.
  void export_state(std::map<std::string, Tensor>& blobs) const {
    for (size_t i = 0; i < params_.size(); ++i) {
      blobs["opt.m." + params_[i].name] = m_[i];
      blobs["opt.v." + params_[i].name] = v_[i];
    }
    Tensor meta({2});
    meta[0] = (double)step_;
    meta[1] = (double)total_steps_;
    blobs["opt.meta"] = meta;
  }

  void import_state(const std::map<std::string, Tensor>& blobs) {
    for (size_t i = 0; i < params_.size(); ++i) {
      auto im = blobs.find("opt.m." + params_[i].name);
      auto iv = blobs.find("opt.v." + params_[i].name);
      if (im != blobs.end()) m_[i] = im->second.clone();
      if (iv != blobs.end()) v_[i] = iv->second.clone();
    }
    auto it = blobs.find("opt.meta");
    if (it != blobs.end()) {
      step_ = (int64_t)it->second[0];
      total_steps_ = (int)it->second[1];
    }
  }

 private:
  std::vector<NamedParam> params_;
  std::vector<Tensor> m_, v_;
  double lr_ = 1e-4, wd_ = 1e-2, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  int64_t step_ = 0;
  int total_steps_ = 0;
};

}  // namespace fose::nn
