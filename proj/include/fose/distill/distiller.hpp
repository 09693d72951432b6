#pragma once

#include "fose/core/digest.hpp"
#include "fose/diffusion/schedule.hpp"
#include "fose/nn/denoiser.hpp"
#include "fose/nn/optimizer.hpp"

namespace fose::distill {

using diffusion::NoiseSchedule;
using nn::DenoiserNet;

struct DistillError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr int kTimestepLo = 20;
constexpr int kTimestepHi = 980;
constexpr double kOmegaGuard = 1e-8;

/// Uniform integer on [20, 980] inclusive.
inline int sample_timestep(Rng& rng) { return rng.uniform_int(kTimestepLo, kTimestepHi); }

/// Per-batch normalizer 1/(mean|diff| + guard); a detached scalar by
/// construction.
inline double omega_from_diff(const Tensor& diff) {
  return 1.0 / (t_mean_abs(diff) + kOmegaGuard);
}

/// Student = frozen teacher weights + zero-initialized low-rank factors on
/// every convolution and attention projection. Functionally identical to the
/// teacher at initialization.
inline DenoiserNet init_student(const DenoiserNet& teacher, int rank, double alpha, Rng& rng) {
  DenoiserNet student = teacher;  // shares base weight tensors
  student.set_requires_grad(false);
  student.add_lora_all(rank, alpha, rng);
  return student;
}

/// Fold adapters into dense weights; the result carries no adapter parameters.
inline DenoiserNet merge_adapters(const DenoiserNet& student) {
  DenoiserNet merged = student;
  merged.merge_lora_all();
  return merged;
}

/// SHA-256 over all named parameter payloads (teacher-immutability checks).
template <typename Model>
std::string weight_digest(Model& model) {
  Sha256 d;
  model.visit_params("", [&](const std::string& name, Var& v) {
    d.update(name);
    d.update(v.value().data(), (size_t)v.value().numel() * sizeof(double));
  });
  return d.hex();
}

struct DistillBatch {
  Tensor x0;   // residual target gt - lms, [N,C,H,W]
  Tensor gt;   // [N,C,H,W]
  Tensor lms;  // [N,C,H,W]
  Tensor pan;  // [N,1,H,W]
  int t = 0;   // shared timestep for the batch
  Tensor eps;  // [N,C,H,W]
};

struct DistillLosses {
  double vsd = 0.0;
  double data = 0.0;
};

/// One distillation step: noise the residual at t, run both models, form the
/// omega-weighted squared teacher/student discrepancy plus the L1 data term,
/// and update the adapter parameters. omega is a detached per-batch scalar.
inline DistillLosses distill_step(DenoiserNet& teacher, DenoiserNet& student,
                                  const DistillBatch& batch, const NoiseSchedule& sched,
                                  nn::AdamW& opt) {
  Tensor xt = diffusion::forward_sample(batch.x0, batch.t, batch.eps, sched);
  std::vector<int> ts((size_t)batch.x0.dim(0), batch.t);

  Tensor x0_teacher;
  {
    NoGradGuard ng;  // no gradient flows into the teacher
    x0_teacher = t_add(teacher.forward(Var(xt), Var(batch.pan), Var(batch.lms), ts).value(),
                       batch.lms);
  }
  Var x0_student =
      nn::vadd(student.forward(Var(xt), Var(batch.pan), Var(batch.lms), ts), Var(batch.lms));

  Var diff = nn::vsub(Var(x0_teacher), x0_student);
  double omega = omega_from_diff(diff.value());  // detached, no gradient

  Var loss_vsd = nn::vscale(nn::mean_all(nn::vsquare(diff)), omega);
  Var loss_data = nn::l1_loss(x0_student, Var(batch.gt));

  DistillLosses out{loss_vsd.value()[0], loss_data.value()[0]};
  if (!std::isfinite(out.vsd))
    throw DistillError("distill_step: non-finite loss term L_vsd");
  if (!std::isfinite(out.data))
    throw DistillError("distill_step: non-finite loss term L_data");

  Var total = nn::vadd(loss_vsd, loss_data);
  opt.zero_grad();
  total.backward();
  opt.step();
  return out;
}

/// Adapter parameters of a student (the trainable set in stage 2).
inline std::vector<nn::NamedParam> adapter_parameters(DenoiserNet& student) {
  std::vector<nn::NamedParam> out;
  student.visit_params("", [&](const std::string& name, Var& v) {
    if (name.find("lora_") != std::string::npos) out.push_back({name, v});
  });
  return out;
}

/// Analytic trainable-parameter count: sum of rank*(in+out) per adapted layer.
inline int64_t adapter_param_count_analytic(DenoiserNet& student) {
  int64_t total = 0;
  student.visit_layers(
      [&](nn::Conv2d& c) {
        if (c.lora().active)
          total += (int64_t)c.lora().rank *
                   (c.out_channels() + c.in_channels() * c.kernel() * c.kernel());
      },
      [&](nn::Linear& l) {
        if (l.lora().active) total += (int64_t)l.lora().rank * (l.out_features() + l.in_features());
      },
      [&](nn::ARConv& a) {
        if (a.lora().active)
          total += (int64_t)a.lora().rank *
                   (a.bank().value().dim(0) * a.bank().value().dim(1) +
                    a.bank().value().dim(2) * a.bank().value().dim(3) * a.bank().value().dim(4));
      });
  return total;
}

}  // namespace fose::distill
