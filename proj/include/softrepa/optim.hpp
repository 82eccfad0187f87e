#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "softrepa/tensor.hpp"

namespace softrepa {

struct AdamWConfig {
  float lr = 1e-3f;
  float weight_decay = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// One bias-corrected, decoupled-weight-decay update of a single parameter
// block: p -= lr * mhat / (sqrt(vhat) + eps) + lr * wd * p.
void adamw_step(std::span<float> param, std::span<const float> grad, std::span<float> m,
                std::span<float> v, std::int64_t step, float lr, float weight_decay,
                float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f);

// lr = base/2 * (1 + cos(pi * frac)) within each period; the period length
// multiplies by `mult` at every restart, and each restart returns to base.
float cosine_warm_restart_lr(std::int64_t step, float base_lr, int period0, int mult);

class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(std::vector<Tensor> params, AdamWConfig cfg = {});

  // Consumes the gradients accumulated on the parameters; pass an absolute
  // learning rate to follow a schedule, otherwise cfg.lr applies.
  void step(std::optional<float> lr = {});
  void zero_grad();
  std::int64_t steps_taken() const { return step_; }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  std::int64_t step_ = 0;
};

}  // namespace softrepa
