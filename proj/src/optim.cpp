#include "softrepa/optim.hpp"

#include <cmath>
#include <numbers>

#include "softrepa/errors.hpp"

namespace softrepa {

void adamw_step(std::span<float> param, std::span<const float> grad, std::span<float> m,
                std::span<float> v, std::int64_t step, float lr, float weight_decay,
                float beta1, float beta2, float eps) {
  check<shape_error>(param.size() == grad.size() && param.size() == m.size() &&
                         param.size() == v.size(),
                     "adamw_step: mismatched block sizes");
  check<contract_error>(step >= 1, "adamw_step: step counts from 1");
  const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = beta1 * m[i] + (1.0 - beta1) * g;
    const double vi = beta2 * v[i] + (1.0 - beta2) * g * g;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
    param[i] = static_cast<float>(param[i] - lr * update - lr * weight_decay * param[i]);
  }
}

float cosine_warm_restart_lr(std::int64_t step, float base_lr, int period0, int mult) {
  check<contract_error>(step >= 0, "cosine_warm_restart_lr: negative step");
  check<config_error>(period0 >= 1 && mult >= 1, "cosine_warm_restart_lr: period0, mult must be >= 1");
  std::int64_t period = period0;
  std::int64_t s = step;
  while (s >= period) {
    s -= period;
    period *= mult;
  }
  const double frac = static_cast<double>(s) / static_cast<double>(period);
  return static_cast<float>(0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * frac)));
}

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg) : cfg_(cfg), params_(std::move(params)) {
  check<contract_error>(!params_.empty(), "adamw: no parameters");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    check<contract_error>(p.defined() && p.requires_grad(), "adamw: parameters must carry grads");
    m_.emplace_back(p.size(), 0.0f);
    v_.emplace_back(p.size(), 0.0f);
  }
}

void AdamW::step(std::optional<float> lr) {
  ++step_;
  const float rate = lr.value_or(cfg_.lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    adamw_step(p.data(), p.grad(), m_[i], v_[i], step_, rate, cfg_.weight_decay, cfg_.beta1,
               cfg_.beta2, cfg_.eps);
  }
}

void AdamW::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace softrepa
