#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "softrepa/corpus.hpp"
#include "softrepa/rng.hpp"
#include "softrepa/tensor.hpp"

namespace softrepa {

// Linear conditional flow x_t = (1-t) x0 + t x1 with x1 ~ N(0,I). The
// regression target is the constant path velocity x1 - x0.

inline constexpr float kMinT = 1e-5f;  // division-by-t guard

struct FlowSample {
  Tensor x0;
  Tensor x1;
  Tensor xt;
  float t = 0.0f;
  Tensor v_target;  // x1 - x0
};

Tensor interpolate(const Tensor& x0, const Tensor& x1, float t);

// x1 drawn standard normal; t uniform on [0,1) unless supplied.
FlowSample make_flow_sample(const Tensor& x0, RngStream& rng, std::optional<float> t = {});

// x0_hat = x_t - t v  (exact inverse of velocity_from_x0)
Tensor x0_from_velocity(const Tensor& xt, float t, const Tensor& v);
// v = (x_t - x0_hat) / t; rejects t < kMinT.
Tensor velocity_from_x0(const Tensor& xt, float t, const Tensor& x0_hat);

// Isotropic Gaussian data distribution, per-element closed forms.
struct GaussianSpec {
  float mean = 0.0f;
  float stddev = 1.0f;
};

// E[x0 | x_t] for x0 ~ N(mu, sigma^2) under the linear flow.
float gaussian_posterior_mean(const GaussianSpec& g, float xt, float t);
// Marginal velocity v*(x_t, t) = (x_t - E[x0|x_t]) / t; rejects t < kMinT.
float gaussian_oracle_velocity(const GaussianSpec& g, float xt, float t);

// Batched conditional velocity model: (x_t [B,...], t per sample, captions)
// -> velocity [B,...]. Wraps a denoiser plus whatever adapters it closes over.
using VelocityFn =
    std::function<Tensor(const Tensor& xt, const std::vector<float>& t,
                         const std::vector<Caption>& captions)>;

// Mean over batch and elements of || v_model - (x1 - x0) ||^2.
Tensor cfm_loss(const VelocityFn& model, const std::vector<FlowSample>& batch,
                const std::vector<Caption>& captions);

// Stacks per-sample tensors [...]->[B,...]; shared by loss and sampler code.
Tensor stack(const std::vector<Tensor>& items);

}  // namespace softrepa
