#include "softrepa/flow.hpp"

#include <cmath>

#include "softrepa/errors.hpp"

namespace softrepa {

Tensor interpolate(const Tensor& x0, const Tensor& x1, float t) {
  check<shape_error>(x0.shape() == x1.shape(), "interpolate: shape mismatch");
  return add(scale(x0, 1.0f - t), scale(x1, t));
}

FlowSample make_flow_sample(const Tensor& x0, RngStream& rng, std::optional<float> t_opt) {
  FlowSample s;
  s.x0 = x0;
  s.x1 = randn(x0.shape(), rng);
  if (t_opt) {
    check<domain_error>(*t_opt >= 0.0f && *t_opt <= 1.0f, "make_flow_sample: t outside [0,1]");
    s.t = *t_opt;
  } else {
    s.t = rng.uniform();
  }
  s.xt = interpolate(s.x0, s.x1, s.t);
  s.v_target = sub(s.x1, s.x0);
  return s;
}

Tensor x0_from_velocity(const Tensor& xt, float t, const Tensor& v) {
  check<shape_error>(xt.shape() == v.shape(), "x0_from_velocity: shape mismatch");
  return sub(xt, scale(v, t));
}

Tensor velocity_from_x0(const Tensor& xt, float t, const Tensor& x0_hat) {
  check<shape_error>(xt.shape() == x0_hat.shape(), "velocity_from_x0: shape mismatch");
  check<singularity_error>(t >= kMinT, "velocity_from_x0: t below 1e-5");
  return scale(sub(xt, x0_hat), 1.0f / t);
}

float gaussian_posterior_mean(const GaussianSpec& g, float xt, float t) {
  check<domain_error>(g.stddev > 0.0f, "gaussian_posterior_mean: stddev must be positive");
  check<domain_error>(t >= 0.0f && t <= 1.0f, "gaussian_posterior_mean: t outside [0,1]");
  const float a = 1.0f - t;
  const float var = g.stddev * g.stddev;
  const float denom = a * a * var + t * t;
  return g.mean + a * var * (xt - a * g.mean) / denom;
}

float gaussian_oracle_velocity(const GaussianSpec& g, float xt, float t) {
  check<singularity_error>(t >= kMinT, "gaussian_oracle_velocity: t below 1e-5");
  return (xt - gaussian_posterior_mean(g, xt, t)) / t;
}

Tensor stack(const std::vector<Tensor>& items) {
  check<contract_error>(!items.empty(), "stack: empty list");
  std::vector<Tensor> rows;
  rows.reserve(items.size());
  std::vector<int> row_shape;
  row_shape.push_back(1);
  for (int d : items[0].shape()) row_shape.push_back(d);
  for (const Tensor& it : items) {
    check<shape_error>(it.shape() == items[0].shape(), "stack: ragged shapes");
    rows.push_back(reshape(it, row_shape));
  }
  return concat(rows, 0);
}

Tensor cfm_loss(const VelocityFn& model, const std::vector<FlowSample>& batch,
                const std::vector<Caption>& captions) {
  check<contract_error>(!batch.empty(), "cfm_loss: empty batch");
  check<contract_error>(batch.size() == captions.size(), "cfm_loss: batch/caption count mismatch");
  std::vector<Tensor> xts, targets;
  std::vector<float> ts;
  xts.reserve(batch.size());
  targets.reserve(batch.size());
  ts.reserve(batch.size());
  for (const FlowSample& s : batch) {
    xts.push_back(s.xt);
    targets.push_back(s.v_target);
    ts.push_back(s.t);
  }
  Tensor v = model(stack(xts), ts, captions);
  Tensor target = stack(targets);
  check<shape_error>(v.shape() == target.shape(), "cfm_loss: model output shape mismatch");
  return mean(square(sub(v, target)));
}

}  // namespace softrepa
