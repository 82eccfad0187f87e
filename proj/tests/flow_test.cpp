#include <doctest.h>

#include <cmath>
#include <vector>

#include "softrepa/errors.hpp"
#include "softrepa/flow.hpp"
#include "softrepa/rng.hpp"
#include "test_util.hpp"

using namespace softrepa;
using testutil::bit_equal;
using testutil::max_abs_diff;

TEST_SUITE("flow") {

TEST_CASE("interpolant endpoint identities hold exactly") {
  RngStream rng(3, "flow_test", 0);
  Tensor x0 = randn({2, 3}, rng);
  Tensor x1 = randn({2, 3}, rng);
  CHECK(bit_equal(interpolate(x0, x1, 0.0f), x0));
  CHECK(bit_equal(interpolate(x0, x1, 1.0f), x1));

  Tensor mid = interpolate(x0, x1, 0.25f);
  for (std::size_t i = 0; i < mid.data().size(); ++i)
    CHECK(mid.data()[i] ==
          doctest::Approx(0.75f * x0.data()[i] + 0.25f * x1.data()[i]).epsilon(1e-6));
}

TEST_CASE("flow samples carry consistent fields") {
  RngStream rng(5, "flow_test", 1);
  Tensor x0 = randn({4, 4}, rng);
  RngStream draw(5, "flow_test", 2);
  FlowSample s = make_flow_sample(x0, draw);
  CHECK(s.t >= 0.0f);
  CHECK(s.t < 1.0f);
  CHECK(bit_equal(s.xt, interpolate(s.x0, s.x1, s.t)));
  for (std::size_t i = 0; i < s.v_target.data().size(); ++i)
    CHECK(s.v_target.data()[i] == s.x1.data()[i] - s.x0.data()[i]);

  RngStream fixed(5, "flow_test", 3);
  FlowSample pinned = make_flow_sample(x0, fixed, 0.625f);
  CHECK(pinned.t == 0.625f);
}

TEST_CASE("x0 and velocity parameterizations invert each other") {
  RngStream rng(7, "flow_test", 4);
  Tensor xt = randn({3, 5}, rng);
  Tensor v = randn({3, 5}, rng);
  for (float t : {0.1f, 0.5f, 0.999f}) {
    Tensor x0_hat = x0_from_velocity(xt, t, v);
    Tensor v_back = velocity_from_x0(xt, t, x0_hat);
    CHECK(max_abs_diff(v, v_back) <= 1e-5);
  }
  CHECK_THROWS_AS(velocity_from_x0(xt, 1e-6f, xt), singularity_error);
}

TEST_CASE("gaussian posterior mean matches the conjugate closed form") {
  const GaussianSpec g{0.7f, 1.3f};
  for (float t : {0.05f, 0.3f, 0.8f}) {
    for (float xt : {-2.0f, 0.0f, 1.5f}) {
      const double a = 1.0 - t;
      const double s2 = static_cast<double>(g.stddev) * g.stddev;
      const double expect = (g.mean * t * t + a * s2 * xt) / (t * t + a * a * s2);
      CHECK(gaussian_posterior_mean(g, xt, t) == doctest::Approx(expect).epsilon(1e-5));
      const double v = (xt - expect) / t;
      CHECK(gaussian_oracle_velocity(g, xt, t) == doctest::Approx(v).epsilon(1e-5));
    }
  }
  // At t -> 1 the posterior forgets the observation and returns the prior.
  CHECK(gaussian_posterior_mean(g, 3.0f, 0.9999f) == doctest::Approx(g.mean).epsilon(1e-3));
  CHECK_THROWS_AS(gaussian_oracle_velocity(g, 0.0f, 1e-6f), singularity_error);
}

TEST_CASE("cfm loss recomputes from its definition") {
  RngStream rng(9, "flow_test", 5);
  std::vector<FlowSample> batch;
  std::vector<Caption> caps;
  for (int i = 0; i < 3; ++i) {
    RngStream draw(9, "flow_test", 10 + static_cast<std::uint64_t>(i));
    batch.push_back(make_flow_sample(randn({2, 4}, rng), draw));
    caps.push_back(null_caption());
  }

  // A fixed fake model: v = 2 * xt.
  const VelocityFn fn = [](const Tensor& xt, const std::vector<float>&,
                           const std::vector<Caption>&) { return scale(xt, 2.0f); };
  const float loss = cfm_loss(fn, batch, caps).item();

  double expect = 0.0;
  std::int64_t count = 0;
  for (const FlowSample& s : batch) {
    for (std::size_t i = 0; i < s.xt.data().size(); ++i) {
      const double r = 2.0 * s.xt.data()[i] - s.v_target.data()[i];
      expect += r * r;
      ++count;
    }
  }
  expect /= static_cast<double>(count);
  CHECK(loss == doctest::Approx(expect).epsilon(1e-5));

  CHECK_THROWS_AS(cfm_loss(fn, batch, {caps[0]}), contract_error);
}

TEST_CASE("stack concatenates along a new batch axis") {
  RngStream rng(11, "flow_test", 6);
  Tensor a = randn({2, 3}, rng);
  Tensor b = randn({2, 3}, rng);
  Tensor s = stack({a, b});
  CHECK(s.shape() == std::vector<int>{2, 2, 3});
  CHECK(max_abs_diff(slice(s, 0, 0, 1), reshape(a, {1, 2, 3})) == 0.0);
  CHECK(max_abs_diff(slice(s, 0, 1, 1), reshape(b, {1, 2, 3})) == 0.0);
  CHECK_THROWS_AS(stack({}), contract_error);
  CHECK_THROWS_AS(stack({a, randn({3, 2}, rng)}), shape_error);
}

}  // TEST_SUITE
