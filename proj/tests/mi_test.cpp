#include <doctest.h>

#include <cmath>
#include <map>
#include <vector>

#include "softrepa/corpus.hpp"
#include "softrepa/errors.hpp"
#include "softrepa/flow.hpp"
#include "softrepa/mi.hpp"
#include "softrepa/rng.hpp"
#include "softrepa/tensor.hpp"
#include "test_util.hpp"

using namespace softrepa;

namespace {

// Analytic conditional model: each caption names an isotropic Gaussian data
// distribution and the function returns its exact marginal velocity.
VelocityFn gaussian_velocity(std::map<Caption, GaussianSpec> specs) {
  return [specs = std::move(specs)](const Tensor& xt, const std::vector<float>& t,
                                    const std::vector<Caption>& caps) {
    const int R = xt.dim(0);
    const std::int64_t E = xt.size() / R;
    Tensor out = Tensor::uninit(xt.shape());
    auto od = out.data();
    const auto xd = xt.data();
    for (int r = 0; r < R; ++r) {
      const GaussianSpec g = specs.at(caps[static_cast<std::size_t>(r)]);
      for (std::int64_t i = 0; i < E; ++i) {
        const std::int64_t k = r * E + i;
        od[k] = gaussian_oracle_velocity(g, xd[k], t[static_cast<std::size_t>(r)]);
      }
    }
    return out;
  };
}

double log_density(const Tensor& x0, const GaussianSpec& g) {
  double acc = 0.0;
  const double var = static_cast<double>(g.stddev) * g.stddev;
  for (float v : x0.data()) {
    const double d = static_cast<double>(v) - g.mean;
    acc += -0.5 * std::log(2.0 * std::acos(-1.0) * var) - d * d / (2.0 * var);
  }
  return acc;
}

Tensor shifted_normal(std::uint64_t seed, float mean, float stddev) {
  RngStream rng(seed, "mi_test_x0");
  Tensor x = randn({2, 2, 2}, rng, stddev);
  for (float& v : x.data()) v += mean;
  return x;
}

struct TwoCaptionWorld {
  Caption pos, neg;
  GaussianSpec pos_spec, neg_spec;

  TwoCaptionWorld(float mu, float sigma) {
    auto caps = sample_caption_set(5, 2, 0.5f);
    pos = caps[0];
    neg = caps[1];
    pos_spec = {mu, sigma};
    neg_spec = {-mu, sigma};
  }

  VelocityFn velocity() const {
    return gaussian_velocity({{pos, pos_spec}, {neg, neg_spec}});
  }

  double true_pmi(const Tensor& x0) const {
    const double lp = log_density(x0, pos_spec);
    const double ln = log_density(x0, neg_spec);
    const double m = std::max(lp, ln);
    const double log_mix = m + std::log(0.5 * (std::exp(lp - m) + std::exp(ln - m)));
    return lp - log_mix;
  }
};

}  // namespace

TEST_SUITE("mi") {

TEST_CASE("a near-perfect velocity model scores a proxy near its maximum of zero") {
  Tensor x0 = shifted_normal(80, 0.2f, 1.0f);
  // v = (x_t - x0)/t reproduces the per-draw target up to f32 rounding.
  VelocityFn perfect = [x0](const Tensor& xt, const std::vector<float>& t,
                            const std::vector<Caption>&) {
    const int R = xt.dim(0);
    const std::int64_t E = xt.size() / R;
    Tensor out = Tensor::uninit(xt.shape());
    auto od = out.data();
    const auto xd = xt.data();
    const auto x0d = x0.data();
    for (int r = 0; r < R; ++r)
      for (std::int64_t i = 0; i < E; ++i)
        od[r * E + i] = (xd[r * E + i] - x0d[i]) / t[static_cast<std::size_t>(r)];
    return out;
  };
  const Caption cap = sample_caption_set(5, 1, 0.0f)[0];
  const float proxy = neg_loglik_proxy(perfect, x0, cap, 64, LambdaMode::uniform, 81);
  CHECK(proxy <= 0.0f);
  CHECK(proxy > -1e-3f);

  TwoCaptionWorld world(0.5f, 1.0f);
  const float imperfect =
      neg_loglik_proxy(world.velocity(), x0, world.pos, 64, LambdaMode::uniform, 81);
  CHECK(imperfect < proxy);
  CHECK(neg_loglik_proxy(world.velocity(), x0, world.pos, 64, LambdaMode::uniform, 81) ==
        imperfect);
}

TEST_CASE("pmi degenerates to exactly zero with a single candidate") {
  TwoCaptionWorld world(0.5f, 1.0f);
  Tensor x0 = shifted_normal(82, 0.5f, 1.0f);
  PmiEstimate est = pmi(world.velocity(), x0, world.pos, {world.pos}, 8, LambdaMode::likelihood, 83);
  CHECK(est.value == 0.0f);
  CHECK(est.candidates == 1);
  CHECK(est.mc_samples == 8);
}

TEST_CASE("pmi is capped at log N and indifferent to candidate order") {
  auto caps = sample_caption_set(85, 3, 0.5f);
  Tensor x0 = shifted_normal(84, 2.0f, 0.6f);
  VelocityFn vel = gaussian_velocity(
      {{caps[0], {2.0f, 0.6f}}, {caps[1], {-2.0f, 0.6f}}, {caps[2], {-3.0f, 0.6f}}});

  std::vector<Caption> order1 = {caps[0], caps[1], caps[2]};
  std::vector<Caption> order2 = {caps[2], caps[0], caps[1]};
  PmiEstimate a = pmi(vel, x0, caps[0], order1, 128, LambdaMode::likelihood, 86);
  PmiEstimate b = pmi(vel, x0, caps[0], order2, 128, LambdaMode::likelihood, 86);
  CHECK(a.value <= std::log(3.0f) + 1e-6f);
  CHECK(a.value == doctest::Approx(b.value).epsilon(1e-6));

  // Strong separation pushes the estimate to the cap.
  CHECK(a.value > std::log(3.0) - 0.05);

  CHECK_THROWS_AS(pmi(vel, x0, caps[0], {}, 8, LambdaMode::likelihood, 86), contract_error);
  CHECK_THROWS_AS(pmi(vel, x0, caps[0], {caps[1], caps[2]}, 8, LambdaMode::likelihood, 86),
                  contract_error);
  CHECK_THROWS_AS(pmi(vel, x0, caps[0], order1, 0, LambdaMode::likelihood, 86), contract_error);
}

TEST_CASE("likelihood-mode pmi matches the closed-form two-Gaussian value") {
  struct Case {
    float mu, sigma, x0_mean;
  };
  for (const Case& c : {Case{0.5f, 1.0f, 0.5f}, Case{1.0f, 0.8f, 0.6f}}) {
    TwoCaptionWorld world(c.mu, c.sigma);
    Tensor x0 = shifted_normal(87, c.x0_mean, c.sigma);
    PmiEstimate est = pmi(world.velocity(), x0, world.pos, {world.pos, world.neg}, 4096,
                          LambdaMode::likelihood, 88);
    const double want = world.true_pmi(x0);
    CHECK(std::fabs(static_cast<double>(est.value) - want) < 0.05);
  }
}

TEST_CASE("pmi estimator variance shrinks like 1/mc") {
  TwoCaptionWorld world(0.7f, 1.0f);
  Tensor x0 = shifted_normal(89, 0.7f, 1.0f);
  auto variance_at = [&](int mc) {
    std::vector<double> vals;
    for (std::uint64_t s = 0; s < 24; ++s)
      vals.push_back(pmi(world.velocity(), x0, world.pos, {world.pos, world.neg}, mc,
                         LambdaMode::likelihood, 900 + s)
                         .value);
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    return var / (static_cast<double>(vals.size()) - 1.0);
  };
  // The log transform is heavy-tailed at tiny budgets, so probe the ladder
  // where the delta-method regime holds.
  const double v64 = variance_at(64);
  const double v256 = variance_at(256);
  const double v1024 = variance_at(1024);
  CHECK(v64 / v256 > 1.2);
  CHECK(v64 / v256 < 13.0);
  CHECK(v256 / v1024 > 1.2);
  CHECK(v256 / v1024 < 13.0);
}

TEST_CASE("a caption-blind velocity model carries exactly zero mutual information") {
  TwoCaptionWorld world(0.8f, 1.0f);
  VelocityFn blind = gaussian_velocity({{world.pos, {0.0f, 1.0f}}, {world.neg, {0.0f, 1.0f}}});
  std::vector<DatasetPair> pairs;
  for (int i = 0; i < 6; ++i) {
    const bool is_pos = i % 2 == 0;
    pairs.push_back({shifted_normal(120 + static_cast<std::uint64_t>(i),
                                    is_pos ? 0.8f : -0.8f, 1.0f),
                     is_pos ? world.pos : world.neg});
  }
  MiEstimate est = mutual_information(blind, pairs, 96, 0, 0, LambdaMode::likelihood, 90);
  CHECK(est.mi == 0.0f);
  CHECK(est.stderr_ == 0.0f);
  CHECK(est.n_pairs == 6);
  CHECK(est.mc_samples_per_pair == 16);
}

TEST_CASE("an informative model yields positive mutual information") {
  TwoCaptionWorld world(1.0f, 1.0f);
  std::vector<DatasetPair> pairs;
  for (int i = 0; i < 8; ++i) {
    const bool is_pos = i % 2 == 0;
    pairs.push_back({shifted_normal(130 + static_cast<std::uint64_t>(i),
                                    is_pos ? 1.0f : -1.0f, 1.0f),
                     is_pos ? world.pos : world.neg});
  }
  MiEstimate est = mutual_information(world.velocity(), pairs, 256, 0, 0,
                                      LambdaMode::likelihood, 91);
  CHECK(est.mi > 0.0f);
  CHECK(est.mi <= std::log(2.0f) + 1e-6f);
  CHECK(est.stderr_ >= 0.0f);
  CHECK(est.n_pairs == 8);
  CHECK(est.mc_samples_per_pair == 32);

  MiEstimate capped = mutual_information(world.velocity(), pairs, 64, 3, 2,
                                         LambdaMode::likelihood, 91);
  CHECK(capped.n_pairs == 3);
  CHECK(capped.mc_samples_per_pair == 21);
}

TEST_CASE("mutual information guards its inputs") {
  TwoCaptionWorld world(0.5f, 1.0f);
  VelocityFn vel = world.velocity();

  CHECK_THROWS_AS(mutual_information(vel, {}, 16, 0, 0, LambdaMode::uniform, 92), contract_error);

  std::vector<DatasetPair> mono;
  for (int i = 0; i < 3; ++i)
    mono.push_back({shifted_normal(140 + static_cast<std::uint64_t>(i), 0.5f, 1.0f), world.pos});
  CHECK_THROWS_AS(mutual_information(vel, mono, 16, 0, 0, LambdaMode::uniform, 92), contract_error);

  std::vector<DatasetPair> pairs = mono;
  pairs.push_back({shifted_normal(143, -0.5f, 1.0f), world.neg});
  CHECK_THROWS_AS(mutual_information(vel, pairs, 16, 0, 1, LambdaMode::uniform, 92), contract_error);

  VelocityFn bad = [](const Tensor& xt, const std::vector<float>&, const std::vector<Caption>&) {
    return slice(xt, 0, 0, xt.dim(0) - 1);
  };
  Tensor x0 = shifted_normal(144, 0.0f, 1.0f);
  CHECK_THROWS_AS(neg_loglik_proxy(bad, x0, world.pos, 2, LambdaMode::uniform, 92), shape_error);
}

TEST_CASE("the checkpoint overload tags the estimate with its tuning flag") {
  Checkpoint ck = testutil::jittered_checkpoint(testutil::tiny_run(), 93);
  auto caps = sample_caption_set(94, 2, 0.5f);
  std::vector<DatasetPair> pairs = {{render(scene_of(caps[0])), caps[0]},
                                    {render(scene_of(caps[1])), caps[1]}};
  MiEstimate off = mutual_information(ck, pairs, false, 8, 2, 2, LambdaMode::uniform, 95);
  CHECK(!off.soft);
  CHECK(off.n_pairs == 2);
  MiEstimate on = mutual_information(ck, pairs, true, 8, 2, 2, LambdaMode::uniform, 95);
  CHECK(on.soft);
  // Base checkpoint has no adapters, so the flag alone cannot move the value.
  CHECK(on.mi == off.mi);
}

}
