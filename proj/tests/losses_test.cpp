#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "softrepa/corpus.hpp"
#include "softrepa/errors.hpp"
#include "softrepa/losses.hpp"
#include "softrepa/rng.hpp"
#include "softrepa/tensor.hpp"
#include "test_util.hpp"

using namespace softrepa;

namespace {

struct LossFixture {
  Denoiser model;
  ForwardOptions opt;
  std::vector<Caption> captions;

  LossFixture(std::uint64_t seed, bool jitter) : model(testutil::tiny_model(), seed) {
    if (jitter) testutil::jitter_model(model, seed + 1);
    captions = sample_caption_set(seed + 2, 8, 0.5f);
  }

  Tensor image(std::uint64_t i) const {
    RngStream rng(91, "loss_img", i);
    return randn({model.cfg.channels, model.cfg.image_size, model.cfg.image_size}, rng);
  }

  ContrastiveBatch batch(int P, int Q, bool shared) const {
    ContrastiveBatch b;
    for (int i = 0; i < P; ++i) {
      b.images.push_back(image(static_cast<std::uint64_t>(i)));
      b.positives.push_back(captions[static_cast<std::size_t>(i)]);
    }
    for (int j = 0; j < Q; ++j) b.negative_pool.push_back(captions[static_cast<std::size_t>(P + j)]);
    const int draws = shared ? 1 : P;
    for (int i = 0; i < draws; ++i) {
      RngStream rng(92, "loss_eps", static_cast<std::uint64_t>(i));
      b.eps.push_back(randn({model.cfg.channels, model.cfg.image_size, model.cfg.image_size}, rng));
      b.t.push_back(0.2f + 0.23f * static_cast<float>(i));
    }
    return b;
  }
};

double hand_cross_entropy(const std::vector<float>& logits, int positive) {
  double s = 0.0;
  for (float l : logits) s += std::exp(static_cast<double>(l));
  return std::log(s) - static_cast<double>(logits[static_cast<std::size_t>(positive)]);
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("temperature schedule evaluates both kinds and guards its domain") {
  TemperatureSchedule c{TemperatureSchedule::Kind::constant, 0.7f, {}};
  CHECK(c(0.0f) == 0.7f);
  CHECK(c(0.4f) == 0.7f);
  CHECK(c(1.0f) == 0.7f);

  TemperatureSchedule lin{TemperatureSchedule::Kind::linear_in_t, 1.0f, 3.0f};
  CHECK(lin(0.0f) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(lin(0.25f) == doctest::Approx(1.5).epsilon(1e-6));
  CHECK(lin(1.0f) == doctest::Approx(3.0).epsilon(1e-6));

  TemperatureSchedule lin_default{TemperatureSchedule::Kind::linear_in_t, 0.5f, {}};
  CHECK(lin_default(0.8f) == 0.5f);

  CHECK_THROWS_AS(c(-0.1f), domain_error);
  CHECK_THROWS_AS(c(1.1f), domain_error);
  TemperatureSchedule dead{TemperatureSchedule::Kind::constant, 0.0f, {}};
  CHECK_THROWS_AS(dead(0.5f), domain_error);
  TemperatureSchedule crossing{TemperatureSchedule::Kind::linear_in_t, 1.0f, -1.0f};
  CHECK_THROWS_AS(crossing(0.5f), domain_error);
}

TEST_CASE("logit stays in (0,1] and reaches 1 exactly when the residual vanishes") {
  NoGrad ng;
  TemperatureSchedule tau;

  LossFixture fresh(31, false);
  Tensor x0 = fresh.image(0);
  // A fresh model emits exactly zero velocity; with eps == x0 the target
  // velocity is exactly zero too, so the residual is zero and the logit is 1.
  Tensor one = logit(fresh.model, fresh.opt, x0, fresh.captions[0], x0, 0.37f, tau);
  CHECK(one.item() == 1.0f);

  LossFixture fx(32, true);
  for (std::uint64_t i = 0; i < 6; ++i) {
    RngStream rng(93, "loss_logit_eps", i);
    Tensor eps = randn({3, 16, 16}, rng);
    float t = 0.05f + 0.15f * static_cast<float>(i);
    float l = logit(fx.model, fx.opt, fx.image(i), fx.captions[i % 8], eps, t, tau).item();
    CHECK(l > 0.0f);
    CHECK(l <= 1.0f);
  }

  Tensor eps = fx.image(1);
  CHECK_THROWS_AS(logit(fx.model, fx.opt, x0, fx.captions[0], eps, 0.0f, tau), domain_error);
  CHECK_THROWS_AS(logit(fx.model, fx.opt, x0, fx.captions[0], eps, 1.0f, tau), domain_error);
  RngStream rng(94, "loss_bad_eps");
  Tensor bad = randn({3, 8, 8}, rng);
  CHECK_THROWS_AS(logit(fx.model, fx.opt, x0, fx.captions[0], bad, 0.5f, tau), shape_error);
}

TEST_CASE("candidate set dedups keeping first occurrence with the positive at index 0") {
  LossFixture fx(33, false);
  ContrastiveBatch b = fx.batch(3, 0, true);
  b.negative_pool = {fx.captions[1], fx.captions[3], fx.captions[3], fx.captions[0], fx.captions[4]};

  CandidateSet s0 = candidate_set(b, 0);
  REQUIRE(s0.captions.size() == 5);
  CHECK(s0.positive == 0);
  CHECK(s0.captions[0] == fx.captions[0]);
  CHECK(s0.captions[1] == fx.captions[1]);
  CHECK(s0.captions[2] == fx.captions[2]);
  CHECK(s0.captions[3] == fx.captions[3]);
  CHECK(s0.captions[4] == fx.captions[4]);

  CandidateSet s1 = candidate_set(b, 1);
  CHECK(s1.captions[0] == fx.captions[1]);
  CHECK(s1.captions[1] == fx.captions[0]);
  for (std::size_t i = 0; i < s1.captions.size(); ++i)
    for (std::size_t j = i + 1; j < s1.captions.size(); ++j)
      CHECK(s1.captions[i] != s1.captions[j]);

  CHECK_THROWS_AS(candidate_set(b, -1), contract_error);
  CHECK_THROWS_AS(candidate_set(b, 3), contract_error);
}

TEST_CASE("uniform logits from a fresh model give exactly log N") {
  NoGrad ng;
  TemperatureSchedule tau;
  LossFixture fx(34, false);

  for (bool shared : {true, false}) {
    ContrastiveBatch b = fx.batch(3, 3, shared);
    float loss = softrepa_loss(fx.model, fx.opt, b, tau).item();
    CHECK(loss == doctest::Approx(std::log(6.0)).epsilon(1e-5));
  }
}

TEST_CASE("batched loss matches a per-logit recomputation and respects its bounds") {
  NoGrad ng;
  TemperatureSchedule tau{TemperatureSchedule::Kind::linear_in_t, 0.8f, 1.6f};
  LossFixture fx(35, true);
  ContrastiveBatch b = fx.batch(3, 4, true);

  float batched = softrepa_loss(fx.model, fx.opt, b, tau).item();

  const double lo = std::log(1.0 + 6.0 * std::exp(-1.0));
  const double hi = std::log(1.0 + 6.0 * std::exp(1.0));
  double total = 0.0;
  for (int i = 0; i < 3; ++i) {
    CandidateSet set = candidate_set(b, i);
    REQUIRE(set.captions.size() == 7);
    std::vector<float> logits;
    for (const Caption& c : set.captions)
      logits.push_back(
          logit(fx.model, fx.opt, b.images[static_cast<std::size_t>(i)], c, b.eps_for(i), b.t_for(i), tau).item());
    double li = hand_cross_entropy(logits, set.positive);
    CHECK(li >= lo);
    CHECK(li <= hi);
    total += li;
  }
  CHECK(batched == doctest::Approx(total / 3.0).epsilon(1e-5));
}

TEST_CASE("permuting the negative pool leaves the loss unchanged") {
  NoGrad ng;
  TemperatureSchedule tau;
  LossFixture fx(36, true);
  ContrastiveBatch b = fx.batch(2, 5, true);
  float base = softrepa_loss(fx.model, fx.opt, b, tau).item();

  ContrastiveBatch perm = b;
  std::rotate(perm.negative_pool.begin(), perm.negative_pool.begin() + 2, perm.negative_pool.end());
  float rotated = softrepa_loss(fx.model, fx.opt, perm, tau).item();
  CHECK(std::fabs(static_cast<double>(base) - static_cast<double>(rotated)) <= 1e-6);

  std::reverse(perm.negative_pool.begin(), perm.negative_pool.end());
  float reversed = softrepa_loss(fx.model, fx.opt, perm, tau).item();
  CHECK(std::fabs(static_cast<double>(base) - static_cast<double>(reversed)) <= 1e-6);
}

TEST_CASE("temperature rescaling moves the loss but never the candidate ranking") {
  NoGrad ng;
  LossFixture fx(37, true);
  ContrastiveBatch b = fx.batch(2, 4, true);
  TemperatureSchedule cold{TemperatureSchedule::Kind::constant, 0.5f, {}};
  TemperatureSchedule warm{TemperatureSchedule::Kind::constant, 2.0f, {}};

  for (int i = 0; i < 2; ++i) {
    CandidateSet set = candidate_set(b, i);
    std::vector<float> lc, lw;
    for (const Caption& c : set.captions) {
      const Tensor& img = b.images[static_cast<std::size_t>(i)];
      lc.push_back(logit(fx.model, fx.opt, img, c, b.eps_for(i), b.t_for(i), cold).item());
      lw.push_back(logit(fx.model, fx.opt, img, c, b.eps_for(i), b.t_for(i), warm).item());
    }
    auto arg_cold = std::max_element(lc.begin(), lc.end()) - lc.begin();
    auto arg_warm = std::max_element(lw.begin(), lw.end()) - lw.begin();
    CHECK(arg_cold == arg_warm);
    for (std::size_t c = 0; c < lc.size(); ++c) CHECK(lw[c] > lc[c]);
  }
  float loss_cold = softrepa_loss(fx.model, fx.opt, b, cold).item();
  float loss_warm = softrepa_loss(fx.model, fx.opt, b, warm).item();
  CHECK(loss_cold != loss_warm);
}

TEST_CASE("combined loss at weight zero is the contrastive loss, and parts decompose the total") {
  NoGrad ng;
  TemperatureSchedule tau;
  LossFixture fx(38, true);
  ContrastiveBatch b = fx.batch(3, 3, true);

  float sr = softrepa_loss(fx.model, fx.opt, b, tau).item();
  ContrastiveParts parts0;
  float combined0 = combined_loss(fx.model, fx.opt, b, tau, 0.0f, &parts0).item();
  CHECK(combined0 == sr);
  CHECK(parts0.softrepa == sr);
  CHECK(!parts0.dsm.has_value());

  ContrastiveParts parts;
  float total = combined_loss(fx.model, fx.opt, b, tau, 0.4f, &parts).item();
  REQUIRE(parts.dsm.has_value());
  CHECK(parts.softrepa == sr);
  CHECK(static_cast<double>(total) ==
        doctest::Approx(static_cast<double>(parts.softrepa) + 0.4 * static_cast<double>(*parts.dsm))
            .epsilon(1e-6));

  CHECK_THROWS_AS(combined_loss(fx.model, fx.opt, b, tau, -0.5f, nullptr), domain_error);
  CHECK_THROWS_AS(combined_loss(fx.model, fx.opt, b, tau, std::nanf(""), nullptr), domain_error);
}

TEST_CASE("dsm part equals the flow-matching residual of the positive rows") {
  NoGrad ng;
  TemperatureSchedule tau;
  LossFixture fx(39, true);
  ContrastiveBatch b = fx.batch(3, 2, true);

  ContrastiveParts parts;
  combined_loss(fx.model, fx.opt, b, tau, 1.0f, &parts);
  REQUIRE(parts.dsm.has_value());

  double acc = 0.0;
  for (int i = 0; i < 3; ++i) {
    const Tensor& x0 = b.images[static_cast<std::size_t>(i)];
    Tensor xt = interpolate(x0, b.eps_for(i), b.t_for(i));
    Tensor v = fx.model.forward_one(xt, b.t_for(i), b.positives[static_cast<std::size_t>(i)], fx.opt);
    Tensor target = sub(b.eps_for(i), x0);
    acc += static_cast<double>(mean(square(sub(v, target))).item());
  }
  CHECK(static_cast<double>(*parts.dsm) == doctest::Approx(acc / 3.0).epsilon(1e-6));
}

TEST_CASE("batch validation rejects malformed structure") {
  NoGrad ng;
  TemperatureSchedule tau;
  LossFixture fx(40, false);

  ContrastiveBatch empty;
  CHECK_THROWS_AS(empty.validate(), contract_error);

  ContrastiveBatch b = fx.batch(3, 2, true);
  CHECK_NOTHROW(b.validate());

  ContrastiveBatch miss = b;
  miss.positives.pop_back();
  CHECK_THROWS_AS(miss.validate(), contract_error);

  ContrastiveBatch draws = fx.batch(3, 2, false);
  draws.eps.pop_back();
  draws.t.pop_back();
  CHECK_THROWS_AS(draws.validate(), contract_error);

  ContrastiveBatch uneven = fx.batch(3, 2, true);
  uneven.t.push_back(0.5f);
  CHECK_THROWS_AS(uneven.validate(), contract_error);

  ContrastiveBatch ragged = b;
  RngStream rng(95, "loss_ragged");
  ragged.images[1] = randn({3, 8, 8}, rng);
  CHECK_THROWS_AS(ragged.validate(), shape_error);

  ContrastiveBatch noise = b;
  noise.eps[0] = randn({1, 16, 16}, rng);
  CHECK_THROWS_AS(noise.validate(), shape_error);

  ContrastiveBatch edge = b;
  edge.t[0] = 0.0f;
  CHECK_THROWS_AS(edge.validate(), domain_error);
  edge.t[0] = 1.0f;
  CHECK_THROWS_AS(edge.validate(), domain_error);

  ContrastiveBatch lonely = fx.batch(1, 0, true);
  CHECK_THROWS_AS(softrepa_loss(fx.model, fx.opt, lonely, tau), contract_error);
}

TEST_CASE("draw hash keys on the noise bytes and the timestep") {
  LossFixture fx(41, false);
  ContrastiveBatch shared = fx.batch(3, 1, true);
  CHECK(shared.draw_hash(0) == shared.draw_hash(1));
  CHECK(shared.draw_hash(0) == shared.draw_hash(2));

  ContrastiveBatch per = fx.batch(3, 1, false);
  CHECK(per.draw_hash(0) != per.draw_hash(1));

  ContrastiveBatch cloned = fx.batch(3, 1, false);
  cloned.eps[1] = cloned.eps[0].clone();
  cloned.t[1] = cloned.t[0];
  CHECK(cloned.draw_hash(0) == cloned.draw_hash(1));

  ContrastiveBatch tweaked = fx.batch(3, 1, true);
  tweaked.t[0] = 0.71f;
  CHECK(tweaked.draw_hash(0) != shared.draw_hash(0));
}

}
