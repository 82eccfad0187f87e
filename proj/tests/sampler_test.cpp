#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "softrepa/checkpoint.hpp"
#include "softrepa/corpus.hpp"
#include "softrepa/errors.hpp"
#include "softrepa/sampler.hpp"
#include "softrepa/serde.hpp"
#include "test_util.hpp"

using namespace softrepa;

namespace {

struct SamplerFixture {
  Checkpoint ck;
  std::vector<Caption> captions;

  explicit SamplerFixture(std::uint64_t seed)
      : ck(testutil::jittered_checkpoint(testutil::tiny_run(), seed)),
        captions(sample_caption_set(seed + 1, 4, 0.5f)) {}
};

Checkpoint with_soft(const SamplerFixture& fx, std::uint64_t seed) {
  Checkpoint soft = fx.ck;
  soft.stage = "soft";
  soft.soft = SoftTokenBank(soft.config.soft.bank, soft.config.model.hidden, seed);
  return soft;
}

}  // namespace

TEST_SUITE("sampler") {

TEST_CASE("guidance config validation") {
  GuidanceConfig g;
  CHECK_NOTHROW(g.validate());
  g.w = -1.0f;
  CHECK_THROWS_AS(g.validate(), config_error);
  g.w = std::nanf("");
  CHECK_THROWS_AS(g.validate(), config_error);
  g.w = 2.0f;
  g.steps = 0;
  CHECK_THROWS_AS(g.validate(), config_error);
}

TEST_CASE("w=0 never consults the caption") {
  SamplerFixture fx(61);
  GuidanceConfig g;
  g.w = 0.0f;
  g.steps = 5;

  SampleResult a = sample(fx.ck, fx.captions[0], g, 900);
  SampleResult b = sample(fx.ck, fx.captions[1], g, 900);
  CHECK(testutil::bit_equal(a.image, b.image));

  RngStream rng(62, "sampler_x");
  Tensor x = randn({2, 3, 16, 16}, rng);
  const std::vector<float> ts(2, 0.5f);
  std::vector<Caption> caps = {fx.captions[0], fx.captions[1]};
  Tensor guided = guided_velocity(fx.ck, x, 0.5f, caps, g);
  std::vector<Caption> nulls(2, null_caption());
  Tensor bare = fx.ck.model.forward(x, ts, nulls, ForwardOptions{});
  CHECK(testutil::bit_equal(guided, bare));

  // The unconditional branch stays adapter-free even when tuning is enabled.
  Checkpoint soft = with_soft(fx, 63);
  GuidanceConfig gs = g;
  gs.use_soft = true;
  CHECK(testutil::bit_equal(guided_velocity(soft, x, 0.5f, caps, gs), bare));
}

TEST_CASE("w=1 is exactly the conditional branch") {
  SamplerFixture fx(64);
  GuidanceConfig g;
  g.w = 1.0f;
  g.steps = 5;

  RngStream rng(65, "sampler_x");
  Tensor x = randn({2, 3, 16, 16}, rng);
  const std::vector<float> ts(2, 0.3f);
  std::vector<Caption> caps = {fx.captions[0], fx.captions[1]};
  Tensor guided = guided_velocity(fx.ck, x, 0.3f, caps, g);
  Tensor cond = fx.ck.model.forward(x, ts, caps, ForwardOptions{});
  CHECK(testutil::bit_equal(guided, cond));

  Checkpoint soft = with_soft(fx, 66);
  GuidanceConfig gs = g;
  gs.use_soft = true;
  ForwardOptions tuned = options_for(soft, true);
  CHECK(testutil::bit_equal(guided_velocity(soft, x, 0.3f, caps, gs),
                            soft.model.forward(x, ts, caps, tuned)));

  GuidanceConfig g2 = g;
  g2.w = 2.0f;
  CHECK(!testutil::bit_equal(guided_velocity(fx.ck, x, 0.3f, caps, g2), guided));

  CHECK_THROWS_AS(guided_velocity(fx.ck, x, 0.3f, {fx.captions[0]}, g), contract_error);
}

TEST_CASE("velocity and x0-prediction parameterizations integrate the same path") {
  SamplerFixture fx(67);
  GuidanceConfig gv;
  gv.steps = 8;
  GuidanceConfig gx = gv;
  gx.parameterization = GuidanceConfig::Param::x0_pred;

  SampleResult rv = sample(fx.ck, fx.captions[2], gv, 901);
  SampleResult rx = sample(fx.ck, fx.captions[2], gx, 901);
  CHECK(testutil::max_abs_diff(rv.image, rx.image) <= 1e-5);
  REQUIRE(rv.trajectory.x.size() == rx.trajectory.x.size());
  for (std::size_t i = 0; i < rv.trajectory.x.size(); ++i)
    CHECK(testutil::max_abs_diff(rv.trajectory.x[i], rx.trajectory.x[i]) <= 1e-5);
}

TEST_CASE("trajectory walks the uniform backward grid") {
  SamplerFixture fx(68);
  GuidanceConfig g;
  g.steps = 6;
  SampleResult r = sample(fx.ck, fx.captions[0], g, 902);

  REQUIRE(r.trajectory.t.size() == 7);
  REQUIRE(r.trajectory.x.size() == 7);
  CHECK(r.trajectory.t.front() == 1.0f);
  CHECK(r.trajectory.t.back() == 0.0f);
  for (int k = 0; k <= 6; ++k)
    CHECK(r.trajectory.t[static_cast<std::size_t>(k)] ==
          static_cast<float>(6 - k) / static_cast<float>(6));
  for (std::size_t k = 1; k < r.trajectory.t.size(); ++k)
    CHECK(r.trajectory.t[k] < r.trajectory.t[k - 1]);
  for (const Tensor& x : r.trajectory.x) CHECK(x.shape() == std::vector<int>{3, 16, 16});
  CHECK(testutil::bit_equal(r.trajectory.x.back(), r.image));
}

TEST_CASE("batched sampling reproduces one-at-a-time sampling bit for bit") {
  SamplerFixture fx(69);
  GuidanceConfig g;
  g.steps = 4;
  std::vector<Caption> caps = {fx.captions[0], fx.captions[1], fx.captions[2]};
  std::vector<std::uint64_t> seeds = {903, 904, 905};

  std::vector<Tensor> batch = sample_batch(fx.ck, caps, g, seeds);
  REQUIRE(batch.size() == 3);
  for (int i = 0; i < 3; ++i) {
    SampleResult single = sample(fx.ck, caps[static_cast<std::size_t>(i)], g,
                                 seeds[static_cast<std::size_t>(i)]);
    CHECK(testutil::bit_equal(batch[static_cast<std::size_t>(i)], single.image));
  }

  CHECK_THROWS_AS(sample_batch(fx.ck, caps, g, {903}), contract_error);
  CHECK_THROWS_AS(sample_batch(fx.ck, {}, g, {}), contract_error);
}

TEST_CASE("inversion: zero steps is the identity, runs are deterministic, inputs are guarded") {
  SamplerFixture fx(70);
  Scene scene = scene_of(fx.captions[0]);
  Tensor img = render(scene);

  Tensor same = invert(fx.ck, img, fx.captions[0], 0, false);
  CHECK(testutil::bit_equal(same, img));

  Tensor inv1 = invert(fx.ck, img, fx.captions[0], 4, false);
  Tensor inv2 = invert(fx.ck, img, fx.captions[0], 4, false);
  CHECK(testutil::bit_equal(inv1, inv2));
  CHECK(inv1.shape() == img.shape());
  CHECK(!testutil::bit_equal(inv1, img));

  CHECK_THROWS_AS(invert(fx.ck, img, fx.captions[0], -1, false), contract_error);
  RngStream rng(71, "sampler_bad");
  Tensor flat = randn({3, 16}, rng);
  CHECK_THROWS_AS(invert(fx.ck, flat, fx.captions[0], 2, false), shape_error);
  Tensor loud = img.clone();
  loud.data()[0] = 2.0f;
  CHECK_THROWS_AS(invert(fx.ck, loud, fx.captions[0], 2, false), domain_error);
}

TEST_CASE("edit inverts under the source and regenerates under the target") {
  SamplerFixture fx(72);
  const Caption source = fx.captions[0];
  const Caption target = negative_captions({source}, NegativeMode::attribute_flip, 73)[0];
  Tensor img = render(scene_of(source));

  GuidanceConfig g;
  g.steps = 4;
  g.w = 1.5f;
  EditResult r = edit(fx.ck, img, source, target, g);
  CHECK(r.image.shape() == img.shape());
  CHECK(std::isfinite(r.mse_vs_source));
  CHECK(r.mse_vs_source >= 0.0f);
  CHECK(!r.target_report.per_attribute.empty());

  EditResult r2 = edit(fx.ck, img, source, target, g);
  CHECK(testutil::bit_equal(r2.image, r.image));
  CHECK(r2.mse_vs_source == r.mse_vs_source);

  Caption junk;
  junk.tokens = {9, 9, 9, 9, 9, 9, 9, 9};
  CHECK_THROWS_AS(edit(fx.ck, img, junk, target, g), contract_error);
}

TEST_CASE("image files round trip and reject corruption") {
  testutil::TempDir dir("srim");
  RngStream rng(74, "sampler_img");
  Tensor img = randn({3, 4, 5}, rng);
  const std::string path = dir.file("x.srim");
  save_image(path, img, "cafe0123cafe0123");

  LoadedImage back = load_image(path);
  CHECK(testutil::bit_equal(back.image, img));
  CHECK(back.digest == "cafe0123cafe0123");

  CHECK_THROWS_AS(load_image(dir.file("missing.srim")), io_error);

  auto bytes = read_file(path);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  write_file(dir.file("flip.srim"), flipped);
  CHECK_THROWS_AS(load_image(dir.file("flip.srim")), format_error);

  std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 6);
  write_file(dir.file("cut.srim"), cut);
  CHECK_THROWS_AS(load_image(dir.file("cut.srim")), format_error);

  write_file(dir.file("stub.srim"), {'S', 'R', 'I', 'M', 1});
  CHECK_THROWS_AS(load_image(dir.file("stub.srim")), format_error);

  Tensor flat = randn({3, 16}, rng);
  CHECK_THROWS_AS(save_image(dir.file("bad.srim"), flat, "d"), shape_error);
}

}
