#include <doctest.h>

#include <algorithm>
#include <set>
#include <vector>

#include "softrepa/corpus.hpp"
#include "softrepa/errors.hpp"
#include "softrepa/rng.hpp"
#include "softrepa/serde.hpp"
#include "test_util.hpp"

using namespace softrepa;
using testutil::bit_equal;

namespace {

std::vector<Scene> all_scenes() {
  std::vector<Scene> out;
  std::vector<SceneObject> singles;
  for (int c = 0; c < 4; ++c)
    for (int s = 0; s < 3; ++s)
      for (int p = 0; p < 5; ++p)
        singles.push_back({static_cast<Color>(c), static_cast<Shape>(s), static_cast<Position>(p)});
  for (const auto& obj : singles) out.push_back(Scene{{obj}});
  for (const auto& first : singles)
    for (const auto& second : singles)
      if (second.pos != first.pos) out.push_back(Scene{{first, second}});
  return out;
}

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("exhaustive caption round trip over every scene") {
  const auto scenes = all_scenes();
  CHECK(scenes.size() == 60 + 60 * 48);
  std::set<Caption> seen;
  for (const Scene& s : scenes) {
    const Caption c = caption_of(s);
    const Scene back = scene_of(c);
    REQUIRE(back.objects.size() == s.objects.size());
    for (std::size_t i = 0; i < s.objects.size(); ++i) CHECK(back.objects[i] == s.objects[i]);

    const Caption reparsed = parse_caption(caption_text(c));
    CHECK(reparsed == c);
    seen.insert(c);
  }
  CHECK(seen.size() == scenes.size());
}

TEST_CASE("caption text reads naturally") {
  Scene s{{{Color::red, Shape::circle, Position::center}}};
  CHECK(caption_text(caption_of(s)) == "1 red circle center");
  Scene two{{{Color::green, Shape::square, Position::left},
             {Color::yellow, Shape::triangle, Position::top}}};
  CHECK(caption_text(caption_of(two)) == "2 green square left yellow triangle top");
}

TEST_CASE("malformed captions are rejected") {
  Caption c = caption_of(Scene{{{Color::red, Shape::circle, Position::center}}});
  c.tokens[0] = TOK_RED;  // color token in the count slot
  CHECK_THROWS_AS(scene_of(c), contract_error);
  CHECK_THROWS_AS(parse_caption("1 red circle"), contract_error);
  CHECK_THROWS_AS(parse_caption("3 red circle center"), contract_error);
}

TEST_CASE("null caption is distinct and detected") {
  CHECK(is_null_caption(null_caption()));
  const Caption real = caption_of(Scene{{{Color::blue, Shape::square, Position::right}}});
  CHECK_FALSE(is_null_caption(real));
}

TEST_CASE("render is deterministic and in range") {
  Scene s{{{Color::red, Shape::triangle, Position::top},
           {Color::blue, Shape::circle, Position::bottom}}};
  Tensor a = render(s);
  Tensor b = render(s);
  CHECK(a.shape() == std::vector<int>{kChannels, kImageSize, kImageSize});
  CHECK(bit_equal(a, b));
  for (float v : a.data()) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("verifier accepts every ground-truth render") {
  const auto scenes = all_scenes();
  // Exhaustive over singles, strided over pairs to stay fast.
  for (std::size_t i = 0; i < scenes.size(); i += (i < 60 ? 1 : 37)) {
    const Scene& s = scenes[i];
    const VerifierReport r = verify(render(s), caption_of(s));
    CHECK(r.overall);
  }
}

TEST_CASE("verifier rejects wrong claims per attribute") {
  Scene s{{{Color::red, Shape::circle, Position::center}}};
  const Tensor img = render(s);

  Scene wrong_color{{{Color::green, Shape::circle, Position::center}}};
  VerifierReport r = verify(img, caption_of(wrong_color));
  CHECK_FALSE(r.overall);
  CHECK_FALSE(r.per_attribute.at("color1"));
  CHECK(r.per_attribute.at("shape1"));
  CHECK(r.per_attribute.at("position1"));

  Scene wrong_shape{{{Color::red, Shape::square, Position::center}}};
  r = verify(img, caption_of(wrong_shape));
  CHECK_FALSE(r.per_attribute.at("shape1"));

  Scene wrong_pos{{{Color::red, Shape::circle, Position::left}}};
  r = verify(img, caption_of(wrong_pos));
  CHECK_FALSE(r.per_attribute.at("position1"));

  Scene wrong_count{{{Color::red, Shape::circle, Position::center},
                     {Color::red, Shape::circle, Position::left}}};
  r = verify(img, caption_of(wrong_count));
  CHECK_FALSE(r.per_attribute.at("count"));
}

TEST_CASE("verifier tolerates noise without passing garbage") {
  Scene s{{{Color::yellow, Shape::square, Position::left}}};
  Tensor img = render(s).clone();
  RngStream rng(3, "verifier_noise", 0);
  for (float& v : img.data()) v += 0.08f * rng.normal();
  CHECK(verify(img, caption_of(s)).overall);

  Tensor noise = Tensor::uninit(img.shape());
  for (float& v : noise.data()) v = rng.normal();
  CHECK_FALSE(verify(noise, caption_of(s)).overall);
}

TEST_CASE("verifier never throws on garbage input") {
  Tensor img = Tensor::full({kChannels, kImageSize, kImageSize}, 0.0f);
  img.data()[0] = std::numeric_limits<float>::quiet_NaN();
  img.data()[1] = std::numeric_limits<float>::infinity();
  const Caption c = caption_of(Scene{{{Color::red, Shape::circle, Position::center}}});
  const VerifierReport r = verify(img, c);
  CHECK_FALSE(r.overall);
}

TEST_CASE("permute negatives form a derangement") {
  const std::vector<Caption> batch = sample_caption_set(5, 6, 0.5f);
  const auto negs = negative_captions(batch, NegativeMode::permute, 99);
  REQUIRE(negs.size() == batch.size());
  std::vector<Caption> sorted_negs = negs;
  std::vector<Caption> sorted_batch = batch;
  std::sort(sorted_negs.begin(), sorted_negs.end());
  std::sort(sorted_batch.begin(), sorted_batch.end());
  CHECK(sorted_negs == sorted_batch);  // a permutation
  for (std::size_t i = 0; i < batch.size(); ++i) CHECK_FALSE(negs[i] == batch[i]);

  CHECK_THROWS_AS(negative_captions({batch[0]}, NegativeMode::permute, 1), contract_error);
}

TEST_CASE("attribute flip changes exactly one slot") {
  RngStream rng(7, "flip_caps", 0);
  for (int trial = 0; trial < 64; ++trial) {
    const Caption pos = caption_of(sample_scene(rng, 0.5f));
    const auto negs = negative_captions({pos}, NegativeMode::attribute_flip,
                                        1000 + static_cast<std::uint64_t>(trial));
    REQUIRE(negs.size() == 1);
    const Caption neg = negs[0];
    CHECK_FALSE(neg == pos);
    int diff = 0;
    for (int i = 0; i < kCaptionLen; ++i)
      if (neg.tokens[static_cast<std::size_t>(i)] != pos.tokens[static_cast<std::size_t>(i)]) ++diff;
    CHECK(diff == 1);
    CHECK(scene_of(neg).objects.size() == scene_of(pos).objects.size());
  }
}

TEST_CASE("generate is deterministic per record and verified") {
  const Dataset ds = generate(24, 77, 0.5f);
  CHECK(ds.pairs.size() == 24);
  CHECK(ds.seed == 77);

  const Dataset again = generate(24, 77, 0.5f);
  for (int i = 0; i < 24; ++i) {
    CHECK(again.pairs[static_cast<std::size_t>(i)].caption == ds.pairs[static_cast<std::size_t>(i)].caption);
    CHECK(bit_equal(again.pairs[static_cast<std::size_t>(i)].image, ds.pairs[static_cast<std::size_t>(i)].image));
    CHECK(verify(ds.pairs[static_cast<std::size_t>(i)].image, ds.pairs[static_cast<std::size_t>(i)].caption).overall);
  }

  // Record i must not depend on count.
  const Dataset prefix = generate(8, 77, 0.5f);
  for (int i = 0; i < 8; ++i)
    CHECK(prefix.pairs[static_cast<std::size_t>(i)].caption == ds.pairs[static_cast<std::size_t>(i)].caption);
}

TEST_CASE("two_object_fraction steers scene sizes") {
  const Dataset ones = generate(64, 5, 0.0f);
  for (const auto& p : ones.pairs) CHECK(scene_of(p.caption).objects.size() == 1);
  const Dataset twos = generate(64, 5, 1.0f);
  for (const auto& p : twos.pairs) CHECK(scene_of(p.caption).objects.size() == 2);
}

TEST_CASE("dataset file round trip preserves everything") {
  testutil::TempDir tmp("corpus");
  Dataset ds = generate(10, 123, 0.5f);
  ds.digest = "deadbeef01234567";
  const auto path = tmp.file("ds.srds");
  save_dataset(ds, path);
  const Dataset back = load_dataset(path);
  CHECK(back.seed == ds.seed);
  CHECK(back.digest == ds.digest);
  CHECK(back.image_size == ds.image_size);
  CHECK(back.pairs.size() == ds.pairs.size());
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    CHECK(back.pairs[i].caption == ds.pairs[i].caption);
    CHECK(bit_equal(back.pairs[i].image, ds.pairs[i].image));
  }

  // Same content twice -> identical bytes.
  save_dataset(ds, tmp.file("ds2.srds"));
  CHECK(read_file(path) == read_file(tmp.file("ds2.srds")));
}

TEST_CASE("dataset loader rejects corruption") {
  testutil::TempDir tmp("corpus_bad");
  const Dataset ds = generate(3, 9, 0.5f);
  const auto path = tmp.file("ds.srds");
  save_dataset(ds, path);

  auto bytes = read_file(path);
  bytes[0] ^= 0xff;  // magic
  write_file(tmp.file("bad_magic.srds"), bytes);
  CHECK_THROWS_AS(load_dataset(tmp.file("bad_magic.srds")), format_error);

  bytes = read_file(path);
  bytes.push_back(0);  // trailing byte
  write_file(tmp.file("trailing.srds"), bytes);
  CHECK_THROWS_AS(load_dataset(tmp.file("trailing.srds")), format_error);

  CHECK_THROWS_AS(load_dataset(tmp.file("missing.srds")), io_error);
}

TEST_CASE("validation split is stable and close to the requested rate") {
  int val = 0;
  const int n = 2000;
  for (int i = 0; i < n; ++i) {
    if (is_val_index(31, i, 10)) ++val;
    CHECK(is_val_index(31, i, 10) == is_val_index(31, i, 10));
  }
  CHECK(val > n / 20);
  CHECK(val < n / 5);
  for (int i = 0; i < 50; ++i) CHECK_FALSE(is_val_index(31, i, 0));
}

TEST_CASE("sample_caption_set returns distinct decodable captions") {
  const auto caps = sample_caption_set(17, 40, 0.5f);
  REQUIRE(caps.size() == 40);
  std::set<Caption> uniq(caps.begin(), caps.end());
  CHECK(uniq.size() == caps.size());
  for (const Caption& c : caps) CHECK_NOTHROW(scene_of(c));
  CHECK(sample_caption_set(17, 40, 0.5f) == caps);
}

TEST_CASE("shape masks and regions are well formed") {
  for (Shape s : {Shape::circle, Shape::square, Shape::triangle}) {
    const auto mask = shape_mask(s);
    int on = 0;
    for (bool b : mask) on += b;
    CHECK(on > 0);
    CHECK(on <= kStamp * kStamp);
  }
  // Square fills the whole stamp; circle and triangle must not.
  const auto sq = shape_mask(Shape::square);
  CHECK(std::count(sq.begin(), sq.end(), true) == kStamp * kStamp);
  const auto ci = shape_mask(Shape::circle);
  CHECK(std::count(ci.begin(), ci.end(), true) < kStamp * kStamp);

  std::set<std::pair<int, int>> origins;
  for (Position p : {Position::center, Position::left, Position::right, Position::top, Position::bottom}) {
    const auto [r, c] = region_origin(p, kImageSize);
    CHECK(r >= 0);
    CHECK(c >= 0);
    CHECK(r + kStamp <= kImageSize);
    CHECK(c + kStamp <= kImageSize);
    origins.insert({r, c});
  }
  CHECK(origins.size() == 5);
}

}  // TEST_SUITE
