#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include "softrepa/errors.hpp"
#include "softrepa/rng.hpp"
#include "softrepa/serde.hpp"
#include "test_util.hpp"

using namespace softrepa;

TEST_SUITE("rng") {

TEST_CASE("streams are deterministic and order independent") {
  RngStream a(42, "alpha", 3);
  std::vector<std::uint64_t> first;
  for (int i = 0; i < 8; ++i) first.push_back(a.next_u64());

  // Interleaving draws from an unrelated stream must not disturb replay.
  RngStream b(42, "beta", 0);
  RngStream a2(42, "alpha", 3);
  for (int i = 0; i < 8; ++i) {
    b.next_u64();
    CHECK(a2.next_u64() == first[static_cast<std::size_t>(i)]);
  }
}

TEST_CASE("distinct keys give distinct streams") {
  RngStream base(7, "p", 0);
  RngStream seed(8, "p", 0);
  RngStream purpose(7, "q", 0);
  RngStream index(7, "p", 1);
  const std::uint64_t v = base.next_u64();
  CHECK(seed.next_u64() != v);
  CHECK(purpose.next_u64() != v);
  CHECK(index.next_u64() != v);
}

TEST_CASE("uniform and uniform_int respect their ranges") {
  RngStream rng(11, "ranges", 0);
  std::set<int> seen;
  for (int i = 0; i < 2000; ++i) {
    const float u = rng.uniform();
    CHECK(u >= 0.0f);
    CHECK(u < 1.0f);
    const int k = rng.uniform_int(5);
    CHECK(k >= 0);
    CHECK(k < 5);
    seen.insert(k);
  }
  CHECK(seen.size() == 5);
}

TEST_CASE("normal draws have sane moments") {
  RngStream rng(13, "moments", 0);
  const int n = 20000;
  double mean = 0.0, var = 0.0;
  std::vector<double> xs(n);
  for (int i = 0; i < n; ++i) {
    xs[static_cast<std::size_t>(i)] = rng.normal();
    mean += xs[static_cast<std::size_t>(i)];
  }
  mean /= n;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= n - 1;
  CHECK(std::abs(mean) < 0.03);
  CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("fnv1a64 and mix64 are stable") {
  // Frozen reference values pin the hash so artifact digests cannot drift.
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
  CHECK(mix64(0) != 0);
  CHECK(mix64(1) != mix64(2));
}

}  // TEST_SUITE

TEST_SUITE("serde") {

TEST_CASE("writer reader round trip") {
  ByteWriter w;
  w.u8(0xab);
  w.u16(0x1234);
  w.u32(0xdeadbeef);
  w.u64(0x0123456789abcdefull);
  w.f32(-1.5f);
  w.str("hello");
  w.str("");

  ByteReader r(w.buffer());
  CHECK(r.u8() == 0xab);
  CHECK(r.u16() == 0x1234);
  CHECK(r.u32() == 0xdeadbeef);
  CHECK(r.u64() == 0x0123456789abcdefull);
  CHECK(r.f32() == -1.5f);
  CHECK(r.str() == "hello");
  CHECK(r.str() == "");
  CHECK(r.exhausted());
}

TEST_CASE("layout is little endian with fixed widths") {
  ByteWriter w;
  w.u32(0x01020304);
  const auto& b = w.buffer();
  REQUIRE(b.size() == 4);
  CHECK(b[0] == 0x04);
  CHECK(b[1] == 0x03);
  CHECK(b[2] == 0x02);
  CHECK(b[3] == 0x01);
}

TEST_CASE("reader rejects truncated input") {
  ByteWriter w;
  w.u16(7);
  ByteReader r(w.buffer());
  r.u8();
  r.u8();
  CHECK_THROWS_AS(r.u32(), format_error);
}

TEST_CASE("crc32 matches known vectors") {
  const std::string s = "123456789";
  CHECK(crc32(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()) == 0xcbf43926u);
  CHECK(crc32(nullptr, 0) == 0u);
}

TEST_CASE("file helpers round trip and report missing files") {
  testutil::TempDir tmp("serde");
  const auto path = tmp.file("blob.bin");
  std::vector<std::uint8_t> payload{1, 2, 3, 250};
  write_file(path, payload);
  CHECK(read_file(path) == payload);

  write_text_file(tmp.file("t.txt"), "line\n");
  const auto text = read_file(tmp.file("t.txt"));
  CHECK(std::string(text.begin(), text.end()) == "line\n");

  CHECK_THROWS_AS(read_file(tmp.file("absent.bin")), io_error);
}

TEST_CASE("fmt_float round trips through parse") {
  for (double v : {0.0, 1.0, -2.5, 0.1, 3.14159265358979, 1e-7, 12345678.0}) {
    const std::string s = fmt_float(v);
    CHECK(std::stod(s) == v);
    CHECK(s.find(',') == std::string::npos);
  }
}

}  // TEST_SUITE
