#pragma once

#include <cstdint>
#include <string_view>

namespace softrepa {

// Counter-based deterministic RNG. Every consumer owns a stream keyed by
// (seed, purpose, index); draws are a pure function of (key, counter), so
// results do not depend on evaluation order across streams and any stream can
// be reproduced in isolation.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0);

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  float uniform();
  // Uniform integer in [0, n), n > 0.
  int uniform_int(int n);
  // Standard normal via Box-Muller.
  float normal();

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  bool have_spare_ = false;
  float spare_ = 0.0f;
};

// FNV-1a over a byte string; also used for config digests.
std::uint64_t fnv1a64(std::string_view bytes);

// SplitMix64-style finalizer.
std::uint64_t mix64(std::uint64_t x);

}  // namespace softrepa
