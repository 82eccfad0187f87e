#include "softrepa/rng.hpp"

#include <cmath>
#include <numbers>

#include "softrepa/errors.hpp"

namespace softrepa {

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

RngStream::RngStream(std::uint64_t seed, std::string_view purpose, std::uint64_t index) {
  key_ = mix64(seed ^ mix64(fnv1a64(purpose) + 0x632be59bd9b4e019ull * index));
}

std::uint64_t RngStream::next_u64() {
  return mix64(key_ + 0x9e3779b97f4a7c15ull * ++counter_);
}

float RngStream::uniform() {
  // 24 high bits -> exactly representable in f32, value in [0, 1).
  return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f;
}

int RngStream::uniform_int(int n) {
  check(n > 0, "uniform_int needs n > 0");
  return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
}

float RngStream::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  float u1 = 1.0f - uniform();  // (0, 1]
  float u2 = uniform();
  float r = std::sqrt(-2.0f * std::log(u1));
  float a = 2.0f * std::numbers::pi_v<float> * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

}  // namespace softrepa
