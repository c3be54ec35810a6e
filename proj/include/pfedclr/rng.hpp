#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace pfedclr {

// Named substreams. Every random draw in the system comes from an engine
// seeded by derive_seed(root, stream, a, b), so there is no sequential RNG
// state shared between clients, rounds, or threads.
enum class Stream : std::uint64_t {
  kGlobalInit = 1,
  kUserInit = 2,
  kBufferInit = 3,
  kTrainNegStep1 = 4,
  kTrainNegStep2 = 5,
  kShuffleStep1 = 6,
  kShuffleStep2 = 7,
  kEvalNeg = 8,
  kClientSample = 9,
  kUploadNoise = 10,
};

// splitmix64 finalizer; good avalanche, cheap to evaluate.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t root, Stream stream,
                                    std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t h = mix64(root ^ 0x6a09e667f3bcc908ull);
  h = mix64(h ^ static_cast<std::uint64_t>(stream));
  h = mix64(h ^ a);
  h = mix64(h ^ b);
  return h;
}

// mt19937_64 is fully specified by the standard, so sequences are identical
// across platforms. The distributions below are hand-rolled because the
// standard library's are not portable.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Unbiased integer in [0, n). Lemire's multiply-shift with rejection.
  std::uint64_t below(std::uint64_t n) {
    std::uint64_t x = gen_();
    __uint128_t m = static_cast<__uint128_t>(x) * n;
    auto lo = static_cast<std::uint64_t>(m);
    if (lo < n) {
      std::uint64_t t = (0 - n) % n;
      while (lo < t) {
        x = gen_();
        m = static_cast<__uint128_t>(x) * n;
        lo = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // Uniform on the open interval (0, 1); never returns an endpoint.
  double uniform_open() {
    return (static_cast<double>(gen_() >> 11) + 0.5) * 0x1.0p-53;
  }

  // Box-Muller, cosine branch only.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform_open();
    double u2 = uniform();
    double z = std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * std::numbers::pi * u2);
    return mean + stddev * z;
  }

  // Zero-mean Laplace with the given scale, via inverse CDF.
  double laplace(double scale) {
    double u = uniform_open();
    return u < 0.5 ? scale * std::log(2.0 * u) : -scale * std::log(2.0 * (1.0 - u));
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace pfedclr
