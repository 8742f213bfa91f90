#include "mmlqg/rng.hpp"

#include <cmath>

namespace mmlqg {
namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi,
                    std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Odd mantissa keeps the result strictly inside (0, 1), which Box-Muller
// needs for the log.
inline double u64_to_unit(std::uint64_t x) {
  return static_cast<double>((x >> 11) | 1ull) * 0x1.0p-53;
}

}  // namespace

std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                        std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kPhiloxM0, ctr[0], hi0, lo0);
    mulhilo(kPhiloxM1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kPhiloxW0;
    key[1] += kPhiloxW1;
  }
  return ctr;
}

GaussianStream::GaussianStream(std::uint64_t seed, std::uint64_t path,
                               NoiseSource source, std::uint32_t type,
                               std::uint32_t rank_in_type) {
  std::uint64_t k = splitmix64(seed);
  k = splitmix64(k ^ path);
  k = splitmix64(k ^ (static_cast<std::uint64_t>(source) << 48));
  k = splitmix64(k ^ (static_cast<std::uint64_t>(type) << 32) ^ rank_in_type);
  key_ = {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
}

double GaussianStream::uniform(std::uint64_t step, std::uint32_t lane) const {
  const std::array<std::uint32_t, 4> ctr = {
      static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
      lane, 0u};
  const auto out = philox4x32(ctr, key_);
  return u64_to_unit((static_cast<std::uint64_t>(out[0]) << 32) | out[1]);
}

double GaussianStream::normal(std::uint64_t step, std::uint32_t lane) const {
  // One counter block yields 128 bits = two uniforms = one Box-Muller pair;
  // lane selects the cos/sin member so consecutive lanes stay independent.
  const std::uint32_t pair = lane >> 1;
  const std::array<std::uint32_t, 4> ctr = {
      static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
      pair, 1u};
  const auto out = philox4x32(ctr, key_);
  const double u1 =
      u64_to_unit((static_cast<std::uint64_t>(out[0]) << 32) | out[1]);
  const double u2 =
      u64_to_unit((static_cast<std::uint64_t>(out[2]) << 32) | out[3]);
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * M_PI * u2;
  return (lane & 1u) ? radius * std::sin(angle) : radius * std::cos(angle);
}

Vector GaussianStream::normals(std::uint64_t step, int dim) const {
  Vector z(dim);
  for (int j = 0; j < dim; ++j) z[j] = normal(step, static_cast<std::uint32_t>(j));
  return z;
}

}  // namespace mmlqg
