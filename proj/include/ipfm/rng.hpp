#pragma once

// Counter-based splittable random numbers.
//
// A draw is a pure function of (master_seed, stream_id, counter), so results do
// not depend on call order across streams or on thread scheduling. Streams are
// keyed by a SplitMix64 hash of (master_seed, stream_id); within a stream the
// counter walks a Weyl sequence that is finalized by the SplitMix64 mixer.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>

#include "ipfm/error.hpp"

namespace ipfm {

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t hash_pair(std::uint64_t a, std::uint64_t b) noexcept {
  return mix64(mix64(a + kGolden) ^ (b * 0xD6E8FEB86659FD93ULL + 0x2545F4914F6CDD1DULL));
}

// FNV-1a, used to turn purpose labels into stream ids.
constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

struct RngState {
  std::uint64_t master_seed = 0;
  std::uint64_t stream_id = 0;
  std::uint64_t counter = 0;

  RngState() = default;
  explicit RngState(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t ctr = 0)
      : master_seed(seed), stream_id(stream), counter(ctr) {}

  std::uint64_t next_u64() noexcept {
    const std::uint64_t key = detail::hash_pair(master_seed, stream_id);
    return detail::mix64(key + (counter++) * detail::kGolden);
  }

  // Uniform on the open interval (0, 1); 53 random bits.
  double uniform() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  // Box-Muller, one variate per pair of uniforms. No cached spare so that the
  // draw stays a function of the counter alone.
  double normal() noexcept {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Child stream: independent of the parent and of siblings with other ids.
  [[nodiscard]] RngState split(std::uint64_t id) const noexcept {
    return RngState(master_seed, detail::hash_pair(stream_id, id), 0);
  }
  [[nodiscard]] RngState split(std::string_view label) const noexcept {
    return split(detail::fnv1a(label));
  }
  [[nodiscard]] RngState split(std::string_view label, std::uint64_t id) const noexcept {
    return split(detail::fnv1a(label)).split(id);
  }
};

// Gamma(shape, 1) via Marsaglia-Tsang; shape < 1 uses the U^(1/a) boost.
inline double gamma_sample(double shape, RngState& rng) {
  IPFM_REQUIRE(shape > 0.0 && std::isfinite(shape), "gamma_sample: shape must be positive");
  if (shape < 1.0) {
    const double g = gamma_sample(shape + 1.0, rng);
    return g * std::pow(rng.uniform(), 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double z;
    double v;
    do {
      z = rng.normal();
      v = 1.0 + c * z;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform();
    if (u < 1.0 - 0.0331 * z * z * z * z) return d * v;
    if (std::log(u) < 0.5 * z * z + d * (1.0 - v + std::log(v))) return d * v;
  }
}

// Beta(a, b) from two Gamma draws. Result lies in (0, 1) for all practical shapes.
inline double beta_sample(double a, double b, RngState& rng) {
  IPFM_REQUIRE(a > 0.0 && b > 0.0, "beta_sample: shapes must be positive");
  const double x = gamma_sample(a, rng);
  const double y = gamma_sample(b, rng);
  return x / (x + y);
}

// Uniform direction on the unit sphere S^{n-1}.
inline void sample_unit_sphere(std::span<double> out, RngState& rng) {
  if (out.empty()) throw ConfigError("sample_unit_sphere: dimension must be >= 1");
  for (;;) {
    double norm2 = 0.0;
    for (double& v : out) {
      v = rng.normal();
      norm2 += v * v;
    }
    if (norm2 > 1e-300) {
      const double norm = std::sqrt(norm2);
      for (double& v : out) v /= norm;
      return;
    }
  }
}

}  // namespace ipfm
