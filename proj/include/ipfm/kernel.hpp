#pragma once

// Perturbation kernels p_r(x | y) ∝ (|x - y|^2 + r^2)^{-(N+D)/2} for finite D and
// their Gaussian limit for D = infinity. Sigma is the canonical noise coordinate;
// r = sigma * sqrt(D) is always derived from it, never the other way around.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ipfm/error.hpp"
#include "ipfm/mlp.hpp"
#include "ipfm/rng.hpp"

namespace ipfm {

struct DimSpec {
  std::size_t data_dim = 2;
  std::optional<std::uint64_t> aux_dim;  // nullopt means D = infinity

  static DimSpec finite(std::size_t n, std::uint64_t d) {
    if (n < 1) throw ConfigError("DimSpec: data dimension must be >= 1");
    if (d < 1) throw ConfigError("DimSpec: finite D must be >= 1");
    return {n, d};
  }
  static DimSpec infinite(std::size_t n) {
    if (n < 1) throw ConfigError("DimSpec: data dimension must be >= 1");
    return {n, std::nullopt};
  }

  bool is_infinite() const { return !aux_dim.has_value(); }
  double D() const {
    if (!aux_dim) throw DispatchError("DimSpec: D is infinite");
    return static_cast<double>(*aux_dim);
  }
  double sqrt_D() const { return std::sqrt(D()); }
  // Exponent (N + D) / 2 of the kernel.
  double half_total() const { return 0.5 * (static_cast<double>(data_dim) + D()); }

  std::string d_label() const { return aux_dim ? std::to_string(*aux_dim) : std::string("inf"); }
};

// Parses "inf" / "infinity" or a positive integer.
inline DimSpec parse_dim_spec(std::size_t n, const std::string& d) {
  if (d == "inf" || d == "infinity" || d == "Inf") return DimSpec::infinite(n);
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(d, &pos);
  } catch (const std::exception&) {
    throw ConfigError("DimSpec: cannot parse D='" + d + "'");
  }
  if (pos != d.size() || v < 1) throw ConfigError("DimSpec: D must be a positive integer or 'inf'");
  return DimSpec::finite(n, static_cast<std::uint64_t>(v));
}

struct NoiseLevel {
  double sigma;
  double r(const DimSpec& spec) const { return sigma * spec.sqrt_D(); }
};

struct NoiseSchedule {
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;
  double t_max = 0.98;

  void validate() const {
    if (!(sigma_min > 0.0 && sigma_min < sigma_max)) throw ConfigError("NoiseSchedule: need 0 < sigma_min < sigma_max");
    if (!(rho > 0.0)) throw ConfigError("NoiseSchedule: rho must be positive");
    if (!(t_max >= 0.0 && t_max <= 1.0)) throw ConfigError("NoiseSchedule: t_max must lie in [0, 1]");
  }
};

// sigma(t) = (smax^(1/rho) + (1 - t)(smin^(1/rho) - smax^(1/rho)))^rho, endpoints pinned exactly.
inline double sigma_of_t(double t, const NoiseSchedule& s) {
  IPFM_REQUIRE(t >= 0.0 && t <= 1.0, "sigma_of_t: t must lie in [0, 1]");
  if (t == 0.0) return s.sigma_min;
  if (t == 1.0) return s.sigma_max;
  const double a = std::pow(s.sigma_max, 1.0 / s.rho);
  const double b = std::pow(s.sigma_min, 1.0 / s.rho);
  return std::pow(a + (1.0 - t) * (b - a), s.rho);
}

// Decreasing grid sigma_0 = sigma_max > ... > sigma_{K-1} = sigma_min.
inline std::vector<double> karras_grid(const NoiseSchedule& s, std::size_t steps) {
  if (steps < 2) throw ConfigError("karras_grid: need at least 2 grid points");
  s.validate();
  std::vector<double> g(steps);
  const double a = std::pow(s.sigma_max, 1.0 / s.rho);
  const double b = std::pow(s.sigma_min, 1.0 / s.rho);
  for (std::size_t i = 0; i < steps; ++i) {
    const double f = static_cast<double>(i) / static_cast<double>(steps - 1);
    g[i] = std::pow(a + f * (b - a), s.rho);
  }
  g.front() = s.sigma_max;
  g.back() = s.sigma_min;
  return g;
}

// Radius R = |x - y| under the finite-D kernel. Substituting u = R^2 / (R^2 + r^2)
// turns the radial density R^{N-1}(R^2 + r^2)^{-(N+D)/2} into Beta(N/2, D/2), so
// R = r sqrt(u / (1 - u)). The odds u / (1 - u) are formed directly as a ratio
// of the two Gamma draws behind the Beta variate, which keeps precision when u
// is close to 1.
inline double radial_sample(const DimSpec& spec, double sigma, RngState& rng) {
  if (spec.is_infinite()) throw DispatchError("radial_sample: D = infinity uses the Gaussian path");
  IPFM_REQUIRE(sigma > 0.0, "radial_sample: sigma must be positive");
  const double r = NoiseLevel{sigma}.r(spec);
  const double ga = gamma_sample(0.5 * static_cast<double>(spec.data_dim), rng);
  const double gb = gamma_sample(0.5 * spec.D(), rng);
  return r * std::sqrt(ga / gb);
}

// x = y + noise, written into `out` (may alias `y`).
inline void perturb_into(std::span<const double> y, const DimSpec& spec, double sigma, RngState& rng,
                         std::span<double> out) {
  IPFM_REQUIRE(y.size() == spec.data_dim && out.size() == spec.data_dim, "perturb: dimension mismatch");
  IPFM_REQUIRE(sigma > 0.0, "perturb: sigma must be positive");
  if (spec.is_infinite()) {
    for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] + sigma * rng.normal();
    return;
  }
  const double R = radial_sample(spec, sigma, rng);
  Vec v(spec.data_dim);
  sample_unit_sphere(v, rng);
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] + R * v[i];
}

inline Vec perturb(std::span<const double> y, const DimSpec& spec, double sigma, RngState& rng) {
  Vec x(y.size());
  perturb_into(y, spec, sigma, rng, x);
  return x;
}

inline Vec prior_sample(const DimSpec& spec, double sigma_level, RngState& rng) {
  const Vec zero(spec.data_dim, 0.0);
  return perturb(zero, spec, sigma_level, rng);
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Unnormalized log p(x | y) at noise level sigma.
inline double kernel_log_density_unnorm(std::span<const double> x, std::span<const double> y, const DimSpec& spec,
                                        double sigma) {
  IPFM_REQUIRE(x.size() == spec.data_dim && y.size() == spec.data_dim, "kernel_log_density: dimension mismatch");
  IPFM_REQUIRE(sigma > 0.0, "kernel_log_density: sigma must be positive");
  const double d2 = squared_distance(x, y);
  if (spec.is_infinite()) return -d2 / (2.0 * sigma * sigma);
  const double r = NoiseLevel{sigma}.r(spec);
  return -spec.half_total() * std::log(d2 + r * r);
}

}  // namespace ipfm
