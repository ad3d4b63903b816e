#pragma once

// Independent reference computations shared by the unit and acceptance tests.
// None of these call into the sampling or softmax code under test.

#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "ipfm/field.hpp"
#include "ipfm/kernel.hpp"

namespace oracle {

// Unnormalized radial density R^{N-1} (R^2 + r^2)^{-(N+D)/2}, scaled by r^{N+D}.
inline double radial_density(double R, double n, double d, double r) {
  if (R <= 0.0) return n == 1.0 ? 1.0 : 0.0;
  return std::exp((n - 1.0) * std::log(R) - 0.5 * (n + d) * std::log1p((R / r) * (R / r)));
}

// KS distance between radius samples and the radial law, with the CDF obtained
// by integrating the density numerically between consecutive order statistics.
inline double radial_ks(std::vector<double> samples, double n, double d, double r) {
  std::sort(samples.begin(), samples.end());
  auto f = [&](double t) { return radial_density(t, n, d, r); };
  std::vector<double> cum(samples.size());
  double acc = 0.0;
  double prev = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    // Split long gaps so the fixed-order rule stays accurate.
    const double gap = samples[i] - prev;
    const int pieces = gap > 0.05 * r ? static_cast<int>(std::min(1e4, std::ceil(gap / (0.05 * r)))) : 1;
    for (int k = 0; k < pieces; ++k) {
      const double a = prev + gap * k / pieces;
      const double b = prev + gap * (k + 1) / pieces;
      acc += boost::math::quadrature::gauss<double, 15>::integrate(f, a, b);
    }
    cum[i] = acc;
    prev = samples[i];
  }
  const double tail = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
      f, prev, std::numeric_limits<double>::infinity(), 15, 1e-12);
  const double total = acc + tail;
  const double m = static_cast<double>(samples.size());
  double ks = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double F = cum[i] / total;
    ks = std::max({ks, std::abs((i + 1) / m - F), std::abs(i / m - F)});
  }
  return ks;
}

// KS distance between samples of |x - y| / sigma and the chi_N law.
inline double chi_ks(std::vector<double> samples, double n) {
  std::sort(samples.begin(), samples.end());
  const double m = static_cast<double>(samples.size());
  double ks = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double F = boost::math::gamma_p(0.5 * n, 0.5 * samples[i] * samples[i]);
    ks = std::max({ks, std::abs((i + 1) / m - F), std::abs(i / m - F)});
  }
  return ks;
}

// KS distance against an arbitrary CDF.
template <class Cdf>
double ks_against(std::vector<double> samples, Cdf cdf) {
  std::sort(samples.begin(), samples.end());
  const double m = static_cast<double>(samples.size());
  double ks = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double F = cdf(samples[i]);
    ks = std::max({ks, std::abs((i + 1) / m - F), std::abs(i / m - F)});
  }
  return ks;
}

// E[y | x] for a one-dimensional charge set, in long double, from the
// normalized kernel density. The normalizer is obtained by quadrature of the
// kernel over the real line (Gaussian when d is infinite).
inline double posterior_1d(const std::vector<double>& ys, const std::vector<double>& ws, double x, double sigma,
                           double d, bool infinite) {
  long double num = 0.0L;
  long double den = 0.0L;
  double z;
  if (infinite) {
    z = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
        [&](double t) { return std::exp(-0.5 * t * t / (sigma * sigma)); }, -std::numeric_limits<double>::infinity(),
        std::numeric_limits<double>::infinity(), 15, 1e-14);
  } else {
    const double r = sigma * std::sqrt(d);
    z = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
        [&](double t) { return std::pow(1.0 + (t / r) * (t / r), -0.5 * (1.0 + d)); },
        -std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(), 15, 1e-14);
  }
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const long double t = static_cast<long double>(x) - ys[i];
    long double k;
    if (infinite) {
      k = std::exp(-0.5L * t * t / (static_cast<long double>(sigma) * sigma));
    } else {
      const long double r = static_cast<long double>(sigma) * std::sqrt(static_cast<long double>(d));
      k = std::pow(1.0L + (t / r) * (t / r), -0.5L * (1.0L + d));
    }
    k /= z;
    num += ws[i] * k * ys[i];
    den += ws[i] * k;
  }
  return static_cast<double>(num / den);
}

// Field components by direct summation in long double (finite D only).
struct Field {
  std::vector<long double> ex;
  long double er;
};

inline Field field_direct(const ipfm::ChargeSet& cs, std::span<const double> x, double sigma, double d) {
  const std::size_t n = cs.dim();
  const long double r = static_cast<long double>(sigma) * std::sqrt(static_cast<long double>(d));
  Field f{std::vector<long double>(n, 0.0L), 0.0L};
  for (std::size_t i = 0; i < cs.size(); ++i) {
    long double d2 = r * r;
    for (std::size_t k = 0; k < n; ++k) d2 += std::pow(static_cast<long double>(x[k]) - cs.point(i)[k], 2);
    const long double inv = std::pow(d2, -0.5L * (static_cast<long double>(n) + d));
    for (std::size_t k = 0; k < n; ++k) f.ex[k] += cs.weight(i) * (x[k] - cs.point(i)[k]) * inv;
    f.er += cs.weight(i) * r * inv;
  }
  return f;
}

inline double rel_err(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max(floor, std::max(std::abs(a), std::abs(b)));
}

}  // namespace oracle
