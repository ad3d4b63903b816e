#pragma once

// Exact electrostatics of a finite weighted charge set placed on the z = 0
// hyperplane of R^{N+D}, and the posterior-mean denoiser it induces.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ipfm/error.hpp"
#include "ipfm/kernel.hpp"

namespace ipfm {

class ChargeSet {
 public:
  ChargeSet() = default;

  // Rows of `points` are charges. Weights default to uniform and are normalized.
  ChargeSet(const std::vector<Vec>& points, Vec weights = {}) {
    if (points.empty()) throw ConfigError("ChargeSet: need at least one charge");
    dim_ = points.front().size();
    if (dim_ == 0) throw ConfigError("ChargeSet: zero-dimensional points");
    coords_.reserve(points.size() * dim_);
    for (const auto& p : points) {
      if (p.size() != dim_) throw ConfigError("ChargeSet: points have inconsistent dimension");
      coords_.insert(coords_.end(), p.begin(), p.end());
    }
    set_weights(std::move(weights), points.size());
  }

  ChargeSet(std::size_t dim, Vec flat_coords, Vec weights = {}) : dim_(dim), coords_(std::move(flat_coords)) {
    if (dim_ == 0 || coords_.empty() || coords_.size() % dim_ != 0)
      throw ConfigError("ChargeSet: flat coordinate array does not match dimension");
    set_weights(std::move(weights), coords_.size() / dim_);
  }

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return weights_.size(); }
  std::span<const double> point(std::size_t i) const { return {coords_.data() + i * dim_, dim_}; }
  double weight(std::size_t i) const { return weights_[i]; }
  double log_weight(std::size_t i) const { return log_weights_[i]; }
  const Vec& weights() const { return weights_; }
  const Vec& flat() const { return coords_; }

  // Weighted draw of one charge index.
  std::size_t sample_index(RngState& rng) const {
    if (uniform_) {
      return std::min<std::size_t>(static_cast<std::size_t>(rng.uniform() * static_cast<double>(size())), size() - 1);
    }
    const double u = rng.uniform();
    auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative_.begin()), size() - 1);
  }

 private:
  void set_weights(Vec w, std::size_t n) {
    if (w.empty()) w.assign(n, 1.0);
    if (w.size() != n) throw ConfigError("ChargeSet: weight count does not match point count");
    double total = 0.0;
    for (double v : w) {
      if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("ChargeSet: weights must be positive and finite");
      total += v;
    }
    uniform_ = std::all_of(w.begin(), w.end(), [&](double v) { return v == w.front(); });
    weights_.resize(n);
    log_weights_.resize(n);
    cumulative_.resize(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      weights_[i] = uniform_ ? 1.0 / static_cast<double>(n) : w[i] / total;
      log_weights_[i] = std::log(weights_[i]);
      acc += weights_[i];
      cumulative_[i] = acc;
    }
  }

  std::size_t dim_ = 0;
  Vec coords_;
  Vec weights_;
  Vec log_weights_;
  Vec cumulative_;
  bool uniform_ = true;
};

// CSV with one point per row. A header row is skipped when it is not numeric;
// a last header column named "w" or "weight" marks a weight column. Without a
// header, a row with data_dim + 1 columns carries a trailing weight.
inline ChargeSet load_charge_set_csv(const std::string& path, std::optional<std::size_t> data_dim = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open charge CSV '" + path + "'");
  std::string line;
  std::vector<Vec> pts;
  Vec weights;
  bool header_weight = false;
  bool first = true;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    Vec row;
    bool numeric = true;
    for (const auto& c : cells) {
      try {
        std::size_t pos = 0;
        row.push_back(std::stod(c, &pos));
        if (c.find_first_not_of(" \t", pos) != std::string::npos) numeric = false;
      } catch (const std::exception&) {
        numeric = false;
      }
    }
    if (first && !numeric) {
      std::string last = cells.empty() ? "" : cells.back();
      last.erase(std::remove_if(last.begin(), last.end(), ::isspace), last.end());
      header_weight = (last == "w" || last == "weight");
      first = false;
      continue;
    }
    first = false;
    if (!numeric) throw ConfigError("charge CSV: non-numeric value on line " + std::to_string(lineno));
    bool has_w = header_weight || (data_dim && row.size() == *data_dim + 1);
    if (has_w) {
      weights.push_back(row.back());
      row.pop_back();
    }
    if (data_dim && row.size() != *data_dim)
      throw ConfigError("charge CSV: expected " + std::to_string(*data_dim) + " coordinates on line " +
                        std::to_string(lineno));
    pts.push_back(std::move(row));
  }
  if (!weights.empty() && weights.size() != pts.size())
    throw ConfigError("charge CSV: weight column present on some rows only");
  return ChargeSet(pts, weights);
}

// Surface area of the unit sphere S^{n-1} in R^n: 2 pi^{n/2} / Gamma(n/2).
inline double log_surface_area(double n) {
  IPFM_REQUIRE(n >= 1.0, "surface_area: dimension must be >= 1");
  return std::log(2.0) + 0.5 * n * std::log(std::numbers::pi) - std::lgamma(0.5 * n);
}
inline double surface_area(std::size_t n) { return std::exp(log_surface_area(static_cast<double>(n))); }

// Field components are returned as mantissas times exp(log_scale), because
// 1 / d^{N+D} leaves double range for moderate D.
struct FieldValue {
  Vec ex;
  double er = 0.0;
  double log_scale = 0.0;

  Vec materialized_x() const {
    Vec out(ex);
    const double s = std::exp(log_scale);
    for (double& v : out) v *= s;
    return out;
  }
  double materialized_r() const { return er * std::exp(log_scale); }
};

inline FieldValue field_at(const ChargeSet& charges, std::span<const double> x, double sigma, const DimSpec& spec) {
  if (spec.is_infinite()) throw DispatchError("field_at: requires finite D");
  IPFM_REQUIRE(x.size() == spec.data_dim && charges.dim() == spec.data_dim, "field_at: dimension mismatch");
  IPFM_REQUIRE(sigma >= 0.0, "field_at: sigma must be nonnegative");
  const double r = NoiseLevel{sigma}.r(spec);
  const double half = spec.half_total();
  const std::size_t m = charges.size();
  Vec lt(m);
  double lmax = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < m; ++i) {
    const double d2 = squared_distance(x, charges.point(i)) + r * r;
    if (d2 == 0.0) throw SingularityError("field_at: query point coincides with a charge");
    lt[i] = charges.log_weight(i) - half * std::log(d2);
    lmax = std::max(lmax, lt[i]);
  }
  FieldValue f;
  f.ex.assign(spec.data_dim, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double a = std::exp(lt[i] - lmax);
    const auto y = charges.point(i);
    for (std::size_t j = 0; j < spec.data_dim; ++j) f.ex[j] += a * (x[j] - y[j]);
    f.er += a * r;
  }
  f.log_scale = lmax - log_surface_area(static_cast<double>(spec.data_dim) + spec.D());
  return f;
}

namespace detail {

// Posterior log-weights l_i (up to a constant) and their softmax.
inline void posterior_weights(const ChargeSet& charges, std::span<const double> x, double sigma, const DimSpec& spec,
                              Vec& probs) {
  const std::size_t m = charges.size();
  probs.resize(m);
  double lmax = -std::numeric_limits<double>::infinity();
  if (spec.is_infinite()) {
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (std::size_t i = 0; i < m; ++i) {
      probs[i] = charges.log_weight(i) - squared_distance(x, charges.point(i)) * inv;
      lmax = std::max(lmax, probs[i]);
    }
  } else {
    const double r = NoiseLevel{sigma}.r(spec);
    const double r2 = r * r;
    const double half = spec.half_total();
    for (std::size_t i = 0; i < m; ++i) {
      const double d2 = squared_distance(x, charges.point(i)) + r2;
      // d2 == 0 gives +inf: the softmax collapses onto the colliding charge.
      probs[i] = charges.log_weight(i) - half * std::log(d2);
      lmax = std::max(lmax, probs[i]);
    }
  }
  if (std::isinf(lmax) && lmax > 0) {
    for (double& p : probs) p = std::isinf(p) && p > 0 ? 1.0 : 0.0;
  } else {
    for (double& p : probs) p = std::exp(p - lmax);
  }
  double total = 0.0;
  for (double p : probs) total += p;
  for (double& p : probs) p /= total;
}

}  // namespace detail

// E[y | x, sigma] under the charge set's empirical measure.
inline Vec posterior_denoise(const ChargeSet& charges, std::span<const double> x, double sigma, const DimSpec& spec) {
  IPFM_REQUIRE(x.size() == spec.data_dim && charges.dim() == spec.data_dim, "posterior_denoise: dimension mismatch");
  IPFM_REQUIRE(sigma > 0.0, "posterior_denoise: sigma must be positive");
  Vec p;
  detail::posterior_weights(charges, x, sigma, spec, p);
  Vec out(spec.data_dim, 0.0);
  for (std::size_t i = 0; i < charges.size(); ++i) {
    if (p[i] == 0.0) continue;
    const auto y = charges.point(i);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += p[i] * y[j];
  }
  return out;
}

// Gradient w.r.t. x of <posterior_denoise(x), cotangent>:
//   sum_i p_i (<y_i, c> - <yhat, c>) dl_i/dx,
// with dl_i/dx = -(N+D)(x - y_i)/(|x - y_i|^2 + r^2) (finite D) or -(x - y_i)/sigma^2.
inline Vec posterior_denoise_backward(const ChargeSet& charges, std::span<const double> x, double sigma,
                                      const DimSpec& spec, std::span<const double> cotangent) {
  IPFM_REQUIRE(x.size() == spec.data_dim && charges.dim() == spec.data_dim && cotangent.size() == spec.data_dim,
               "posterior_denoise_backward: dimension mismatch");
  IPFM_REQUIRE(sigma > 0.0, "posterior_denoise_backward: sigma must be positive");
  Vec p;
  detail::posterior_weights(charges, x, sigma, spec, p);
  const std::size_t m = charges.size();
  const std::size_t n = spec.data_dim;
  Vec proj(m);
  double mean_proj = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const auto y = charges.point(i);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += y[j] * cotangent[j];
    proj[i] = s;
    mean_proj += p[i] * s;
  }
  const double r2 = spec.is_infinite() ? 0.0 : std::pow(NoiseLevel{sigma}.r(spec), 2);
  Vec g(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    if (p[i] == 0.0) continue;
    const auto y = charges.point(i);
    const double coef = p[i] * (proj[i] - mean_proj);
    if (coef == 0.0) continue;
    double scale;
    if (spec.is_infinite()) {
      scale = -1.0 / (sigma * sigma);
    } else {
      const double d2 = squared_distance(x, y) + r2;
      if (d2 == 0.0) continue;  // collapsed posterior is locally constant
      scale = -2.0 * spec.half_total() / d2;
    }
    for (std::size_t j = 0; j < n; ++j) g[j] += coef * scale * (x[j] - y[j]);
  }
  return g;
}

// f = (x - yhat) / sigma, i.e. (x - yhat) / (r / sqrt(D)) for any D.
inline Vec normalized_field(std::span<const double> y_hat, std::span<const double> x, double sigma) {
  IPFM_REQUIRE(sigma > 0.0, "normalized_field: sigma must be positive");
  IPFM_REQUIRE(y_hat.size() == x.size(), "normalized_field: dimension mismatch");
  Vec f(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) f[i] = (x[i] - y_hat[i]) / sigma;
  return f;
}

}  // namespace ipfm
