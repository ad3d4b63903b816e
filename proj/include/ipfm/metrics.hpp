#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "ipfm/error.hpp"
#include "ipfm/mlp.hpp"
#include "ipfm/rng.hpp"

namespace ipfm {

namespace detail {

inline double mean_pairwise_distance(const Matrix& a, const Matrix& b) {
  double total = 0.0;
  const Eigen::Index n = a.cols();
  const Eigen::Index m = b.cols();
  for (Eigen::Index i = 0; i < n; ++i) {
    double row = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) row += (a.col(i) - b.col(j)).norm();
    total += row;
  }
  return total / (static_cast<double>(n) * static_cast<double>(m));
}

// Same as above for a set against itself; uses symmetry.
inline double mean_self_distance(const Matrix& a) {
  double total = 0.0;
  const Eigen::Index n = a.cols();
  for (Eigen::Index i = 0; i < n; ++i) {
    double row = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) row += (a.col(i) - a.col(j)).norm();
    total += row;
  }
  return 2.0 * total / (static_cast<double>(n) * static_cast<double>(n));
}

// Columns in lexicographic order.
inline Matrix sorted_columns(const Matrix& a) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(a.cols()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<Eigen::Index>(i);
  std::sort(idx.begin(), idx.end(), [&](Eigen::Index x, Eigen::Index y) {
    return std::lexicographical_compare(a.col(x).begin(), a.col(x).end(), a.col(y).begin(), a.col(y).end());
  });
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = a.col(idx[i]);
  return out;
}

}  // namespace detail

// 2 E|a - b| - E|a - a'| - E|b - b'| as a V-statistic (all pairs, including
// i = j in the within-set terms). This is the squared MMD of the distance
// kernel, hence nonnegative, and exactly 0 for identical multisets.
inline double energy_distance(const Matrix& a, const Matrix& b) {
  IPFM_REQUIRE(a.rows() == b.rows(), "energy_distance: dimension mismatch");
  IPFM_REQUIRE(a.cols() > 0 && b.cols() > 0, "energy_distance: empty sample set");
  // Rounding would otherwise leave ~1e-15 for a permuted copy.
  if (a.cols() == b.cols() && detail::sorted_columns(a) == detail::sorted_columns(b)) return 0.0;
  const double ed = 2.0 * detail::mean_pairwise_distance(a, b) - detail::mean_self_distance(a) -
                    detail::mean_self_distance(b);
  return std::max(0.0, ed);
}

// Squared W2 between two 1-D empirical laws via the quantile coupling.
inline double wasserstein2_sq_1d(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double n = static_cast<double>(a.size());
  const double m = static_cast<double>(b.size());
  std::size_t i = 0;
  std::size_t j = 0;
  double t = 0.0;
  double acc = 0.0;
  while (i < a.size() && j < b.size()) {
    const double ta = static_cast<double>(i + 1) / n;
    const double tb = static_cast<double>(j + 1) / m;
    const double next = std::min(ta, tb);
    const double d = a[i] - b[j];
    acc += (next - t) * d * d;
    t = next;
    if (ta <= next) ++i;
    if (tb <= next) ++j;
  }
  return acc;
}

// Mean over projections of the squared 1-D W2 of the projected sets. Directions
// come in random orthonormal frames of size N, so a frame integrates the
// quadratic form |<u, t>|^2 exactly; a trailing partial frame is allowed.
inline double sliced_w2(const Matrix& a, const Matrix& b, std::size_t n_projections, RngState rng) {
  IPFM_REQUIRE(a.rows() == b.rows(), "sliced_w2: dimension mismatch");
  IPFM_REQUIRE(a.cols() > 0 && b.cols() > 0, "sliced_w2: empty sample set");
  IPFM_REQUIRE(n_projections > 0, "sliced_w2: need at least one projection");
  const auto n = a.rows();
  std::vector<double> pa(static_cast<std::size_t>(a.cols())), pb(static_cast<std::size_t>(b.cols()));
  double total = 0.0;
  std::size_t done = 0;
  std::size_t frame = 0;
  while (done < n_projections) {
    Matrix g(n, n);
    RngState frng = rng.split("frame", frame++);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = frng.normal();
    const Matrix q = Eigen::HouseholderQR<Matrix>(g).householderQ();
    for (Eigen::Index k = 0; k < n && done < n_projections; ++k, ++done) {
      const Eigen::VectorXd u = q.col(k);
      for (Eigen::Index j = 0; j < a.cols(); ++j) pa[static_cast<std::size_t>(j)] = u.dot(a.col(j));
      for (Eigen::Index j = 0; j < b.cols(); ++j) pb[static_cast<std::size_t>(j)] = u.dot(b.col(j));
      total += wasserstein2_sq_1d(pa, pb);
    }
  }
  return total / static_cast<double>(n_projections);
}

struct MetricReport {
  double energy_distance = 0.0;
  double sliced_w2 = 0.0;
  std::vector<double> mean_gap;  // |mean_a - mean_b| per coordinate
  std::vector<double> cov_gap;   // |cov_a - cov_b| entries, row-major N x N
  std::size_t sample_count = 0;
};

inline MetricReport compute_metrics(const Matrix& generated, const Matrix& data, RngState rng,
                                    std::size_t n_projections = 256) {
  MetricReport r;
  r.energy_distance = energy_distance(generated, data);
  r.sliced_w2 = sliced_w2(generated, data, n_projections, rng.split("sliced"));
  const Eigen::VectorXd ma = generated.rowwise().mean();
  const Eigen::VectorXd mb = data.rowwise().mean();
  const Matrix ca = (generated.colwise() - ma) * (generated.colwise() - ma).transpose() /
                    static_cast<double>(generated.cols());
  const Matrix cb = (data.colwise() - mb) * (data.colwise() - mb).transpose() / static_cast<double>(data.cols());
  for (Eigen::Index i = 0; i < ma.size(); ++i) r.mean_gap.push_back(std::abs(ma(i) - mb(i)));
  for (Eigen::Index i = 0; i < ca.rows(); ++i)
    for (Eigen::Index j = 0; j < ca.cols(); ++j) r.cov_gap.push_back(std::abs(ca(i, j) - cb(i, j)));
  r.sample_count = static_cast<std::size_t>(generated.cols());
  return r;
}

}  // namespace ipfm
