#pragma once

// Built-in 2-D toy distributions, all centered to exact zero mean.
//
//   eight_gaussians: 8 isotropic modes, std 0.2, centers 4 (cos 2 pi k/8, sin 2 pi k/8)
//   two_moons:       upper arc (cos t, sin t) and lower arc (1 - cos t, 0.5 - sin t),
//                    t ~ U[0, pi], scaled by 2, jitter std 0.1
//   checkerboard:    uniform on the 8 dark cells of a 4 x 4 board on [-4, 4]^2
//   spiral:          radius 0.5 + 3.5 s, angle 3 pi s, s ~ U[0, 1], jitter std 0.1

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "ipfm/error.hpp"
#include "ipfm/field.hpp"
#include "ipfm/rng.hpp"

namespace ipfm {

inline const std::vector<std::string>& builtin_dataset_names() {
  static const std::vector<std::string> names{"eight_gaussians", "two_moons", "checkerboard", "spiral"};
  return names;
}

inline std::array<double, 2> eight_gaussians_center(std::size_t k) {
  const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / 8.0;
  return {4.0 * std::cos(a), 4.0 * std::sin(a)};
}

inline ChargeSet builtin_dataset(const std::string& name, std::size_t n_points, RngState rng) {
  if (n_points == 0) throw ConfigError("builtin_dataset: n_points must be positive");
  std::vector<Vec> pts(n_points, Vec(2));
  for (std::size_t i = 0; i < n_points; ++i) {
    RngState r = rng.split("point", i);
    auto& p = pts[i];
    if (name == "eight_gaussians") {
      const auto k = std::min<std::size_t>(static_cast<std::size_t>(r.uniform() * 8.0), 7);
      const auto c = eight_gaussians_center(k);
      p[0] = c[0] + 0.2 * r.normal();
      p[1] = c[1] + 0.2 * r.normal();
    } else if (name == "two_moons") {
      const double t = std::numbers::pi * r.uniform();
      if (r.uniform() < 0.5) {
        p[0] = std::cos(t);
        p[1] = std::sin(t);
      } else {
        p[0] = 1.0 - std::cos(t);
        p[1] = 0.5 - std::sin(t);
      }
      p[0] = 2.0 * p[0] + 0.1 * r.normal();
      p[1] = 2.0 * p[1] + 0.1 * r.normal();
    } else if (name == "checkerboard") {
      // 8 dark cells: (col + row) even on a 4 x 4 grid of side 2.
      const auto cell = std::min<std::size_t>(static_cast<std::size_t>(r.uniform() * 8.0), 7);
      const std::size_t row = cell / 2;
      const std::size_t col = 2 * (cell % 2) + (row % 2);
      p[0] = -4.0 + 2.0 * static_cast<double>(col) + 2.0 * r.uniform();
      p[1] = -4.0 + 2.0 * static_cast<double>(row) + 2.0 * r.uniform();
    } else if (name == "spiral") {
      const double s = r.uniform();
      const double rad = 0.5 + 3.5 * s;
      const double ang = 3.0 * std::numbers::pi * s;
      p[0] = rad * std::cos(ang) + 0.1 * r.normal();
      p[1] = rad * std::sin(ang) + 0.1 * r.normal();
    } else {
      throw ConfigError("builtin_dataset: unknown dataset '" + name + "'");
    }
  }
  std::array<double, 2> mean{0.0, 0.0};
  for (const auto& p : pts) {
    mean[0] += p[0];
    mean[1] += p[1];
  }
  mean[0] /= static_cast<double>(n_points);
  mean[1] /= static_cast<double>(n_points);
  for (auto& p : pts) {
    p[0] -= mean[0];
    p[1] -= mean[1];
  }
  return ChargeSet(pts);
}

inline Matrix charges_as_samples(const ChargeSet& cs) {
  Matrix m(static_cast<Eigen::Index>(cs.dim()), static_cast<Eigen::Index>(cs.size()));
  for (std::size_t i = 0; i < cs.size(); ++i) {
    const auto p = cs.point(i);
    for (std::size_t j = 0; j < cs.dim(); ++j) m(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = p[j];
  }
  return m;
}

// n weighted bootstrap draws from a charge set.
inline Matrix draw_from_charges(const ChargeSet& cs, std::size_t n, RngState rng) {
  Matrix m(static_cast<Eigen::Index>(cs.dim()), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = cs.point(cs.sample_index(rng));
    for (std::size_t j = 0; j < cs.dim(); ++j) m(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = p[j];
  }
  return m;
}

}  // namespace ipfm
