#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>

#include "ipfm/error.hpp"
#include "ipfm/mlp.hpp"

namespace ipfm {

struct AdamState {
  Vec first_moment;
  Vec second_moment;
  std::uint64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  explicit AdamState(std::size_t n) : first_moment(n, 0.0), second_moment(n, 0.0) {}
};

// In-place bias-corrected Adam update. Throws TrainingError on a non-finite gradient
// before touching the parameters or the moments.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr) {
  IPFM_REQUIRE(params.size() == grads.size(), "adam_step: params/grads length mismatch");
  IPFM_REQUIRE(state.first_moment.size() == params.size() && state.second_moment.size() == params.size(),
               "adam_step: state does not match params");
  IPFM_REQUIRE(lr > 0.0, "adam_step: learning rate must be positive");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw TrainingError("adam_step: non-finite gradient",
                          "{\"index\":" + std::to_string(i) + ",\"step\":" + std::to_string(state.step_count) + "}");
    }
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g * g;
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

}  // namespace ipfm
