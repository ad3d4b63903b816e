#pragma once

#include <stdexcept>
#include <string>

namespace ipfm {

// Bad user-supplied configuration (widths, step counts, dataset names, ...).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition (shape mismatch, sigma <= 0, ...).
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

// Optimization produced a non-finite value. `detail` carries the diagnostic payload.
struct TrainingError : std::runtime_error {
  TrainingError(const std::string& what, std::string detail_json = "{}")
      : std::runtime_error(what), detail(std::move(detail_json)) {}
  std::string detail;
};

// Field evaluated exactly on a charge.
struct SingularityError : std::domain_error {
  using std::domain_error::domain_error;
};

// Finite-D code path requested with D = infinity (or vice versa).
struct DispatchError : std::logic_error {
  using std::logic_error::logic_error;
};

#define IPFM_REQUIRE(cond, msg)                                   \
  do {                                                            \
    if (!(cond)) throw ::ipfm::ContractViolation(std::string(msg)); \
  } while (0)

}  // namespace ipfm
