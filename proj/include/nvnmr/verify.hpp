#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace nvnmr {

struct VerifyOptions {
  std::size_t mc_realizations = 2000;
  std::size_t mc_spins = 2000;
  std::uint64_t seed = 1;
  unsigned threads = 0;
  bool include_mc = true;
  /// Test hook: scales the analytic χ prefactor before comparison. Any value
  /// other than 1 should make the suite fail.
  double corrupt_prefactor = 1.0;
};

struct VerifyCheck {
  std::string name;
  double achieved = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

struct VerifyReport {
  std::vector<VerifyCheck> checks;
  bool passed() const;
  nlohmann::json to_json() const;
};

/// Cross-checks of the analytic lineshape against the quadrature and Monte
/// Carlo oracles.
VerifyReport run_verification(const VerifyOptions& options = {});

}  // namespace nvnmr
