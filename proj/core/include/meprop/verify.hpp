#pragma once

// Self-check suite behind `meprop verify`: oracle comparisons and invariants
// that must hold on any machine, independent of MNIST.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace meprop {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyOptions {
  std::uint64_t seed = 1;
  std::size_t instances = 1000;  ///< random instances for the oracle comparison
};

/// Runs every check; `on_result` (optional) sees each result as it completes.
std::vector<CheckResult> run_verification(
    const VerifyOptions& options = {},
    const std::function<void(const CheckResult&)>& on_result = {});

}  // namespace meprop
