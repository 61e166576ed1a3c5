#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mfuse/gradcheck.hpp"

namespace mfuse {

struct SuiteCase {
  std::string name;
  GradCheckResult result;
  double seconds = 0.0;
};

/// Finite-difference checks of every graph primitive (at points away from
/// their kinks) and of one small model per fusion strategy, each reduced to
/// a scalar through a fixed random readout or the training loss.
std::vector<SuiteCase> run_gradcheck_suite(const std::function<void(const SuiteCase&)>& on_case = {});

/// Names of the registry models the suite differentiates end to end.
const std::vector<std::string>& gradcheck_models();

}  // namespace mfuse
