#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mfuse/graph.hpp"

namespace mfuse {

/// Builds a scalar from graph-tracked copies of the inputs.
using GraphBuilder = std::function<Tensor(Graph&, std::span<const Tensor>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_entry = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  double kink_margin = 0.0;       // of the unperturbed evaluation
  std::vector<Tensor> analytic;  // one per input
};

/// Compares reverse-mode gradients with central differences.
///
/// The per-entry error is |a - n| / max(floor, |a| + |n|); the maximum over
/// all entries of all inputs is reported. The floor keeps entries whose true
/// gradient is zero from being judged against rounding noise in the
/// difference quotient, which is about 1e-11 for O(1) outputs at step 1e-5.
GradCheckResult grad_check(const GraphBuilder& f, std::span<const Tensor> inputs, double step = 1e-5,
                           double floor = 1e-6);

}  // namespace mfuse
