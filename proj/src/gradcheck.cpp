#include "mfuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace mfuse {

namespace {

double evaluate(const GraphBuilder& f, std::span<const Tensor> inputs) {
  Graph g;
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(g.leaf(t, false));
  const Tensor out = f(g, leaves);
  if (out.numel() != 1) throw Error("grad_check: builder must return a scalar, got shape " + to_string(out.shape()));
  return out[0];
}

}  // namespace

GradCheckResult grad_check(const GraphBuilder& f, std::span<const Tensor> inputs, double step, double floor) {
  GradCheckResult result;
  {
    Graph g;
    std::vector<Tensor> leaves;
    leaves.reserve(inputs.size());
    for (const Tensor& t : inputs) leaves.push_back(g.leaf(t));
    const Tensor out = f(g, leaves);
    if (out.numel() != 1) throw Error("grad_check: builder must return a scalar, got shape " + to_string(out.shape()));
    result.kink_margin = g.kink_margin();
    if (out.requires_grad()) {
      const Gradients grads = g.backward(out);
      for (const Tensor& leaf : leaves) result.analytic.push_back(grads.of(leaf));
    } else {
      for (const Tensor& t : inputs) result.analytic.emplace_back(t.shape());
    }
  }

  std::vector<Tensor> probe(inputs.begin(), inputs.end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    for (std::size_t j = 0; j < probe[i].numel(); ++j) {
      const double orig = probe[i][j];
      probe[i][j] = orig + step;
      const double up = evaluate(f, probe);
      probe[i][j] = orig - step;
      const double down = evaluate(f, probe);
      probe[i][j] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = result.analytic[i][j];
      const double err = std::abs(analytic - numeric) / std::max(floor, std::abs(analytic) + std::abs(numeric));
      if (err > result.max_rel_error || std::isnan(err)) {
        result.max_rel_error = std::isnan(err) ? INFINITY : err;
        result.worst_input = i;
        result.worst_entry = j;
        result.worst_analytic = analytic;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace mfuse
