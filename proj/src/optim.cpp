#include "mfuse/optim.hpp"

#include <cmath>

namespace mfuse {

Adam::Adam(const ParamStore& store, AdamOptions options) : options_(options) {
  for (const auto& p : store) {
    m_.emplace_back(p.value.numel(), 0.0);
    v_.emplace_back(p.value.numel(), 0.0);
  }
}

void Adam::step(ParamStore& store, const std::vector<Tensor>& grads) {
  if (grads.size() != store.size() || m_.size() != store.size()) {
    throw Error("adam: expected " + std::to_string(store.size()) + " gradients, got " + std::to_string(grads.size()));
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].shape() != store[i].value.shape()) {
      throw ShapeError("adam: gradient shape " + to_string(grads[i].shape()) + " does not match parameter " +
                       store[i].name);
    }
    if (!grads[i].all_finite()) throw Error("adam: non-finite gradient for parameter " + store[i].name);
  }
  ++t_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto w = store[i].value.values();
    auto gr = grads[i].values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * gr[j];
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * gr[j] * gr[j];
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      w[j] -= options_.lr * m_hat / (std::sqrt(v_hat) + options_.eps);
    }
  }
}

double global_norm(const std::vector<Tensor>& grads) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double v : g.values()) sq += v * v;
  }
  return std::sqrt(sq);
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) {
      for (double& v : g.values()) v *= s;
    }
  }
  return norm;
}

}  // namespace mfuse
