#pragma once

#include <vector>

#include "mfuse/nn.hpp"

namespace mfuse {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam moments, one pair per parameter of the store it was made for.
class Adam {
 public:
  Adam(const ParamStore& store, AdamOptions options);

  /// One update. Throws if any gradient entry is not finite, naming the
  /// parameter; the store is left untouched in that case.
  void step(ParamStore& store, const std::vector<Tensor>& grads);

  std::size_t steps() const { return t_; }
  const AdamOptions& options() const { return options_; }

 private:
  AdamOptions options_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

/// Global L2 norm over all gradients.
double global_norm(const std::vector<Tensor>& grads);
/// Rescales so the global norm is at most max_norm. Returns the norm before clipping.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

}  // namespace mfuse
