#pragma once

#include <string>

#include "mfuse/nn.hpp"

namespace mfuse {

enum class Task { binary, multilabel };

std::string to_string(Task t);

/// Linear readout followed by softmax (multilabel) or sigmoid (binary).
struct PredictionHead {
  Linear fc;
  Task task = Task::binary;

  static PredictionHead create(ParamStore& store, const std::string& name, std::size_t in, Task task,
                               std::size_t n_labels, Rng& rng);

  /// [B, N] softmax rows (multilabel) or [B] probabilities (binary).
  Tensor operator()(Forward& f, const Tensor& fused) const;
};

Tensor predict_multilabel(Forward& f, const Linear& head, const Tensor& fused);
Tensor predict_binary(Forward& f, const Linear& head, const Tensor& fused);

/// -(1/B) sum_i [Y_i . log P_i + (1 - Y_i) . log(1 - P_i)], probabilities
/// clamped to [1e-12, 1 - 1e-12]. pred and truth share a shape; the first
/// axis is the batch.
Tensor bce_loss(Graph& g, const Tensor& pred, const Tensor& truth);

}  // namespace mfuse
