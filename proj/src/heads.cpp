#include "mfuse/heads.hpp"

#include <algorithm>

namespace mfuse {

std::string to_string(Task t) { return t == Task::binary ? "binary" : "multilabel"; }

PredictionHead PredictionHead::create(ParamStore& store, const std::string& name, std::size_t in, Task task,
                                      std::size_t n_labels, Rng& rng) {
  const std::size_t out = task == Task::binary ? 1 : n_labels;
  if (out == 0) throw Error("prediction head needs at least one label");
  return PredictionHead{Linear::create(store, name + ".fc", in, out, rng), task};
}

Tensor PredictionHead::operator()(Forward& f, const Tensor& fused) const {
  return task == Task::binary ? predict_binary(f, fc, fused) : predict_multilabel(f, fc, fused);
}

Tensor predict_multilabel(Forward& f, const Linear& head, const Tensor& fused) {
  if (fused.rank() != 2) throw ShapeError("predict_multilabel: expected [B, d], got " + to_string(fused.shape()));
  return f.g.softmax(head(f, fused));
}

Tensor predict_binary(Forward& f, const Linear& head, const Tensor& fused) {
  if (fused.rank() != 2) throw ShapeError("predict_binary: expected [B, d], got " + to_string(fused.shape()));
  if (head.out != 1) throw ShapeError("predict_binary: head must map to one logit, maps to " + std::to_string(head.out));
  return f.g.reshape(f.g.sigmoid(head(f, fused)), {fused.dim(0)});
}

Tensor bce_loss(Graph& g, const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape()) {
    throw ShapeError("bce_loss: shape mismatch " + to_string(pred.shape()) + " vs " + to_string(truth.shape()));
  }
  constexpr double kUpper = 1.0 - 1e-12;
  const Tensor p = g.scalar_min(pred, kUpper);
  const Tensor ones(pred.shape(), 1.0);
  Tensor not_truth = truth.detached();
  for (double& v : not_truth.values()) v = 1.0 - v;
  const Tensor pos = g.mul(g.log(p), truth);
  const Tensor neg = g.mul(g.log(g.add(g.scale(p, -1.0), ones)), not_truth);
  const double batch = static_cast<double>(pred.dim(0));
  return g.scale(g.sum(g.add(pos, neg)), -1.0 / batch);
}

}  // namespace mfuse
