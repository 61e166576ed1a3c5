#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mfuse/graph.hpp"
#include "mfuse/rng.hpp"

namespace mfuse {

using ParamId = std::size_t;

struct Parameter {
  std::string name;
  Tensor value;
};

/// Named, ordered collection of trainable tensors.
class ParamStore {
 public:
  ParamId add(std::string name, Tensor value);

  Parameter& operator[](ParamId id) { return params_.at(id); }
  const Parameter& operator[](ParamId id) const { return params_.at(id); }
  std::optional<ParamId> find(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, ParamId, std::less<>> index_;
};

namespace init {
Tensor zeros(Shape shape);
Tensor constant(Shape shape, double value);
/// Glorot uniform over [fan_in, fan_out].
Tensor xavier_uniform(Rng& rng, Shape shape, std::size_t fan_in, std::size_t fan_out);
Tensor uniform(Rng& rng, Shape shape, double lo, double hi);
Tensor normal(Rng& rng, Shape shape, double stddev);
}  // namespace init

/// One forward evaluation: the graph, the parameter bindings for this step,
/// the train/eval switch and the dropout stream.
class Forward {
 public:
  Forward(Graph& graph, const ParamStore& store, bool train, Rng dropout_rng, bool track_params = true);

  Graph& g;
  const bool train;

  /// Graph handle of a parameter; the same node is reused within a step.
  const Tensor& p(ParamId id);
  /// Uses `t` as the handle of parameter `id` for this step instead of a
  /// fresh leaf. Must be called before the parameter is first used.
  void bind(ParamId id, Tensor t);
  Tensor dropout(const Tensor& x, double p);

  /// Gradient per parameter (zeros for parameters not used this step).
  std::vector<Tensor> parameter_gradients(const Gradients& grads) const;

  /// When set, every attention softmax output is appended here.
  std::vector<Tensor>* attention_probe = nullptr;

 private:
  const ParamStore& store_;
  Rng rng_;
  bool track_;
  std::vector<std::optional<Tensor>> bound_;
};

struct Linear {
  ParamId weight = 0;
  ParamId bias = 0;
  std::size_t in = 0;
  std::size_t out = 0;

  static Linear create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(Forward& f, const Tensor& x) const;
};

struct LayerNorm {
  ParamId gain = 0;
  ParamId bias = 0;

  static LayerNorm create(ParamStore& store, const std::string& name, std::size_t width);
  Tensor operator()(Forward& f, const Tensor& x) const;
};

/// Scaled dot-product attention with `heads` heads over a shared width.
struct MultiHeadAttention {
  Linear query, key, value, output;
  std::size_t width = 0;
  std::size_t heads = 1;

  static MultiHeadAttention create(ParamStore& store, const std::string& name, std::size_t width, std::size_t heads,
                                   Rng& rng);
  /// queries [B, Lq, d], keys/values [B, Lk, d] -> [B, Lq, d].
  /// key_mask [B, Lk]: zero entries are never attended.
  Tensor operator()(Forward& f, const Tensor& queries, const Tensor& keys_values, const Tensor* key_mask = nullptr) const;
};

/// Post-norm encoder block: LN(x + Attn(x)), then LN(x + FFN(x)).
struct TransformerLayer {
  MultiHeadAttention attention;
  LayerNorm attention_norm;
  Linear ffn_in;
  Linear ffn_out;
  LayerNorm ffn_norm;
  double dropout = 0.0;

  static TransformerLayer create(ParamStore& store, const std::string& name, std::size_t width, std::size_t heads,
                                 std::size_t ffn_width, double dropout, Rng& rng);
  Tensor operator()(Forward& f, const Tensor& x, const Tensor* key_mask = nullptr) const;
};

}  // namespace mfuse
