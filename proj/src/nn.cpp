#include "mfuse/nn.hpp"

#include <cmath>

namespace mfuse {

ParamId ParamStore::add(std::string name, Tensor value) {
  if (index_.count(name)) throw Error("duplicate parameter name '" + name + "'");
  const ParamId id = params_.size();
  index_.emplace(name, id);
  params_.push_back(Parameter{std::move(name), value.detached()});
  return id;
}

std::optional<ParamId> ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

namespace init {

Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor constant(Shape shape, double value) { return Tensor(std::move(shape), value); }

Tensor xavier_uniform(Rng& rng, Shape shape, std::size_t fan_in, std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform(rng, std::move(shape), -limit, limit);
}

Tensor uniform(Rng& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

Tensor normal(Rng& rng, Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal(0.0, stddev);
  return t;
}

}  // namespace init

Forward::Forward(Graph& graph, const ParamStore& store, bool train_mode, Rng dropout_rng, bool track_params)
    : g(graph), train(train_mode), store_(store), rng_(dropout_rng), track_(track_params), bound_(store.size()) {}

const Tensor& Forward::p(ParamId id) {
  auto& slot = bound_.at(id);
  if (!slot) slot = g.leaf(store_[id].value, track_);
  return *slot;
}

void Forward::bind(ParamId id, Tensor t) {
  auto& slot = bound_.at(id);
  if (slot) throw Error("Forward::bind: parameter " + store_[id].name + " is already bound");
  if (t.shape() != store_[id].value.shape()) {
    throw ShapeError("Forward::bind: " + store_[id].name + " expects " + to_string(store_[id].value.shape()) + ", got " +
                     to_string(t.shape()));
  }
  slot = std::move(t);
}

Tensor Forward::dropout(const Tensor& x, double p) { return g.dropout(x, p, rng_, train); }

std::vector<Tensor> Forward::parameter_gradients(const Gradients& grads) const {
  std::vector<Tensor> out;
  out.reserve(bound_.size());
  for (std::size_t i = 0; i < bound_.size(); ++i) {
    if (bound_[i] && bound_[i]->requires_grad()) {
      out.push_back(grads.of(*bound_[i]));
    } else {
      out.emplace_back(store_[i].value.shape());
    }
  }
  return out;
}

Linear Linear::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = store.add(name + ".weight", init::xavier_uniform(rng, {in, out}, in, out));
  l.bias = store.add(name + ".bias", init::zeros({out}));
  return l;
}

Tensor Linear::operator()(Forward& f, const Tensor& x) const {
  if (x.rank() == 0 || x.shape().back() != in) {
    throw ShapeError("linear: expected last extent " + std::to_string(in) + ", got shape " + to_string(x.shape()));
  }
  return f.g.linear(x, f.p(weight), f.p(bias));
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& name, std::size_t width) {
  LayerNorm ln;
  ln.gain = store.add(name + ".gain", init::constant({width}, 1.0));
  ln.bias = store.add(name + ".bias", init::zeros({width}));
  return ln;
}

Tensor LayerNorm::operator()(Forward& f, const Tensor& x) const { return f.g.layer_norm(x, f.p(gain), f.p(bias)); }

MultiHeadAttention MultiHeadAttention::create(ParamStore& store, const std::string& name, std::size_t width,
                                              std::size_t heads, Rng& rng) {
  if (heads == 0 || width % heads != 0) {
    throw Error("attention '" + name + "': width " + std::to_string(width) + " is not divisible by " +
                std::to_string(heads) + " heads");
  }
  MultiHeadAttention a;
  a.width = width;
  a.heads = heads;
  a.query = Linear::create(store, name + ".query", width, width, rng);
  a.key = Linear::create(store, name + ".key", width, width, rng);
  a.value = Linear::create(store, name + ".value", width, width, rng);
  a.output = Linear::create(store, name + ".output", width, width, rng);
  return a;
}

Tensor MultiHeadAttention::operator()(Forward& f, const Tensor& queries, const Tensor& keys_values,
                                      const Tensor* key_mask) const {
  if (queries.rank() != 3 || keys_values.rank() != 3 || queries.dim(0) != keys_values.dim(0)) {
    throw ShapeError("attention: expected [B, L, d] operands, got " + to_string(queries.shape()) + " and " +
                     to_string(keys_values.shape()));
  }
  auto& g = f.g;
  const std::size_t head_dim = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const Tensor q = query(f, queries);
  const Tensor k = key(f, keys_values);
  const Tensor v = value(f, keys_values);
  std::vector<Tensor> contexts;
  contexts.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * head_dim;
    const Tensor qh = g.slice(q, -1, off, head_dim);
    const Tensor kh = g.slice(k, -1, off, head_dim);
    const Tensor vh = g.slice(v, -1, off, head_dim);
    const Tensor probs = g.softmax(g.scale(g.matmul(qh, kh, true), inv_sqrt), key_mask);
    if (f.attention_probe) f.attention_probe->push_back(probs.detached());
    contexts.push_back(g.matmul(probs, vh));
  }
  return output(f, heads == 1 ? contexts.front() : g.concat(contexts));
}

TransformerLayer TransformerLayer::create(ParamStore& store, const std::string& name, std::size_t width,
                                          std::size_t heads, std::size_t ffn_width, double dropout, Rng& rng) {
  TransformerLayer t;
  t.attention = MultiHeadAttention::create(store, name + ".attention", width, heads, rng);
  t.attention_norm = LayerNorm::create(store, name + ".attention_norm", width);
  t.ffn_in = Linear::create(store, name + ".ffn_in", width, ffn_width, rng);
  t.ffn_out = Linear::create(store, name + ".ffn_out", ffn_width, width, rng);
  t.ffn_norm = LayerNorm::create(store, name + ".ffn_norm", width);
  t.dropout = dropout;
  return t;
}

Tensor TransformerLayer::operator()(Forward& f, const Tensor& x, const Tensor* key_mask) const {
  auto& g = f.g;
  const Tensor attended = f.dropout(attention(f, x, x, key_mask), dropout);
  const Tensor h = attention_norm(f, g.add(x, attended));
  const Tensor ff = f.dropout(ffn_out(f, g.relu(ffn_in(f, h))), dropout);
  return ffn_norm(f, g.add(h, ff));
}

}  // namespace mfuse
