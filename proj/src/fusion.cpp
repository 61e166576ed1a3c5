#include "mfuse/fusion.hpp"

namespace mfuse {

std::string to_string(MainModality m) { return m == MainModality::notes ? "notes" : "time_series"; }

MainModality parse_main_modality(const std::string& s) {
  if (s == "notes") return MainModality::notes;
  if (s == "time_series") return MainModality::time_series;
  throw Error("unknown main modality '" + s + "' (expected notes or time_series)");
}

GateParams GateParams::create(ParamStore& store, const std::string& name, std::size_t main_dim, std::size_t ti_dim,
                              std::size_t aux_dim, Rng& rng) {
  GateParams p;
  p.gate_ti = Linear::create(store, name + ".gate_ti", main_dim + ti_dim, 1, rng);
  p.gate_aux = Linear::create(store, name + ".gate_aux", main_dim + aux_dim, 1, rng);
  p.shift = Linear::create(store, name + ".shift", ti_dim + aux_dim, main_dim, rng);
  p.beta = store.add(name + ".beta", Tensor::scalar(rng.uniform()));
  return p;
}

GateOutput attention_gate_core(Forward& f, const Tensor& main, const Tensor& e_ti, const Tensor& aux,
                               const GateParams& params) {
  auto& g = f.g;
  if (main.rank() != 2 || e_ti.rank() != 2 || aux.rank() != 2 || main.dim(0) != e_ti.dim(0) ||
      main.dim(0) != aux.dim(0)) {
    throw ShapeError("attention_gate: expected [B, d] inputs with a common batch, got " + to_string(main.shape()) +
                     ", " + to_string(e_ti.shape()) + ", " + to_string(aux.shape()));
  }
  if (main.dim(1) + e_ti.dim(1) != params.gate_ti.in || main.dim(1) + aux.dim(1) != params.gate_aux.in ||
      params.shift.out != main.dim(1)) {
    throw ShapeError("attention_gate: parameter dims do not match inputs " + to_string(main.shape()) + ", " +
                     to_string(e_ti.shape()) + ", " + to_string(aux.shape()));
  }
  GateOutput out;
  out.gate_ti = g.relu(params.gate_ti(f, g.concat({main, e_ti})));
  out.gate_aux = g.relu(params.gate_aux(f, g.concat({main, aux})));
  out.shift = params.shift(f, g.concat({g.mul(e_ti, out.gate_ti), g.mul(aux, out.gate_aux)}));
  const Tensor ratio = g.mul(g.l2_norm_rows(main), g.reciprocal(g.l2_norm_rows(out.shift)));
  out.alpha = g.scalar_min(g.mul(ratio, g.relu(f.p(params.beta))), 1.0);
  out.fused = g.add(main, g.mul(out.shift, out.alpha));
  return out;
}

GateOutput attention_gate(Forward& f, const EncodedTriple& triple, const GateParams& params) {
  if (triple.main == MainModality::notes) return attention_gate_core(f, triple.e_nt, triple.e_ti, triple.e_ts, params);
  return attention_gate_core(f, triple.e_ts, triple.e_ti, triple.e_nt, params);
}

Tensor early_fuse(Graph& g, const Tensor& ti, const Tensor& ts) {
  if (ti.rank() != 2 || ts.rank() != 3 || ti.dim(0) != ts.dim(0)) {
    throw ShapeError("early_fuse: expected [B, D1] and [B, L, D2], got " + to_string(ti.shape()) + " and " +
                     to_string(ts.shape()));
  }
  const std::size_t B = ti.dim(0), D1 = ti.dim(1), L = ts.dim(1);
  const std::vector<Tensor> copies(L, ti);
  const Tensor repeated = L == 1 ? g.reshape(ti, {B, 1, D1}) : g.reshape(g.concat(copies), {B, L, D1});
  return g.concat({repeated, ts});
}

TensorFusion TensorFusion::create(ParamStore& store, const std::string& name, std::size_t a_dim, std::size_t b_dim,
                                  std::size_t out_dim, Rng& rng) {
  return TensorFusion{Linear::create(store, name + ".projection", a_dim * b_dim, out_dim, rng)};
}

Tensor TensorFusion::operator()(Forward& f, const Tensor& a, const Tensor& b) const {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) * b.dim(1) != projection.in) {
    throw ShapeError("tensor_fuse: inputs " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                     " do not match a projection from " + std::to_string(projection.in));
  }
  return projection(f, f.g.outer(a, b));
}

Tensor attention_fuse(Forward& f, const MultiHeadAttention& attention, const Tensor& main_seq, const Tensor& aux_seq,
                      const Tensor* main_mask, const Tensor* aux_mask) {
  auto& g = f.g;
  if (main_seq.rank() != 3 || aux_seq.rank() != 3 || main_seq.dim(2) != attention.width ||
      aux_seq.dim(2) != attention.width) {
    throw ShapeError("attention_fuse: expected [B, L, " + std::to_string(attention.width) + "] sequences, got " +
                     to_string(main_seq.shape()) + " and " + to_string(aux_seq.shape()));
  }
  const Tensor attended = attention(f, aux_seq, main_seq, main_mask);
  const std::size_t B = aux_seq.dim(0), La = aux_seq.dim(1);
  if (!aux_mask) return g.mean(attended, 1);
  if (aux_mask->shape() != Shape{B, La}) throw ShapeError("attention_fuse: aux mask shape mismatch");
  Tensor weights({B, 1, La});
  for (std::size_t b = 0; b < B; ++b) {
    double count = 0.0;
    for (std::size_t j = 0; j < La; ++j) count += (*aux_mask)[b * La + j];
    if (count == 0.0) throw Error("attention_fuse: auxiliary row " + std::to_string(b) + " is fully masked");
    for (std::size_t j = 0; j < La; ++j) weights[b * La + j] = (*aux_mask)[b * La + j] / count;
  }
  return g.reshape(g.matmul(weights, attended), {B, attention.width});
}

}  // namespace mfuse
