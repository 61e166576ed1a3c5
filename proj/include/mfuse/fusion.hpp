#pragma once

#include <string>

#include "mfuse/nn.hpp"

namespace mfuse {

enum class MainModality { notes, time_series };

std::string to_string(MainModality m);
MainModality parse_main_modality(const std::string& s);

struct EncodedTriple {
  Tensor e_ti;  // [B, D1']
  Tensor e_ts;  // [B, D2']
  Tensor e_nt;  // [B, D3']
  MainModality main = MainModality::notes;
};

/// Parameters of the attention gate. Dimensions are stated in terms of the
/// main and auxiliary roles, so the same block serves either main modality.
struct GateParams {
  Linear gate_ti;   // [main; e_ti] -> 1
  Linear gate_aux;  // [main; aux] -> 1
  Linear shift;     // [g1 e_ti; g2 aux] -> main width
  ParamId beta = 0; // [1]

  static GateParams create(ParamStore& store, const std::string& name, std::size_t main_dim, std::size_t ti_dim,
                           std::size_t aux_dim, Rng& rng);
};

struct GateOutput {
  Tensor fused;      // M [B, D_main]
  Tensor alpha;      // [B, 1]
  Tensor gate_ti;    // g1 [B, 1]
  Tensor gate_aux;   // g2 [B, 1]
  Tensor shift;      // H [B, D_main]
};

/// M = main + alpha * H with per-sample scalar gates and
/// alpha = min(max(beta, 0) * |main| / |H|, 1), alpha = 0 when |H| = 0.
GateOutput attention_gate(Forward& f, const EncodedTriple& triple, const GateParams& params);

/// Role-resolved core of attention_gate.
GateOutput attention_gate_core(Forward& f, const Tensor& main, const Tensor& e_ti, const Tensor& aux,
                               const GateParams& params);

/// [B, D1] and [B, L, D2] -> [B, L, D1 + D2] with I_ti repeated at every step.
Tensor early_fuse(Graph& g, const Tensor& ti, const Tensor& ts);

/// Linear(flatten(outer(a_i, b_i))) per row.
struct TensorFusion {
  Linear projection;

  static TensorFusion create(ParamStore& store, const std::string& name, std::size_t a_dim, std::size_t b_dim,
                             std::size_t out_dim, Rng& rng);
  Tensor operator()(Forward& f, const Tensor& a, const Tensor& b) const;
};

/// Cross-attention: queries from the auxiliary sequence, keys and values
/// from the main sequence, then a (masked) mean over auxiliary positions.
Tensor attention_fuse(Forward& f, const MultiHeadAttention& attention, const Tensor& main_seq, const Tensor& aux_seq,
                      const Tensor* main_mask = nullptr, const Tensor* aux_mask = nullptr);

}  // namespace mfuse
