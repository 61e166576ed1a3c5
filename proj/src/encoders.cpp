#include "mfuse/encoders.hpp"

#include <array>
#include <cmath>

namespace mfuse {

TiEncoder TiEncoder::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  return TiEncoder{Linear::create(store, name + ".fc", in, out, rng)};
}

Tensor TiEncoder::operator()(Forward& f, const Tensor& ti) const {
  if (ti.rank() != 2 || ti.dim(1) != fc.in) {
    throw ShapeError("encode_ti: expected [B, " + std::to_string(fc.in) + "], got " + to_string(ti.shape()));
  }
  return f.g.relu(fc(f, ti));
}

std::string to_string(TsVariant v) {
  switch (v) {
    case TsVariant::lstm:
      return "lstm";
    case TsVariant::cnn:
      return "cnn";
    case TsVariant::star_transformer:
      return "star_transformer";
    case TsVariant::transformer_encoder:
      return "transformer_encoder";
  }
  return "unknown";
}

TsVariant parse_ts_variant(const std::string& s) {
  if (s == "lstm") return TsVariant::lstm;
  if (s == "cnn") return TsVariant::cnn;
  if (s == "star_transformer") return TsVariant::star_transformer;
  if (s == "transformer_encoder") return TsVariant::transformer_encoder;
  throw Error("unknown time-series encoder variant '" + s +
              "' (expected lstm, cnn, star_transformer or transformer_encoder)");
}

Tensor shift_steps(Graph& g, const Tensor& seq, bool previous) {
  const std::size_t B = seq.dim(0), L = seq.dim(1), d = seq.dim(2);
  if (L == 1) return seq;
  const Tensor flat = g.reshape(seq, {B, L * d});
  Tensor rotated = previous ? g.concat({g.slice(flat, -1, (L - 1) * d, d), g.slice(flat, -1, 0, (L - 1) * d)})
                            : g.concat({g.slice(flat, -1, d, (L - 1) * d), g.slice(flat, -1, 0, d)});
  return g.reshape(rotated, {B, L, d});
}

// ---------------------------------------------------------------------------
// Star-Transformer

StarTransformer StarTransformer::create(ParamStore& store, const std::string& name, std::size_t width,
                                        std::size_t heads, Rng& rng) {
  StarTransformer s;
  s.width = width;
  s.heads = heads;
  s.satellite_attention = MultiHeadAttention::create(store, name + ".satellite_attention", width, heads, rng);
  s.relay_attention = MultiHeadAttention::create(store, name + ".relay_attention", width, heads, rng);
  s.satellite_norm = LayerNorm::create(store, name + ".satellite_norm", width);
  s.relay_norm = LayerNorm::create(store, name + ".relay_norm", width);
  return s;
}

StarTransformer::State StarTransformer::initial(Forward& f, const Tensor& embeds) const {
  return State{embeds, f.g.mean(embeds, 1)};
}

StarTransformer::State StarTransformer::cycle(Forward& f, const State& state, const Tensor& embeds) const {
  auto& g = f.g;
  const Tensor& sats = state.satellites;
  const Tensor& relay = state.relay;
  if (sats.rank() != 3 || sats.shape() != embeds.shape() || sats.dim(2) != width || relay.shape() != Shape{sats.dim(0), width}) {
    throw ShapeError("star_transformer_cycle: inconsistent shapes " + to_string(sats.shape()) + ", " +
                     to_string(relay.shape()) + ", " + to_string(embeds.shape()));
  }
  const std::size_t B = sats.dim(0), L = sats.dim(1);
  const std::size_t hd = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  // Satellites: five-element context per position, all from the previous state.
  const MultiHeadAttention& sa = satellite_attention;
  const std::array<Tensor, 4> ctx_seq = {shift_steps(g, sats, true), sats, shift_steps(g, sats, false), embeds};
  const Tensor q = sa.query(f, sats);
  std::array<Tensor, 4> keys, values;
  for (std::size_t c = 0; c < 4; ++c) {
    keys[c] = sa.key(f, ctx_seq[c]);
    values[c] = sa.value(f, ctx_seq[c]);
  }
  const Tensor relay_key = sa.key(f, relay);
  const Tensor relay_value = sa.value(f, relay);

  std::vector<Tensor> contexts;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    const Tensor qh = g.slice(q, -1, off, hd);
    std::vector<Tensor> scores;
    for (std::size_t c = 0; c < 4; ++c) {
      const Tensor dot = g.scale(g.mean(g.mul(qh, g.slice(keys[c], -1, off, hd)), -1), static_cast<double>(hd) * inv_sqrt);
      scores.push_back(g.reshape(dot, {B, L, 1}));
    }
    const Tensor rk = g.reshape(g.slice(relay_key, -1, off, hd), {B, 1, hd});
    scores.push_back(g.scale(g.matmul(qh, rk, true), inv_sqrt));
    const Tensor probs = g.softmax(g.concat(scores));
    if (f.attention_probe) f.attention_probe->push_back(probs.detached());
    Tensor ctx = g.matmul(g.slice(probs, -1, 4, 1), g.reshape(g.slice(relay_value, -1, off, hd), {B, 1, hd}));
    for (std::size_t c = 0; c < 4; ++c) {
      ctx = g.add(ctx, g.mul(g.slice(values[c], -1, off, hd), g.slice(probs, -1, c, 1)));
    }
    contexts.push_back(ctx);
  }
  const Tensor new_sats =
      satellite_norm(f, g.relu(sa.output(f, heads == 1 ? contexts.front() : g.concat(contexts))));

  // Relay: attends over itself and the updated satellites.
  const MultiHeadAttention& ra = relay_attention;
  const Tensor rq = g.reshape(ra.query(f, relay), {B, 1, width});
  const Tensor rk_self = g.reshape(ra.key(f, relay), {B, 1, width});
  const Tensor rv_self = g.reshape(ra.value(f, relay), {B, 1, width});
  const Tensor sk = ra.key(f, new_sats);
  const Tensor sv = ra.value(f, new_sats);
  std::vector<Tensor> relay_contexts;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    const Tensor qh = g.slice(rq, -1, off, hd);
    const Tensor self_score = g.scale(g.matmul(qh, g.slice(rk_self, -1, off, hd), true), inv_sqrt);
    const Tensor sat_scores = g.scale(g.matmul(qh, g.slice(sk, -1, off, hd), true), inv_sqrt);
    const Tensor probs = g.softmax(g.concat({self_score, sat_scores}));
    if (f.attention_probe) f.attention_probe->push_back(probs.detached());
    relay_contexts.push_back(g.add(g.mul(g.slice(rv_self, -1, off, hd), g.slice(probs, -1, 0, 1)),
                                   g.matmul(g.slice(probs, -1, 1, L), g.slice(sv, -1, off, hd))));
  }
  const Tensor relay_out = ra.output(f, heads == 1 ? relay_contexts.front() : g.concat(relay_contexts));
  const Tensor new_relay = relay_norm(f, g.relu(g.reshape(relay_out, {B, width})));
  return State{new_sats, new_relay};
}

// ---------------------------------------------------------------------------
// Time-series encoders

TimeSeriesEncoder TimeSeriesEncoder::create(ParamStore& store, const std::string& name, const TsEncoderConfig& config,
                                            Rng& rng) {
  if (config.input_dim == 0 || config.hidden == 0) throw Error("time-series encoder needs positive dims");
  if (config.layers == 0) throw Error("time-series encoder needs at least one layer");
  TimeSeriesEncoder e;
  e.config_ = config;
  const std::size_t H = config.hidden;
  switch (config.variant) {
    case TsVariant::lstm: {
      const double k = 1.0 / std::sqrt(static_cast<double>(H));
      std::size_t in = config.input_dim;
      for (std::size_t l = 0; l < config.layers; ++l) {
        const std::string p = name + ".lstm" + std::to_string(l);
        LstmLayer layer;
        layer.hidden = H;
        layer.input_weight = store.add(p + ".input_weight", init::uniform(rng, {in, 4 * H}, -k, k));
        layer.hidden_weight = store.add(p + ".hidden_weight", init::uniform(rng, {H, 4 * H}, -k, k));
        Tensor bias = init::uniform(rng, {4 * H}, -k, k);
        for (std::size_t j = H; j < 2 * H; ++j) bias[j] = 1.0;
        layer.bias = store.add(p + ".bias", bias);
        e.lstm_.push_back(layer);
        in = H;
      }
      break;
    }
    case TsVariant::cnn: {
      const std::size_t K = config.kernel;
      e.conv1_w_ = store.add(name + ".conv1.weight",
                             init::xavier_uniform(rng, {K, config.input_dim, H}, K * config.input_dim, K * H));
      e.conv1_b_ = store.add(name + ".conv1.bias", init::zeros({H}));
      e.conv2_w_ = store.add(name + ".conv2.weight", init::xavier_uniform(rng, {K, H, H}, K * H, K * H));
      e.conv2_b_ = store.add(name + ".conv2.bias", init::zeros({H}));
      break;
    }
    case TsVariant::star_transformer:
      e.embed_ = Linear::create(store, name + ".embed", config.input_dim, H, rng);
      e.star_ = StarTransformer::create(store, name + ".star", H, config.heads, rng);
      break;
    case TsVariant::transformer_encoder:
      e.embed_ = Linear::create(store, name + ".embed", config.input_dim, H, rng);
      e.positions_ = store.add(name + ".positions", init::normal(rng, {config.max_len, H}, 0.02));
      for (std::size_t l = 0; l < config.layers; ++l) {
        e.transformer_.push_back(TransformerLayer::create(store, name + ".layer" + std::to_string(l), H, config.heads,
                                                          config.ffn, config.dropout, rng));
      }
      break;
  }
  if (config.variant != TsVariant::transformer_encoder) {
    e.projection_ = Linear::create(store, name + ".projection", H, config.out_dim, rng);
  }
  return e;
}

std::size_t TimeSeriesEncoder::out_dim() const {
  return config_.variant == TsVariant::transformer_encoder ? config_.hidden : config_.out_dim;
}

TsEncoding TimeSeriesEncoder::operator()(Forward& f, const Tensor& ts) const {
  if (ts.rank() != 3 || ts.dim(2) != config_.input_dim) {
    throw ShapeError("encode_ts: expected [B, L, " + std::to_string(config_.input_dim) + "], got " +
                     to_string(ts.shape()));
  }
  TsEncoding out;
  switch (config_.variant) {
    case TsVariant::lstm:
      out = run_lstm(f, ts);
      break;
    case TsVariant::cnn:
      out = run_cnn(f, ts);
      break;
    case TsVariant::star_transformer:
      out = run_star(f, ts);
      break;
    case TsVariant::transformer_encoder:
      out = run_transformer(f, ts);
      break;
  }
  out.encoded = projection_ ? f.g.relu((*projection_)(f, out.pooled)) : out.pooled;
  return out;
}

TsEncoding TimeSeriesEncoder::run_lstm(Forward& f, const Tensor& ts) const {
  auto& g = f.g;
  const std::size_t B = ts.dim(0), L = ts.dim(1);
  Tensor seq = ts;
  Tensor h;
  for (const LstmLayer& layer : lstm_) {
    const std::size_t H = layer.hidden;
    const Tensor xw = g.matmul(seq, f.p(layer.input_weight));
    h = Tensor({B, H});
    Tensor c({B, H});
    std::vector<Tensor> states;
    states.reserve(L);
    for (std::size_t t = 0; t < L; ++t) {
      const Tensor xt = g.reshape(g.slice(xw, 1, t, 1), {B, 4 * H});
      const Tensor z = g.add(g.add(xt, g.matmul(h, f.p(layer.hidden_weight))), f.p(layer.bias));
      const Tensor in_gate = g.sigmoid(g.slice(z, -1, 0, H));
      const Tensor forget_gate = g.sigmoid(g.slice(z, -1, H, H));
      const Tensor candidate = g.tanh(g.slice(z, -1, 2 * H, H));
      const Tensor out_gate = g.sigmoid(g.slice(z, -1, 3 * H, H));
      c = g.add(g.mul(forget_gate, c), g.mul(in_gate, candidate));
      h = g.mul(out_gate, g.tanh(c));
      states.push_back(h);
    }
    seq = L == 1 ? g.reshape(h, {B, 1, H}) : g.reshape(g.concat(states), {B, L, H});
  }
  return TsEncoding{h, {}, seq};
}

TsEncoding TimeSeriesEncoder::run_cnn(Forward& f, const Tensor& ts) const {
  auto& g = f.g;
  const Tensor h1 = g.relu(g.conv1d(ts, f.p(conv1_w_), f.p(conv1_b_)));
  const Tensor h2 = g.relu(g.conv1d(f.dropout(h1, config_.dropout), f.p(conv2_w_), f.p(conv2_b_)));
  return TsEncoding{g.max(h2, 1), {}, h2};
}

TsEncoding TimeSeriesEncoder::run_star(Forward& f, const Tensor& ts) const {
  const Tensor embeds = embed_(f, ts);
  auto state = star_.initial(f, embeds);
  for (std::size_t t = 0; t < config_.cycles; ++t) state = star_.cycle(f, state, embeds);
  return TsEncoding{state.relay, {}, state.satellites};
}

TsEncoding TimeSeriesEncoder::run_transformer(Forward& f, const Tensor& ts) const {
  auto& g = f.g;
  const std::size_t L = ts.dim(1);
  if (L > config_.max_len) {
    throw ShapeError("encode_ts: sequence length " + std::to_string(L) + " exceeds " + std::to_string(config_.max_len) +
                     " positions");
  }
  Tensor x = g.add(embed_(f, ts), g.slice(f.p(positions_), 0, 0, L));
  x = f.dropout(x, config_.dropout);
  for (const TransformerLayer& layer : transformer_) x = layer(f, x);
  return TsEncoding{g.mean(x, 1), {}, x};
}

// ---------------------------------------------------------------------------
// Text encoder

TextEncoder TextEncoder::create(ParamStore& store, const std::string& name, const TextEncoderConfig& config, Rng& rng) {
  if (config.vocab < 2 || config.width == 0 || config.layers == 0) throw Error("text encoder: invalid configuration");
  TextEncoder e;
  e.config_ = config;
  e.tokens_ = store.add(name + ".tokens", init::normal(rng, {config.vocab, config.width}, 0.02));
  e.positions_ = store.add(name + ".positions", init::normal(rng, {config.max_positions, config.width}, 0.02));
  e.embed_norm_ = LayerNorm::create(store, name + ".embed_norm", config.width);
  for (std::size_t l = 0; l < config.layers; ++l) {
    e.layers_.push_back(TransformerLayer::create(store, name + ".layer" + std::to_string(l), config.width,
                                                 config.heads, config.ffn, config.dropout, rng));
  }
  return e;
}

TextEncoding TextEncoder::operator()(Forward& f, const IdMatrix& ids, const Tensor& mask) const {
  auto& g = f.g;
  const std::size_t B = ids.rows, L = ids.cols;
  if (B == 0 || L == 0) throw ShapeError("encode_text: empty id matrix");
  if (mask.shape() != Shape{B, L}) {
    throw ShapeError("encode_text: mask shape " + to_string(mask.shape()) + " does not match ids [" +
                     std::to_string(B) + "x" + std::to_string(L) + "]");
  }
  if (L > config_.max_positions) {
    throw ShapeError("encode_text: " + std::to_string(L) + " tokens exceed " + std::to_string(config_.max_positions) +
                     " positions");
  }
  for (std::size_t r = 0; r < B; ++r) {
    if (ids(r, 0) != config_.cls_id) {
      throw Error("encode_text: row " + std::to_string(r) + " does not start with the classification token");
    }
    double live = 0.0;
    for (std::size_t c = 0; c < L; ++c) live += mask[r * L + c];
    if (live == 0.0) throw Error("encode_text: row " + std::to_string(r) + " is fully masked");
    for (std::size_t c = 0; c < L; ++c) {
      const int id = ids(r, c);
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab) {
        throw Error("encode_text: token id " + std::to_string(id) + " outside vocabulary of size " +
                    std::to_string(config_.vocab));
      }
    }
  }
  Tensor x = g.add(g.embedding(f.p(tokens_), ids), g.slice(f.p(positions_), 0, 0, L));
  x = f.dropout(embed_norm_(f, x), config_.dropout);
  for (const TransformerLayer& layer : layers_) x = layer(f, x, &mask);
  const Tensor cls = g.reshape(g.slice(x, 1, 0, 1), {B, config_.width});
  return TextEncoding{cls, x};
}

}  // namespace mfuse
