#pragma once

#include <string>
#include <vector>

#include "mfuse/nn.hpp"

namespace mfuse {

/// E_ti = ReLU(I_ti W + b).
struct TiEncoder {
  Linear fc;

  static TiEncoder create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(Forward& f, const Tensor& ti) const;
  std::size_t out_dim() const { return fc.out; }
};

enum class TsVariant { lstm, cnn, star_transformer, transformer_encoder };

std::string to_string(TsVariant v);
TsVariant parse_ts_variant(const std::string& s);

struct TsEncoderConfig {
  TsVariant variant = TsVariant::lstm;
  std::size_t input_dim = 0;   // D2 (or D1 + D2 after early fusion)
  std::size_t hidden = 32;     // L2'
  std::size_t out_dim = 16;    // D2'; ignored by transformer_encoder
  std::size_t layers = 1;
  std::size_t heads = 2;
  std::size_t cycles = 2;      // star_transformer update cycles
  std::size_t ffn = 64;        // transformer_encoder feed-forward width
  std::size_t kernel = 3;      // cnn kernel width
  std::size_t max_len = 512;   // transformer_encoder positions
  double dropout = 0.0;
};

struct TsEncoding {
  Tensor pooled;    // E'_ts [B, hidden]
  Tensor encoded;   // E_ts [B, out] (== pooled for transformer_encoder)
  Tensor sequence;  // per-step states [B, L, hidden]
};

/// Single-layer LSTM cell weights; gate order i, f, g, o.
struct LstmLayer {
  ParamId input_weight = 0;   // [in, 4H]
  ParamId hidden_weight = 0;  // [H, 4H]
  ParamId bias = 0;           // [4H]
  std::size_t hidden = 0;
};

/// Star-Transformer: satellites (one per step) and one relay node.
struct StarTransformer {
  MultiHeadAttention satellite_attention;
  MultiHeadAttention relay_attention;
  LayerNorm satellite_norm;
  LayerNorm relay_norm;
  std::size_t width = 0;
  std::size_t heads = 1;

  static StarTransformer create(ParamStore& store, const std::string& name, std::size_t width, std::size_t heads,
                                Rng& rng);

  struct State {
    Tensor satellites;  // [B, L, d]
    Tensor relay;       // [B, d]
  };

  /// Satellites are initialized to the embeddings, the relay to their mean.
  State initial(Forward& f, const Tensor& embeds) const;
  /// One update: every satellite attends over {s_{i-1}, s_i, s_{i+1}, e_i,
  /// relay} (ring neighbors) using the previous states; then the relay
  /// attends over itself and the updated satellites. Each update is followed
  /// by ReLU and layer norm.
  State cycle(Forward& f, const State& state, const Tensor& embeds) const;
};

class TimeSeriesEncoder {
 public:
  static TimeSeriesEncoder create(ParamStore& store, const std::string& name, const TsEncoderConfig& config, Rng& rng);

  TsEncoding operator()(Forward& f, const Tensor& ts) const;

  const TsEncoderConfig& config() const { return config_; }
  std::size_t out_dim() const;
  std::size_t sequence_dim() const { return config_.hidden; }
  const StarTransformer& star() const { return star_; }
  const std::vector<LstmLayer>& lstm_layers() const { return lstm_; }

 private:
  TsEncoding run_lstm(Forward& f, const Tensor& ts) const;
  TsEncoding run_cnn(Forward& f, const Tensor& ts) const;
  TsEncoding run_star(Forward& f, const Tensor& ts) const;
  TsEncoding run_transformer(Forward& f, const Tensor& ts) const;

  TsEncoderConfig config_;
  std::vector<LstmLayer> lstm_;
  ParamId conv1_w_ = 0, conv1_b_ = 0, conv2_w_ = 0, conv2_b_ = 0;
  Linear embed_;
  ParamId positions_ = 0;
  StarTransformer star_;
  std::vector<TransformerLayer> transformer_;
  std::optional<Linear> projection_;
};

struct TextEncoderConfig {
  std::size_t vocab = 1000;
  std::size_t width = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  std::size_t max_positions = 512;
  int cls_id = 1;
  double dropout = 0.0;
};

struct TextEncoding {
  Tensor cls;       // E_nt [B, width]
  Tensor sequence;  // final-layer token states [B, L, width]
};

/// BERT-architecture encoder: token + learned position embeddings, embedding
/// layer norm, post-norm transformer blocks; pooled at the first token.
class TextEncoder {
 public:
  static TextEncoder create(ParamStore& store, const std::string& name, const TextEncoderConfig& config, Rng& rng);

  /// ids [B, L] with the classification token first; mask [B, L] of 0/1.
  TextEncoding operator()(Forward& f, const IdMatrix& ids, const Tensor& mask) const;

  const TextEncoderConfig& config() const { return config_; }
  std::size_t out_dim() const { return config_.width; }
  ParamId token_table() const { return tokens_; }

 private:
  TextEncoderConfig config_;
  ParamId tokens_ = 0;
  ParamId positions_ = 0;
  LayerNorm embed_norm_;
  std::vector<TransformerLayer> layers_;
};

/// [B, L*d] rotation helpers used for the satellite ring.
Tensor shift_steps(Graph& g, const Tensor& seq, bool previous);

}  // namespace mfuse
