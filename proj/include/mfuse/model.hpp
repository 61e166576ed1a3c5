#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "mfuse/data.hpp"
#include "mfuse/encoders.hpp"
#include "mfuse/fusion.hpp"
#include "mfuse/heads.hpp"
#include "mfuse/nn.hpp"

namespace mfuse {

enum class FusionKind { none, early, attention_gate, tensor, attention };

std::string to_string(FusionKind k);
FusionKind parse_fusion(const std::string& s);

/// One registry entry. Pair models are named main-encoder first, so
/// "LstmBert" puts the time series in the main role and "BertLstm" the notes.
struct ModelSpec {
  std::string name;
  FusionKind fusion = FusionKind::none;
  std::optional<TsVariant> ts_variant;
  bool uses_ti = false;
  bool uses_ts = false;
  bool uses_text = false;
  std::optional<MainModality> main;
};

const std::vector<ModelSpec>& model_registry();
/// Throws with the list of valid names when `name` is unknown.
const ModelSpec& lookup_model(std::string_view name);

/// Dimensions taken from the dataset header.
struct DataDims {
  std::size_t d1 = 0;
  std::size_t l = 0;
  std::size_t d2 = 0;
  std::size_t vocab = 0;
  std::size_t n_labels = 1;
};

struct ModelConfig {
  std::string model_name = "LstmBert";
  Task task = Task::binary;

  std::size_t ti_dim = 64;  // D1'
  std::size_t ts_hidden = 32;
  std::size_t ts_dim = 32;
  std::size_t ts_layers = 1;
  std::size_t ts_heads = 4;
  std::size_t ts_ffn = 64;
  std::size_t ts_max_len = 512;
  std::size_t star_cycles = 2;
  std::size_t cnn_kernel = 3;

  std::size_t text_width = 64;
  std::size_t text_layers = 2;
  std::size_t text_heads = 4;
  std::size_t text_ffn = 128;
  std::size_t text_max_positions = 512;

  std::size_t fusion_width = 32;
  std::size_t fusion_heads = 4;

  double dropout = 0.1;
  double lr = 1e-4;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double grad_clip = 5.0;

  std::optional<DataDims> data;
};

std::string task_name(Task t);  // "arf_binary" / "diagnoses_multilabel"
Task parse_task_name(const std::string& s);

ModelConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelConfig& c);
/// Copies the dataset dims into the config; fails if the task differs.
ModelConfig resolve_config(ModelConfig config, const DatasetHeader& header);
/// FNV-1a 64 over the canonical JSON of the config.
std::uint64_t config_digest(const ModelConfig& c);

class Model {
 public:
  /// The config must be resolved against a dataset.
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const ModelSpec& spec() const { return *spec_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// [B] probabilities (binary) or [B, N] softmax rows (multilabel).
  Tensor predict(Forward& f, const SampleBatch& batch) const;
  /// The fused representation fed to the head.
  Tensor represent(Forward& f, const SampleBatch& batch) const;
  Tensor loss(Forward& f, const SampleBatch& batch, Tensor* predictions = nullptr) const;

 private:
  ModelConfig config_;
  const ModelSpec* spec_;
  ParamStore params_;
  std::optional<TiEncoder> ti_;
  std::optional<TimeSeriesEncoder> ts_;
  std::optional<TextEncoder> text_;
  std::optional<GateParams> gate_;
  std::optional<TensorFusion> tensor_fusion_;
  std::optional<Linear> ts_to_fusion_;
  std::optional<Linear> text_to_fusion_;
  std::optional<MultiHeadAttention> cross_attention_;
  PredictionHead head_;
};

}  // namespace mfuse
