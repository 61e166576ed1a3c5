#include "mfuse/model.hpp"

#include <algorithm>
#include <sstream>

namespace mfuse {

using nlohmann::json;

std::string to_string(FusionKind k) {
  switch (k) {
    case FusionKind::none:
      return "none";
    case FusionKind::early:
      return "early";
    case FusionKind::attention_gate:
      return "attention_gate";
    case FusionKind::tensor:
      return "tensor";
    case FusionKind::attention:
      return "attention";
  }
  return "unknown";
}

FusionKind parse_fusion(const std::string& s) {
  for (auto k : {FusionKind::none, FusionKind::early, FusionKind::attention_gate, FusionKind::tensor,
                 FusionKind::attention}) {
    if (to_string(k) == s) return k;
  }
  throw Error("unknown fusion '" + s + "' (expected attention_gate, tensor, attention, early or none)");
}

namespace {

struct EncoderName {
  const char* short_name;
  TsVariant variant;
};

constexpr EncoderName kTsEncoders[] = {
    {"Lstm", TsVariant::lstm},
    {"Cnn", TsVariant::cnn},
    {"Star", TsVariant::star_transformer},
    {"Encoder", TsVariant::transformer_encoder},
};

std::vector<ModelSpec> build_registry() {
  std::vector<ModelSpec> r;
  r.push_back({"Ti", FusionKind::none, std::nullopt, true, false, false, std::nullopt});
  for (const auto& e : kTsEncoders) r.push_back({e.short_name, FusionKind::none, e.variant, false, true, false, std::nullopt});
  r.push_back({"Bert", FusionKind::none, std::nullopt, false, false, true, std::nullopt});
  for (const auto& e : kTsEncoders) {
    r.push_back({std::string("F-") + e.short_name, FusionKind::early, e.variant, true, true, false, std::nullopt});
  }
  const std::pair<FusionKind, const char*> variants[] = {
      {FusionKind::attention_gate, ""}, {FusionKind::tensor, "[TF]"}, {FusionKind::attention, "[AT]"}};
  for (const auto& [kind, suffix] : variants) {
    for (const auto& e : kTsEncoders) {
      r.push_back({std::string(e.short_name) + "Bert" + suffix, kind, e.variant, true, true, true,
                   MainModality::time_series});
      r.push_back({std::string("Bert") + e.short_name + suffix, kind, e.variant, true, true, true, MainModality::notes});
    }
  }
  return r;
}

}  // namespace

const std::vector<ModelSpec>& model_registry() {
  static const std::vector<ModelSpec> registry = build_registry();
  return registry;
}

const ModelSpec& lookup_model(std::string_view name) {
  for (const auto& spec : model_registry()) {
    if (spec.name == name) return spec;
  }
  std::ostringstream os;
  os << "unknown model '" << name << "'; valid names:";
  for (const auto& spec : model_registry()) os << ' ' << spec.name;
  throw Error(os.str());
}

std::string task_name(Task t) { return t == Task::binary ? "arf_binary" : "diagnoses_multilabel"; }

Task parse_task_name(const std::string& s) {
  if (s == "arf_binary" || s == "binary") return Task::binary;
  if (s == "diagnoses_multilabel" || s == "multilabel") return Task::multilabel;
  throw Error("unknown task '" + s + "' (expected arf_binary or diagnoses_multilabel)");
}

ModelConfig config_from_json(const json& j) {
  static const char* known[] = {
      "model_name", "task",         "fusion",      "main",        "ti_dim",       "ts_hidden",    "ts_dim",
      "ts_layers",  "ts_heads",     "ts_ffn",      "ts_max_len",  "star_cycles",  "cnn_kernel",   "text_width",
      "text_layers", "text_heads",  "text_ffn",    "text_max_positions", "fusion_width", "fusion_heads",
      "dropout",    "lr",           "epochs",      "batch_size",  "seed",         "grad_clip",    "data"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(std::begin(known), std::end(known), [&](const char* k) { return it.key() == k; })) {
      throw Error("config: unknown key '" + it.key() + "'");
    }
  }
  ModelConfig c;
  try {
    c.model_name = j.value("model_name", c.model_name);
    if (j.contains("task")) c.task = parse_task_name(j.at("task").get<std::string>());
    c.ti_dim = j.value("ti_dim", c.ti_dim);
    c.ts_hidden = j.value("ts_hidden", c.ts_hidden);
    c.ts_dim = j.value("ts_dim", c.ts_dim);
    c.ts_layers = j.value("ts_layers", c.ts_layers);
    c.ts_heads = j.value("ts_heads", c.ts_heads);
    c.ts_ffn = j.value("ts_ffn", c.ts_ffn);
    c.ts_max_len = j.value("ts_max_len", c.ts_max_len);
    c.star_cycles = j.value("star_cycles", c.star_cycles);
    c.cnn_kernel = j.value("cnn_kernel", c.cnn_kernel);
    c.text_width = j.value("text_width", c.text_width);
    c.text_layers = j.value("text_layers", c.text_layers);
    c.text_heads = j.value("text_heads", c.text_heads);
    c.text_ffn = j.value("text_ffn", c.text_ffn);
    c.text_max_positions = j.value("text_max_positions", c.text_max_positions);
    c.fusion_width = j.value("fusion_width", c.fusion_width);
    c.fusion_heads = j.value("fusion_heads", c.fusion_heads);
    c.dropout = j.value("dropout", c.dropout);
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    if (j.contains("data")) {
      const auto& d = j.at("data");
      c.data = DataDims{d.at("d1").get<std::size_t>(), d.at("l").get<std::size_t>(), d.at("d2").get<std::size_t>(),
                        d.at("vocab").get<std::size_t>(), d.at("n_labels").get<std::size_t>()};
    }
  } catch (const json::exception& e) {
    throw Error(std::string("config: ") + e.what());
  }
  const ModelSpec& spec = lookup_model(c.model_name);
  if (j.contains("fusion") && parse_fusion(j.at("fusion").get<std::string>()) != spec.fusion) {
    throw Error("config: fusion '" + j.at("fusion").get<std::string>() + "' contradicts model " + spec.name +
                " (" + to_string(spec.fusion) + ")");
  }
  if (j.contains("main")) {
    const MainModality m = parse_main_modality(j.at("main").get<std::string>());
    if (!spec.main || *spec.main != m) {
      throw Error("config: main modality '" + to_string(m) + "' contradicts model " + spec.name);
    }
  }
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw Error("config: dropout must lie in [0, 1)");
  if (!(c.lr >= 0.0)) throw Error("config: lr must be non-negative");
  if (c.batch_size == 0) throw Error("config: batch_size must be >= 1");
  return c;
}

json to_json(const ModelConfig& c) {
  const ModelSpec& spec = lookup_model(c.model_name);
  json j{{"model_name", c.model_name},
         {"task", task_name(c.task)},
         {"fusion", to_string(spec.fusion)},
         {"ti_dim", c.ti_dim},
         {"ts_hidden", c.ts_hidden},
         {"ts_dim", c.ts_dim},
         {"ts_layers", c.ts_layers},
         {"ts_heads", c.ts_heads},
         {"ts_ffn", c.ts_ffn},
         {"ts_max_len", c.ts_max_len},
         {"star_cycles", c.star_cycles},
         {"cnn_kernel", c.cnn_kernel},
         {"text_width", c.text_width},
         {"text_layers", c.text_layers},
         {"text_heads", c.text_heads},
         {"text_ffn", c.text_ffn},
         {"text_max_positions", c.text_max_positions},
         {"fusion_width", c.fusion_width},
         {"fusion_heads", c.fusion_heads},
         {"dropout", c.dropout},
         {"lr", c.lr},
         {"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"seed", c.seed},
         {"grad_clip", c.grad_clip}};
  if (spec.main) j["main"] = to_string(*spec.main);
  if (c.data) {
    j["data"] = {{"d1", c.data->d1}, {"l", c.data->l}, {"d2", c.data->d2}, {"vocab", c.data->vocab},
                 {"n_labels", c.data->n_labels}};
  }
  return j;
}

ModelConfig resolve_config(ModelConfig config, const DatasetHeader& header) {
  if (config.task != header.task) {
    throw Error("config task " + task_name(config.task) + " does not match dataset task " + to_string(header.task));
  }
  const DataDims dims{header.d1, header.l, header.d2, header.vocab, header.n_labels};
  if (config.data && (config.data->d1 != dims.d1 || config.data->l != dims.l || config.data->d2 != dims.d2 ||
                      config.data->vocab != dims.vocab || config.data->n_labels != dims.n_labels)) {
    throw Error("config data dims do not match the dataset header");
  }
  config.data = dims;
  return config;
}

std::uint64_t config_digest(const ModelConfig& c) {
  const std::string text = to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------

Model::Model(const ModelConfig& config) : config_(config), spec_(&lookup_model(config.model_name)) {
  if (!config_.data) throw Error("model config has no data dims; resolve it against a dataset first");
  const DataDims& dims = *config_.data;
  Rng rng = Rng(config_.seed).split(0x1417);
  const ModelSpec& s = *spec_;
  const bool two_stage =
      s.fusion == FusionKind::early || s.fusion == FusionKind::tensor || s.fusion == FusionKind::attention;

  if (s.uses_ti && !two_stage) ti_ = TiEncoder::create(params_, "ti_encoder", dims.d1, config_.ti_dim, rng);
  if (s.uses_ts) {
    TsEncoderConfig tc;
    tc.variant = *s.ts_variant;
    tc.input_dim = two_stage ? dims.d1 + dims.d2 : dims.d2;
    tc.hidden = config_.ts_hidden;
    tc.out_dim = config_.ts_dim;
    tc.layers = config_.ts_layers;
    tc.heads = config_.ts_heads;
    tc.cycles = config_.star_cycles;
    tc.ffn = config_.ts_ffn;
    tc.kernel = config_.cnn_kernel;
    tc.max_len = config_.ts_max_len;
    tc.dropout = config_.dropout;
    ts_ = TimeSeriesEncoder::create(params_, "ts_encoder", tc, rng);
  }
  if (s.uses_text) {
    TextEncoderConfig xc;
    xc.vocab = dims.vocab;
    xc.width = config_.text_width;
    xc.layers = config_.text_layers;
    xc.heads = config_.text_heads;
    xc.ffn = config_.text_ffn;
    xc.max_positions = config_.text_max_positions;
    xc.cls_id = kClsId;
    xc.dropout = config_.dropout;
    text_ = TextEncoder::create(params_, "text_encoder", xc, rng);
  }

  std::size_t rep_dim = 0;
  switch (s.fusion) {
    case FusionKind::none:
      rep_dim = ti_ ? ti_->out_dim() : ts_ ? ts_->out_dim() : text_->out_dim();
      break;
    case FusionKind::early:
      rep_dim = ts_->out_dim();
      break;
    case FusionKind::attention_gate: {
      const bool notes_main = *s.main == MainModality::notes;
      const std::size_t main_dim = notes_main ? text_->out_dim() : ts_->out_dim();
      const std::size_t aux_dim = notes_main ? ts_->out_dim() : text_->out_dim();
      gate_ = GateParams::create(params_, "gate", main_dim, ti_->out_dim(), aux_dim, rng);
      rep_dim = main_dim;
      break;
    }
    case FusionKind::tensor: {
      const bool notes_main = *s.main == MainModality::notes;
      const std::size_t a = notes_main ? text_->out_dim() : ts_->out_dim();
      const std::size_t b = notes_main ? ts_->out_dim() : text_->out_dim();
      tensor_fusion_ = TensorFusion::create(params_, "tensor_fusion", a, b, config_.fusion_width, rng);
      rep_dim = config_.fusion_width;
      break;
    }
    case FusionKind::attention:
      ts_to_fusion_ = Linear::create(params_, "ts_to_fusion", ts_->sequence_dim(), config_.fusion_width, rng);
      text_to_fusion_ = Linear::create(params_, "text_to_fusion", text_->out_dim(), config_.fusion_width, rng);
      cross_attention_ =
          MultiHeadAttention::create(params_, "cross_attention", config_.fusion_width, config_.fusion_heads, rng);
      rep_dim = config_.fusion_width;
      break;
  }
  head_ = PredictionHead::create(params_, "head", rep_dim, config_.task, dims.n_labels, rng);
}

Tensor Model::represent(Forward& f, const SampleBatch& batch) const {
  auto& g = f.g;
  const ModelSpec& s = *spec_;
  switch (s.fusion) {
    case FusionKind::none:
      if (ti_) return (*ti_)(f, batch.ti);
      if (ts_) return (*ts_)(f, batch.ts).encoded;
      return (*text_)(f, batch.notes, batch.note_mask).cls;
    case FusionKind::early:
      return (*ts_)(f, early_fuse(g, batch.ti, batch.ts)).encoded;
    case FusionKind::attention_gate: {
      EncodedTriple triple{(*ti_)(f, batch.ti), (*ts_)(f, batch.ts).encoded,
                           (*text_)(f, batch.notes, batch.note_mask).cls, *s.main};
      return attention_gate(f, triple, *gate_).fused;
    }
    case FusionKind::tensor: {
      const Tensor e_t = (*ts_)(f, early_fuse(g, batch.ti, batch.ts)).encoded;
      const Tensor e_nt = (*text_)(f, batch.notes, batch.note_mask).cls;
      return *s.main == MainModality::notes ? (*tensor_fusion_)(f, e_nt, e_t) : (*tensor_fusion_)(f, e_t, e_nt);
    }
    case FusionKind::attention: {
      const Tensor ts_seq = (*ts_to_fusion_)(f, (*ts_)(f, early_fuse(g, batch.ti, batch.ts)).sequence);
      const Tensor text_seq = (*text_to_fusion_)(f, (*text_)(f, batch.notes, batch.note_mask).sequence);
      if (*s.main == MainModality::notes) {
        return attention_fuse(f, *cross_attention_, text_seq, ts_seq, &batch.note_mask, nullptr);
      }
      return attention_fuse(f, *cross_attention_, ts_seq, text_seq, nullptr, &batch.note_mask);
    }
  }
  throw Error("unreachable fusion kind");
}

Tensor Model::predict(Forward& f, const SampleBatch& batch) const {
  return head_(f, f.dropout(represent(f, batch), config_.dropout));
}

Tensor Model::loss(Forward& f, const SampleBatch& batch, Tensor* predictions) const {
  const Tensor pred = predict(f, batch);
  if (predictions) *predictions = pred.detached();
  return bce_loss(f.g, pred, batch.labels);
}

}  // namespace mfuse
