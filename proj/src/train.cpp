#include "mfuse/train.hpp"

#include <cmath>
#include <fstream>

#include "mfuse/checkpoint.hpp"
#include "mfuse/optim.hpp"
#include "mfuse/parallel.hpp"

namespace mfuse {

using nlohmann::json;

json to_json(const EpochRecord& r) {
  json j{{"epoch", r.epoch}, {"train_loss", nullptr}, {"valid", to_json(r.valid)}};
  if (r.train_loss) j["train_loss"] = *r.train_loss;
  return j;
}

double selection_score(Task task, const MetricsReport& report) {
  if (task == Task::binary) {
    if (report.auroc) return *report.auroc;
  } else if (auto it = report.recall_at.find(30); it != report.recall_at.end() && it->second) {
    return *it->second;
  }
  return -report.loss;
}

std::span<const std::size_t> split_part(const SplitIndices& split, const std::string& name) {
  if (name == "train") return split.train;
  if (name == "valid") return split.valid;
  if (name == "test") return split.test;
  throw Error("unknown split '" + name + "' (expected train, valid or test)");
}

Evaluation evaluate(const Model& model, const Dataset& data, std::span<const std::size_t> indices,
                    std::size_t batch_size) {
  if (indices.empty()) throw Error("evaluate: empty split");
  const auto batches = make_batches(data, indices, batch_size);
  std::vector<Tensor> preds(batches.size());
  std::vector<double> losses(batches.size());
  parallel_for(batches.size(), 1, [&](std::size_t begin, std::size_t end) {
    for (std::size_t b = begin; b < end; ++b) {
      Graph g;
      Forward f(g, model.params(), false, Rng(0), false);
      Tensor p;
      losses[b] = model.loss(f, batches[b], &p).item() * static_cast<double>(batches[b].size());
      preds[b] = std::move(p);
    }
  });

  const Task task = model.config().task;
  const std::size_t n = indices.size();
  const std::size_t width = task == Task::binary ? 1 : model.config().data->n_labels;
  std::vector<double> all_preds, all_labels;
  all_preds.reserve(n * width);
  all_labels.reserve(n * width);
  double loss = 0.0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    loss += losses[b];
    all_preds.insert(all_preds.end(), preds[b].values().begin(), preds[b].values().end());
    all_labels.insert(all_labels.end(), batches[b].labels.values().begin(), batches[b].labels.values().end());
  }
  loss /= static_cast<double>(n);
  const Shape shape = task == Task::binary ? Shape{n} : Shape{n, width};
  Tensor pred_tensor(shape, std::move(all_preds));
  const Tensor label_tensor(shape, std::move(all_labels));
  return {make_report(task, pred_tensor, label_tensor, loss), std::move(pred_tensor)};
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw Error("write failed: " + path.string());
}

}  // namespace

TrainResult train(const ModelConfig& raw_config, const Dataset& data, const TrainOptions& options) {
  const ModelConfig config = resolve_config(raw_config, data.header);
  TrainResult result{Model(config), split(data.samples.size(), config.seed), {}, 0, {}};
  Model& model = result.model;
  if (result.split.train.empty() || result.split.valid.empty() || result.split.test.empty()) {
    throw Error("train: dataset of " + std::to_string(data.samples.size()) + " samples is too small to split");
  }
  const std::uint64_t digest = config_digest(config);

  std::ofstream history_file;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    write_text(*options.out_dir / "config.json", to_json(config).dump(2) + "\n");
    history_file.open(*options.out_dir / "history.jsonl");
    if (!history_file) throw Error("cannot open history log in " + options.out_dir->string());
  }
  auto log_epoch = [&](const EpochRecord& r) {
    result.history.push_back(r);
    if (history_file.is_open()) history_file << to_json(r).dump() << '\n' << std::flush;
    if (options.on_epoch) options.on_epoch(r);
  };

  ParamStore best = model.params();
  auto save_best = [&] {
    if (options.out_dir) save_checkpoint(*options.out_dir / "checkpoint.bin", best, digest);
  };

  EpochRecord initial{0, std::nullopt, evaluate(model, data, result.split.valid, config.batch_size).report};
  double best_score = selection_score(config.task, initial.valid);
  log_epoch(initial);
  save_best();

  Adam adam(model.params(), AdamOptions{config.lr});
  const Rng root(config.seed);
  const Rng shuffle_root = root.split(1);
  const Rng dropout_root = root.split(2);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto batches =
        make_batches(data, result.split.train, config.batch_size, shuffle_root.split(epoch).next_u64());
    double loss_sum = 0.0;
    for (const auto& batch : batches) {
      Graph g;
      Forward f(g, model.params(), true, dropout_root.split(step));
      const Tensor loss = model.loss(f, batch);
      if (!std::isfinite(loss.item())) {
        save_best();
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(step) + " (loss " + std::to_string(loss.item()) + ")",
                               epoch, step);
      }
      loss_sum += loss.item() * static_cast<double>(batch.size());
      std::vector<Tensor> grads = f.parameter_gradients(g.backward(loss));
      clip_global_norm(grads, config.grad_clip);
      adam.step(model.params(), grads);
      ++step;
    }
    EpochRecord record{epoch, loss_sum / static_cast<double>(result.split.train.size()),
                       evaluate(model, data, result.split.valid, config.batch_size).report};
    const double score = selection_score(config.task, record.valid);
    if (score > best_score) {
      best_score = score;
      best = model.params();
      result.best_epoch = epoch;
      save_best();
    }
    log_epoch(record);
    if (options.stop_after && options.stop_after(record)) break;
  }

  model.params() = best;
  result.test = evaluate(model, data, result.split.test, config.batch_size).report;
  if (options.out_dir) write_text(*options.out_dir / "test_metrics.json", to_json(result.test).dump(2) + "\n");
  return result;
}

}  // namespace mfuse
