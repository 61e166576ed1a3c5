#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "mfuse/data.hpp"
#include "mfuse/metrics.hpp"
#include "mfuse/model.hpp"

namespace mfuse {

/// Raised when a training loss turns non-finite. If the run has an output
/// directory, the best checkpoint so far has already been written.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, std::size_t epoch, std::size_t step)
      : Error(what), epoch(epoch), step(step) {}
  std::size_t epoch;
  std::size_t step;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::optional<double> train_loss;  // empty for the pre-training record
  MetricsReport valid;
};

nlohmann::json to_json(const EpochRecord& r);

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;
  /// Called after every epoch record, including epoch 0.
  std::function<void(const EpochRecord&)> on_epoch;
  /// Checked after each training epoch; returning true ends the run early.
  /// Selection and the test evaluation still happen.
  std::function<bool(const EpochRecord&)> stop_after;
};

struct TrainResult {
  Model model;  // best-on-validation weights
  SplitIndices split;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  MetricsReport test;
};

/// Model-selection score: validation AUROC (binary) or Recall@30
/// (multilabel), or minus the loss when that metric is undefined.
double selection_score(Task task, const MetricsReport& report);

/// Trains `config` on `data`. Epoch 0 is an evaluation of the initial
/// weights; epochs 1..config.epochs each make one shuffled pass over the
/// training split. The weights with the strictly best validation score are
/// kept. With an output directory, writes checkpoint.bin, history.jsonl,
/// config.json and test_metrics.json there.
TrainResult train(const ModelConfig& config, const Dataset& data, const TrainOptions& options = {});

struct Evaluation {
  MetricsReport report;
  Tensor predictions;
};

/// Eval-mode pass over `indices` in order. Batches may be evaluated on
/// worker threads; results are combined in index order.
Evaluation evaluate(const Model& model, const Dataset& data, std::span<const std::size_t> indices,
                    std::size_t batch_size);

std::span<const std::size_t> split_part(const SplitIndices& split, const std::string& name);

}  // namespace mfuse
