#pragma once

#include <map>
#include <optional>
#include <span>

#include "json.hpp"

#include "mfuse/heads.hpp"
#include "mfuse/tensor.hpp"

namespace mfuse {

/// Mean over samples with at least one positive of
/// |top-k(scores) & positives| / |positives|. Ties go to the lower index.
double topk_recall(const Tensor& scores, const Tensor& truth, std::size_t k);

/// Mann-Whitney AUROC: ties between a positive and a negative count 1/2.
double auroc(std::span<const double> scores, std::span<const double> truth);

/// Average precision over a descending ranking (ties: lower index first).
double aupr(std::span<const double> scores, std::span<const double> truth);

struct MetricsReport {
  std::optional<double> auroc;
  std::optional<double> aupr;
  std::map<std::size_t, std::optional<double>> recall_at;  // k -> recall
  double loss = 0.0;
  std::size_t n_samples = 0;
};

inline constexpr std::size_t kRecallKs[] = {10, 20, 30};

/// Builds a report from predictions and labels of one split. Binary: AUROC
/// and AUPR over samples. Multilabel: Recall@k for k in {10, 20, 30}
/// (k capped at N) plus micro AUROC/AUPR over all (sample, label) cells.
/// Metrics that are undefined for the data (one class only) are empty.
MetricsReport make_report(Task task, const Tensor& predictions, const Tensor& labels, double loss);

nlohmann::json to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);

}  // namespace mfuse
