#include "mfuse/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace mfuse {

namespace {

void check_binary_pair(const char* name, std::span<const double> scores, std::span<const double> truth) {
  if (scores.size() != truth.size()) {
    throw ShapeError(std::string(name) + ": " + std::to_string(scores.size()) + " scores vs " +
                     std::to_string(truth.size()) + " labels");
  }
  for (double t : truth) {
    if (t != 0.0 && t != 1.0) throw Error(std::string(name) + ": labels must be 0 or 1");
  }
}

// Indices ordered by descending score, ties by ascending index.
std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

double topk_recall(const Tensor& scores, const Tensor& truth, std::size_t k) {
  if (scores.rank() != 2 || scores.shape() != truth.shape()) {
    throw ShapeError("topk_recall: expected matching [B, N] inputs, got " + to_string(scores.shape()) + " and " +
                     to_string(truth.shape()));
  }
  const std::size_t B = scores.dim(0), N = scores.dim(1);
  if (k < 1) throw Error("topk_recall: k must be >= 1");
  if (k > N) throw Error("topk_recall: k = " + std::to_string(k) + " exceeds the " + std::to_string(N) + " labels");
  double total = 0.0;
  std::size_t counted = 0;
  std::vector<std::size_t> order(N);
  for (std::size_t b = 0; b < B; ++b) {
    const double* s = scores.values().data() + b * N;
    const double* y = truth.values().data() + b * N;
    double positives = 0.0;
    for (std::size_t j = 0; j < N; ++j) positives += y[j] != 0.0 ? 1.0 : 0.0;
    if (positives == 0.0) continue;
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t c) { return s[a] > s[c] || (s[a] == s[c] && a < c); });
    double hits = 0.0;
    for (std::size_t r = 0; r < k; ++r) hits += y[order[r]] != 0.0 ? 1.0 : 0.0;
    total += hits / positives;
    ++counted;
  }
  if (counted == 0) throw Error("topk_recall: no sample has a positive label");
  return total / static_cast<double>(counted);
}

double auroc(std::span<const double> scores, std::span<const double> truth) {
  check_binary_pair("auroc", scores, truth);
  std::size_t n_pos = 0;
  for (double t : truth) n_pos += t == 1.0;
  const std::size_t n_neg = truth.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw Error("auroc: needs both classes, got " + std::to_string(n_pos) + " positives and " + std::to_string(n_neg) +
                " negatives");
  }
  // Ascending sweep; for each positive count negatives strictly below it and
  // half of the negatives tied with it.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double wins = 0.0;
  std::size_t neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t pos_tied = 0, neg_tied = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (truth[order[j]] == 1.0 ? pos_tied : neg_tied)++;
      ++j;
    }
    wins += static_cast<double>(pos_tied) * (static_cast<double>(neg_below) + 0.5 * static_cast<double>(neg_tied));
    neg_below += neg_tied;
    i = j;
  }
  return wins / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double aupr(std::span<const double> scores, std::span<const double> truth) {
  check_binary_pair("aupr", scores, truth);
  std::size_t n_pos = 0;
  for (double t : truth) n_pos += t == 1.0;
  if (n_pos == 0) throw Error("aupr: needs at least one positive");
  const auto order = descending_order(scores);
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (truth[order[r]] == 1.0) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return sum / static_cast<double>(n_pos);
}

MetricsReport make_report(Task task, const Tensor& predictions, const Tensor& labels, double loss) {
  if (predictions.shape() != labels.shape()) {
    throw ShapeError("make_report: predictions " + to_string(predictions.shape()) + " vs labels " +
                     to_string(labels.shape()));
  }
  MetricsReport r;
  r.loss = loss;
  r.n_samples = predictions.dim(0);
  std::size_t n_pos = 0;
  for (double v : labels.values()) n_pos += v == 1.0;
  const bool both = n_pos > 0 && n_pos < labels.numel();
  if (both) {
    r.auroc = auroc(predictions.values(), labels.values());
    r.aupr = aupr(predictions.values(), labels.values());
  }
  for (std::size_t k : kRecallKs) {
    if (task == Task::multilabel && n_pos > 0) {
      r.recall_at[k] = topk_recall(predictions, labels, std::min(k, predictions.dim(1)));
    } else {
      r.recall_at[k] = std::nullopt;
    }
  }
  return r;
}

namespace {
nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }
std::optional<double> opt_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}
}  // namespace

nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["auroc"] = opt(report.auroc);
  j["aupr"] = opt(report.aupr);
  for (std::size_t k : kRecallKs) {
    auto it = report.recall_at.find(k);
    j["recall_at_" + std::to_string(k)] = it == report.recall_at.end() ? nlohmann::json(nullptr) : opt(it->second);
  }
  j["loss"] = report.loss;
  j["n_samples"] = report.n_samples;
  return j;
}

MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.auroc = opt_from(j.at("auroc"));
  r.aupr = opt_from(j.at("aupr"));
  for (std::size_t k : kRecallKs) r.recall_at[k] = opt_from(j.at("recall_at_" + std::to_string(k)));
  r.loss = j.at("loss").get<double>();
  r.n_samples = j.at("n_samples").get<std::size_t>();
  return r;
}

}  // namespace mfuse
