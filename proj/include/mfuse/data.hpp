#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "mfuse/heads.hpp"
#include "mfuse/tensor.hpp"

namespace mfuse {

inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kDatasetVersion = 1;

struct DatasetHeader {
  int version = kDatasetVersion;
  Task task = Task::binary;
  std::size_t d1 = 0;
  std::size_t l = 0;
  std::size_t d2 = 0;
  std::size_t d3_max = 0;
  std::size_t vocab = 0;
  std::size_t n_labels = 1;
  std::size_t n_samples = 0;
};

struct Sample {
  std::size_t id = 0;
  std::vector<double> ti;     // [D1]
  std::vector<double> ts;     // [L * D2], row-major over time
  std::vector<int> note_ids;  // classification token first
  /// Binary: {0} or {1}. Multilabel: sorted positive label indices.
  std::vector<int> labels;

  bool operator==(const Sample&) const = default;
};

struct Dataset {
  DatasetHeader header;
  std::vector<Sample> samples;
};

struct SignalPlan {
  double ti = 0.0;
  double ts = 1.0;
  double notes = 0.0;
};

struct GeneratorSpec {
  std::uint64_t seed = 0;
  std::size_t n_samples = 1000;
  Task task = Task::binary;
  std::size_t d1 = 8;
  std::size_t l = 12;
  std::size_t d2 = 8;
  std::size_t d3_min = 8;
  std::size_t d3_max = 32;
  std::size_t vocab = 200;
  std::size_t n_labels = 1;
  std::size_t n_factors = 2;
  std::size_t signature_group = 4;  // tokens per (factor, sign) group
  double positive_rate = 0.3;
  double label_sharpness = 8.0;
  double noise = 1.0;
  SignalPlan signal;
};

GeneratorSpec generator_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GeneratorSpec& spec);

/// Synthetic EHR-shaped data. Latent factors z ~ N(0, I) drive the labels
/// through a logistic model whose intercept is calibrated to the target
/// positive rate; each modality sees z at its own signal strength:
/// time-invariant features as a linear mix, time series as per-factor
/// temporal motifs, notes as signature-token groups. Every modality also
/// carries unit-scale distractor noise.
Dataset generate(const GeneratorSpec& spec);

void write_dataset(std::ostream& os, const Dataset& data);
void write_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset(std::istream& is);
Dataset read_dataset(const std::filesystem::path& path);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> valid;
  std::vector<std::size_t> test;
};

/// Sizes for a 7:1.5:1.5 split by largest remainder (ties to the earlier split).
std::array<std::size_t, 3> split_sizes(std::size_t n);
/// Seeded permutation cut into train/valid/test.
SplitIndices split(std::size_t n, std::uint64_t seed);

struct SampleBatch {
  std::vector<std::size_t> ids;
  Tensor ti;        // [B, D1]
  Tensor ts;        // [B, L, D2]
  IdMatrix notes;   // [B, Lmax], padded with kPadId
  Tensor note_mask; // [B, Lmax]
  Tensor labels;    // [B] (binary) or [B, N] (multilabel)

  std::size_t size() const { return ids.size(); }
};

SampleBatch collate(const Dataset& data, std::span<const std::size_t> indices);

/// Batches over `indices` in order, or in a seeded shuffled order. The last
/// partial batch is kept.
std::vector<SampleBatch> make_batches(const Dataset& data, std::span<const std::size_t> indices, std::size_t batch_size,
                                      std::optional<std::uint64_t> shuffle_seed = std::nullopt);

}  // namespace mfuse
