#include "mfuse/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "mfuse/rng.hpp"

namespace mfuse {

namespace {

using nlohmann::json;

Task parse_task(const std::string& s) {
  if (s == "binary") return Task::binary;
  if (s == "multilabel") return Task::multilabel;
  throw Error("unknown task '" + s + "' (expected binary or multilabel)");
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Intercept c with E[sigmoid(a*u + c)] = rate for u ~ N(0, 1).
double calibrate_intercept(double sharpness, double rate) {
  constexpr int kNodes = 4001;
  std::vector<double> xs(kNodes), ws(kNodes);
  double wsum = 0.0;
  for (int i = 0; i < kNodes; ++i) {
    xs[i] = -8.0 + 16.0 * i / (kNodes - 1);
    ws[i] = std::exp(-0.5 * xs[i] * xs[i]);
    wsum += ws[i];
  }
  auto mean_rate = [&](double c) {
    double m = 0.0;
    for (int i = 0; i < kNodes; ++i) m += ws[i] * sigmoid(sharpness * xs[i] + c);
    return m / wsum;
  };
  double lo = -100.0, hi = 100.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (mean_rate(mid) < rate ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

void unit_normalize(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0) {
    for (double& x : v) x /= n;
  }
}

void validate(const GeneratorSpec& s) {
  auto fail = [](const std::string& why) { throw Error("generator spec: " + why); };
  if (s.n_samples == 0) fail("n_samples must be positive");
  if (s.d1 == 0 || s.l == 0 || s.d2 == 0) fail("d1, l and d2 must be positive");
  if (s.d3_min == 0 || s.d3_max < s.d3_min) fail("need 1 <= d3_min <= d3_max");
  if (s.n_factors == 0 || s.signature_group == 0) fail("n_factors and signature_group must be positive");
  const std::size_t reserved = 2 + 2 * s.n_factors * s.signature_group;
  if (s.vocab <= reserved) {
    fail("vocab " + std::to_string(s.vocab) + " leaves no filler tokens; need more than " + std::to_string(reserved));
  }
  if (s.task == Task::binary && s.n_labels != 1) fail("binary task uses n_labels = 1");
  if (s.task == Task::multilabel && s.n_labels < 1) fail("multilabel task needs n_labels >= 1");
  if (!(s.positive_rate > 0.0 && s.positive_rate < 1.0)) fail("positive_rate must lie in (0, 1)");
  for (double v : {s.signal.ti, s.signal.ts, s.signal.notes}) {
    if (!(v >= 0.0 && v <= 1.0)) fail("signal strengths must lie in [0, 1]");
  }
  if (!(s.noise >= 0.0) || !(s.label_sharpness >= 0.0)) fail("noise and label_sharpness must be non-negative");
}

}  // namespace

GeneratorSpec generator_spec_from_json(const json& j) {
  GeneratorSpec s;
  s.seed = j.value("seed", s.seed);
  s.n_samples = j.value("n_samples", s.n_samples);
  if (j.contains("task")) s.task = parse_task(j.at("task").get<std::string>());
  s.d1 = j.value("d1", s.d1);
  s.l = j.value("l", s.l);
  s.d2 = j.value("d2", s.d2);
  s.d3_min = j.value("d3_min", s.d3_min);
  s.d3_max = j.value("d3_max", s.d3_max);
  s.vocab = j.value("vocab", s.vocab);
  s.n_labels = j.value("n_labels", s.task == Task::binary ? std::size_t{1} : std::size_t{32});
  s.n_factors = j.value("n_factors", s.n_factors);
  s.signature_group = j.value("signature_group", s.signature_group);
  s.positive_rate = j.value("positive_rate", s.positive_rate);
  s.label_sharpness = j.value("label_sharpness", s.label_sharpness);
  s.noise = j.value("noise", s.noise);
  if (j.contains("signal")) {
    const auto& sig = j.at("signal");
    s.signal.ti = sig.value("ti", 0.0);
    s.signal.ts = sig.value("ts", 0.0);
    s.signal.notes = sig.value("notes", 0.0);
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    static const char* known[] = {"seed",    "n_samples",       "task",          "d1",        "l",
                                  "d2",      "d3_min",          "d3_max",        "vocab",     "n_labels",
                                  "n_factors", "signature_group", "positive_rate", "label_sharpness", "noise",
                                  "signal"};
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return it.key() == k; }) ==
        std::end(known)) {
      throw Error("generator spec: unknown key '" + it.key() + "'");
    }
  }
  validate(s);
  return s;
}

json to_json(const GeneratorSpec& s) {
  return json{{"seed", s.seed},
              {"n_samples", s.n_samples},
              {"task", to_string(s.task)},
              {"d1", s.d1},
              {"l", s.l},
              {"d2", s.d2},
              {"d3_min", s.d3_min},
              {"d3_max", s.d3_max},
              {"vocab", s.vocab},
              {"n_labels", s.n_labels},
              {"n_factors", s.n_factors},
              {"signature_group", s.signature_group},
              {"positive_rate", s.positive_rate},
              {"label_sharpness", s.label_sharpness},
              {"noise", s.noise},
              {"signal", {{"ti", s.signal.ti}, {"ts", s.signal.ts}, {"notes", s.signal.notes}}}};
}

Dataset generate(const GeneratorSpec& spec) {
  validate(spec);
  const std::size_t K = spec.n_factors;
  const std::size_t G = spec.signature_group;
  const int first_filler = static_cast<int>(2 + 2 * K * G);
  const Rng root(spec.seed);

  // Structure shared by all samples.
  Rng structure = root.split(1);
  const double mix_scale = 1.0 / std::sqrt(static_cast<double>(K));
  std::vector<double> ti_mix(spec.d1 * K);
  for (double& v : ti_mix) v = structure.normal() * mix_scale;
  std::vector<double> loadings(K * spec.d2);
  for (double& v : loadings) v = structure.normal() * mix_scale;
  std::vector<double> freq(K), phase(K);
  for (std::size_t k = 0; k < K; ++k) {
    freq[k] = static_cast<double>(1 + k % 3);
    phase[k] = structure.uniform(0.0, 2.0 * std::numbers::pi);
  }
  const std::size_t n_heads = spec.task == Task::binary ? 1 : spec.n_labels;
  std::vector<std::vector<double>> label_weights(n_heads, std::vector<double>(K));
  for (auto& w : label_weights) {
    for (double& v : w) v = structure.normal();
    unit_normalize(w);
  }
  const double intercept = calibrate_intercept(spec.label_sharpness, spec.positive_rate);

  Dataset data;
  data.header = DatasetHeader{kDatasetVersion, spec.task, spec.d1, spec.l, spec.d2, spec.d3_max, spec.vocab,
                              spec.n_labels, spec.n_samples};
  data.samples.reserve(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    Rng r = root.split(1000 + i);
    Sample s;
    s.id = i;
    std::vector<double> z(K);
    for (double& v : z) v = r.normal();

    s.ti.resize(spec.d1);
    for (std::size_t d = 0; d < spec.d1; ++d) {
      double signal = 0.0;
      for (std::size_t k = 0; k < K; ++k) signal += ti_mix[d * K + k] * z[k];
      s.ti[d] = spec.signal.ti * signal + spec.noise * r.normal();
    }

    s.ts.resize(spec.l * spec.d2);
    for (std::size_t t = 0; t < spec.l; ++t) {
      for (std::size_t d = 0; d < spec.d2; ++d) {
        double signal = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          const double wave = std::sin(2.0 * std::numbers::pi * freq[k] * (static_cast<double>(t) + 0.5) /
                                           static_cast<double>(spec.l) +
                                       phase[k]);
          signal += z[k] * loadings[k * spec.d2 + d] * wave;
        }
        s.ts[t * spec.d2 + d] = spec.signal.ts * signal + spec.noise * r.normal();
      }
    }

    const std::size_t len = spec.d3_min + r.below(spec.d3_max - spec.d3_min + 1);
    double weight_total = 0.0;
    for (double v : z) weight_total += std::abs(v);
    s.note_ids.reserve(len);
    s.note_ids.push_back(kClsId);
    for (std::size_t p = 1; p < len; ++p) {
      if (r.uniform() < 0.5 * spec.signal.notes && weight_total > 0.0) {
        double pick = r.uniform() * weight_total;
        std::size_t k = 0;
        while (k + 1 < K && pick >= std::abs(z[k])) {
          pick -= std::abs(z[k]);
          ++k;
        }
        const std::size_t group = 2 * k + (z[k] >= 0.0 ? 0 : 1);
        s.note_ids.push_back(static_cast<int>(2 + group * G + r.below(G)));
      } else {
        s.note_ids.push_back(first_filler + static_cast<int>(r.below(spec.vocab - static_cast<std::size_t>(first_filler))));
      }
    }

    for (std::size_t h = 0; h < n_heads; ++h) {
      double u = 0.0;
      for (std::size_t k = 0; k < K; ++k) u += label_weights[h][k] * z[k];
      const bool positive = r.bernoulli(sigmoid(spec.label_sharpness * u + intercept));
      if (spec.task == Task::binary) {
        s.labels.push_back(positive ? 1 : 0);
      } else if (positive) {
        s.labels.push_back(static_cast<int>(h));
      }
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

namespace {

json header_json(const DatasetHeader& h) {
  return json{{"version", h.version}, {"task", to_string(h.task)}, {"d1", h.d1},
              {"l", h.l},             {"d2", h.d2},                 {"d3_max", h.d3_max},
              {"vocab", h.vocab},     {"n_labels", h.n_labels},     {"n_samples", h.n_samples}};
}

void validate_sample(const DatasetHeader& h, const Sample& s, std::size_t line) {
  auto fail = [&](const std::string& why) {
    throw Error("dataset line " + std::to_string(line) + " (sample " + std::to_string(s.id) + "): " + why);
  };
  if (s.ti.size() != h.d1) fail("ti has " + std::to_string(s.ti.size()) + " values, expected " + std::to_string(h.d1));
  if (s.ts.size() != h.l * h.d2) fail("ts does not match l x d2");
  for (double v : s.ts) {
    if (!std::isfinite(v)) fail("ts contains a non-finite value");
  }
  for (double v : s.ti) {
    if (!std::isfinite(v)) fail("ti contains a non-finite value");
  }
  if (s.note_ids.empty() || s.note_ids.size() > h.d3_max) fail("note length outside [1, d3_max]");
  if (s.note_ids.front() != kClsId) fail("notes must start with the classification token");
  for (int id : s.note_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= h.vocab) fail("token id " + std::to_string(id) + " outside vocab");
  }
  if (h.task == Task::binary) {
    if (s.labels.size() != 1 || (s.labels[0] != 0 && s.labels[0] != 1)) fail("binary label must be [0] or [1]");
  } else {
    for (std::size_t i = 0; i < s.labels.size(); ++i) {
      if (s.labels[i] < 0 || static_cast<std::size_t>(s.labels[i]) >= h.n_labels) fail("label index out of range");
      if (i > 0 && s.labels[i] <= s.labels[i - 1]) fail("label indices must be strictly increasing");
    }
  }
}

}  // namespace

void write_dataset(std::ostream& os, const Dataset& data) {
  os << header_json(data.header).dump() << '\n';
  for (const Sample& s : data.samples) {
    json ts = json::array();
    for (std::size_t t = 0; t < data.header.l; ++t) {
      ts.push_back(std::vector<double>(s.ts.begin() + static_cast<std::ptrdiff_t>(t * data.header.d2),
                                       s.ts.begin() + static_cast<std::ptrdiff_t>((t + 1) * data.header.d2)));
    }
    const json line{{"id", s.id}, {"ti", s.ti}, {"ts", ts}, {"note_ids", s.note_ids}, {"labels", s.labels}};
    os << line.dump() << '\n';
  }
}

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_dataset(os, data);
  if (!os) throw Error("failed writing " + path.string());
}

Dataset read_dataset(std::istream& is) {
  Dataset data;
  std::string line;
  if (!std::getline(is, line)) throw Error("dataset: missing header line");
  try {
    const json h = json::parse(line);
    auto& hd = data.header;
    hd.version = h.at("version").get<int>();
    if (hd.version != kDatasetVersion) throw Error("dataset: unsupported version " + std::to_string(hd.version));
    hd.task = parse_task(h.at("task").get<std::string>());
    hd.d1 = h.at("d1").get<std::size_t>();
    hd.l = h.at("l").get<std::size_t>();
    hd.d2 = h.at("d2").get<std::size_t>();
    hd.d3_max = h.at("d3_max").get<std::size_t>();
    hd.vocab = h.at("vocab").get<std::size_t>();
    hd.n_labels = h.at("n_labels").get<std::size_t>();
    hd.n_samples = h.at("n_samples").get<std::size_t>();
  } catch (const json::exception& e) {
    throw Error(std::string("dataset header: ") + e.what());
  }
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    Sample s;
    try {
      const json j = json::parse(line);
      s.id = j.at("id").get<std::size_t>();
      s.ti = j.at("ti").get<std::vector<double>>();
      for (const auto& row : j.at("ts")) {
        if (row.size() != data.header.d2) throw Error("ts row width does not match d2");
        for (const auto& v : row) s.ts.push_back(v.get<double>());
      }
      s.note_ids = j.at("note_ids").get<std::vector<int>>();
      s.labels = j.at("labels").get<std::vector<int>>();
    } catch (const json::exception& e) {
      throw Error("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
    validate_sample(data.header, s, line_no);
    data.samples.push_back(std::move(s));
  }
  if (data.samples.size() != data.header.n_samples) {
    throw Error("dataset: header announces " + std::to_string(data.header.n_samples) + " samples, found " +
                std::to_string(data.samples.size()));
  }
  return data;
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open dataset " + path.string());
  return read_dataset(is);
}

std::array<std::size_t, 3> split_sizes(std::size_t n) {
  // 7 : 1.5 : 1.5 == 14 : 3 : 3 out of 20.
  constexpr std::array<std::size_t, 3> parts = {14, 3, 3};
  std::array<std::size_t, 3> sizes{};
  std::array<std::size_t, 3> remainders{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    sizes[i] = n * parts[i] / 20;
    remainders[i] = n * parts[i] % 20;
    assigned += sizes[i];
  }
  std::array<std::size_t, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainders[a] > remainders[b]; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) sizes[order[i]]++;
  return sizes;
}

SplitIndices split(std::size_t n, std::uint64_t seed) {
  if (n < 3) throw Error("split: need at least 3 samples, got " + std::to_string(n));
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = Rng(seed).split(0x5b11f);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  const auto sizes = split_sizes(n);
  SplitIndices out;
  const auto b = perm.begin();
  out.train.assign(b, b + static_cast<std::ptrdiff_t>(sizes[0]));
  out.valid.assign(b + static_cast<std::ptrdiff_t>(sizes[0]), b + static_cast<std::ptrdiff_t>(sizes[0] + sizes[1]));
  out.test.assign(b + static_cast<std::ptrdiff_t>(sizes[0] + sizes[1]), perm.end());
  return out;
}

SampleBatch collate(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error("collate: empty batch");
  const auto& h = data.header;
  const std::size_t B = indices.size();
  SampleBatch batch;
  batch.ids.assign(indices.begin(), indices.end());
  std::size_t max_len = 1;
  for (std::size_t idx : indices) max_len = std::max(max_len, data.samples.at(idx).note_ids.size());
  batch.ti = Tensor({B, h.d1});
  batch.ts = Tensor({B, h.l, h.d2});
  batch.notes = IdMatrix{B, max_len, std::vector<int>(B * max_len, kPadId)};
  batch.note_mask = Tensor({B, max_len});
  batch.labels = h.task == Task::binary ? Tensor({B}) : Tensor({B, h.n_labels});
  for (std::size_t b = 0; b < B; ++b) {
    const Sample& s = data.samples.at(indices[b]);
    std::copy(s.ti.begin(), s.ti.end(), batch.ti.values().begin() + static_cast<std::ptrdiff_t>(b * h.d1));
    std::copy(s.ts.begin(), s.ts.end(), batch.ts.values().begin() + static_cast<std::ptrdiff_t>(b * h.l * h.d2));
    for (std::size_t p = 0; p < s.note_ids.size(); ++p) {
      batch.notes.ids[b * max_len + p] = s.note_ids[p];
      batch.note_mask[b * max_len + p] = 1.0;
    }
    if (h.task == Task::binary) {
      batch.labels[b] = static_cast<double>(s.labels.at(0));
    } else {
      for (int lbl : s.labels) batch.labels[b * h.n_labels + static_cast<std::size_t>(lbl)] = 1.0;
    }
  }
  return batch;
}

std::vector<SampleBatch> make_batches(const Dataset& data, std::span<const std::size_t> indices, std::size_t batch_size,
                                      std::optional<std::uint64_t> shuffle_seed) {
  if (batch_size == 0) throw Error("make_batches: batch size must be >= 1");
  std::vector<std::size_t> order(indices.begin(), indices.end());
  if (shuffle_seed) {
    Rng rng = Rng(*shuffle_seed).split(0xba7c4);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<SampleBatch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    batches.push_back(collate(data, std::span(order).subspan(start, end - start)));
  }
  return batches;
}

}  // namespace mfuse
