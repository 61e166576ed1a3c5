#include <algorithm>
#include <set>
#include <sstream>

#include "doctest.h"

#include "mfuse/data.hpp"

using namespace mfuse;

namespace {

GeneratorSpec small_spec(Task task = Task::binary) {
  GeneratorSpec s;
  s.seed = 11;
  s.n_samples = 40;
  s.task = task;
  s.n_labels = task == Task::binary ? 1 : 12;
  s.d1 = 3;
  s.l = 4;
  s.d2 = 2;
  s.d3_min = 3;
  s.d3_max = 9;
  s.vocab = 40;
  s.signal = {0.3, 1.0, 0.6};
  return s;
}

std::string serialize(const Dataset& d) {
  std::ostringstream os;
  write_dataset(os, d);
  return os.str();
}

}  // namespace

TEST_CASE("generation is deterministic and respects the sample contract") {
  for (Task task : {Task::binary, Task::multilabel}) {
    const GeneratorSpec spec = small_spec(task);
    const Dataset a = generate(spec), b = generate(spec);
    CHECK(serialize(a) == serialize(b));
    CHECK(a.header.n_samples == 40);
    for (const Sample& s : a.samples) {
      CHECK(s.ti.size() == 3);
      CHECK(s.ts.size() == 8);
      REQUIRE_FALSE(s.note_ids.empty());
      CHECK(s.note_ids.front() == kClsId);
      CHECK(s.note_ids.size() >= 3);
      CHECK(s.note_ids.size() <= 9);
      for (std::size_t i = 1; i < s.note_ids.size(); ++i) {
        CHECK(s.note_ids[i] > kClsId);
        CHECK(s.note_ids[i] < 40);
      }
      if (task == Task::binary) {
        REQUIRE(s.labels.size() == 1);
        CHECK((s.labels[0] == 0 || s.labels[0] == 1));
      } else {
        CHECK(std::is_sorted(s.labels.begin(), s.labels.end()));
      }
    }
  }
  GeneratorSpec other = small_spec();
  other.seed = 12;
  CHECK(serialize(generate(other)) != serialize(generate(small_spec())));
}

TEST_CASE("positive rate is calibrated") {
  GeneratorSpec s;
  s.seed = 5;
  s.n_samples = 10000;
  s.l = 2;
  s.d2 = 2;
  s.d3_max = 8;
  for (double target : {0.1, 0.3, 0.5}) {
    s.positive_rate = target;
    const Dataset d = generate(s);
    double pos = 0.0;
    for (const Sample& x : d.samples) pos += x.labels[0];
    CHECK(std::abs(pos / 10000.0 - target) <= 0.03);
  }
}

TEST_CASE("dataset files round-trip bit-exactly") {
  const Dataset d = generate(small_spec(Task::multilabel));
  std::stringstream ss;
  write_dataset(ss, d);
  const Dataset back = read_dataset(ss);
  CHECK(back.samples == d.samples);
  CHECK(back.header.vocab == d.header.vocab);
  CHECK(back.header.task == Task::multilabel);
  CHECK(serialize(back) == serialize(d));
}

TEST_CASE("reading rejects malformed files") {
  const Dataset d = generate(small_spec());
  const std::string text = serialize(d);
  const std::string header = text.substr(0, text.find('\n') + 1);
  auto read = [](const std::string& s) {
    std::istringstream is(s);
    return read_dataset(is);
  };
  CHECK_THROWS(read(""));
  CHECK_THROWS(read(header));  // announced samples missing
  CHECK_THROWS(read("{\"version\": 99}\n"));
  std::string bad_token = text;
  const auto pos = bad_token.find("\"note_ids\":[1,");
  REQUIRE(pos != std::string::npos);
  bad_token.replace(pos, 14, "\"note_ids\":[1,999,");
  CHECK_THROWS(read(bad_token));
}

TEST_CASE("generator spec validation") {
  CHECK_THROWS(generator_spec_from_json({{"d1", 0}}));
  CHECK_THROWS(generator_spec_from_json({{"vocab", 5}}));
  CHECK_THROWS(generator_spec_from_json({{"signal", {{"ts", 1.5}}}}));
  CHECK_THROWS(generator_spec_from_json({{"colour", "red"}}));
  CHECK_THROWS(generator_spec_from_json({{"task", "regression"}}));
  const GeneratorSpec ml = generator_spec_from_json({{"task", "multilabel"}});
  CHECK(ml.n_labels == 32);
  const GeneratorSpec round = generator_spec_from_json(to_json(small_spec()));
  CHECK(to_json(round) == to_json(small_spec()));
}

TEST_CASE("splits") {
  CHECK(split_sizes(1000) == std::array<std::size_t, 3>{700, 150, 150});
  CHECK(split_sizes(10) == std::array<std::size_t, 3>{7, 2, 1});
  CHECK(split_sizes(92)[0] == 64);
  for (std::size_t n : {3u, 7u, 10u, 33u, 101u}) {
    const auto sz = split_sizes(n);
    CHECK(sz[0] + sz[1] + sz[2] == n);
    CHECK(std::abs(static_cast<double>(sz[0]) - 0.7 * n) <= 1.0);
    CHECK(std::abs(static_cast<double>(sz[1]) - 0.15 * n) <= 1.0);
  }
  const SplitIndices a = split(50, 9), b = split(50, 9);
  CHECK(a.train == b.train);
  CHECK(a.test == b.test);
  std::set<std::size_t> all(a.train.begin(), a.train.end());
  all.insert(a.valid.begin(), a.valid.end());
  all.insert(a.test.begin(), a.test.end());
  CHECK(all.size() == 50);
  CHECK(*all.rbegin() == 49);
  CHECK(split(50, 10).train != a.train);
  CHECK_THROWS(split(2, 0));
}

TEST_CASE("batching") {
  Dataset d = generate(small_spec());
  d.samples.resize(10);
  d.header.n_samples = 10;
  std::vector<std::size_t> idx(10);
  for (std::size_t i = 0; i < 10; ++i) idx[i] = i;

  const auto batches = make_batches(d, idx, 4);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size() == 4);
  CHECK(batches[1].size() == 4);
  CHECK(batches[2].size() == 2);
  CHECK(batches[0].ids == std::vector<std::size_t>{0, 1, 2, 3});

  const SampleBatch& b = batches[1];
  CHECK(b.ti.shape() == Shape{4, 3});
  CHECK(b.ts.shape() == Shape{4, 4, 2});
  CHECK(b.labels.shape() == Shape{4});
  std::size_t longest = 0;
  for (std::size_t r = 0; r < 4; ++r) longest = std::max(longest, d.samples[4 + r].note_ids.size());
  CHECK(b.notes.cols == longest);
  for (std::size_t r = 0; r < 4; ++r) {
    const auto& ids = d.samples[4 + r].note_ids;
    for (std::size_t c = 0; c < longest; ++c) {
      if (c < ids.size()) {
        CHECK(b.notes(r, c) == ids[c]);
        CHECK(b.note_mask.at({r, c}) == 1.0);
      } else {
        CHECK(b.notes(r, c) == kPadId);
        CHECK(b.note_mask.at({r, c}) == 0.0);
      }
    }
  }

  const auto shuffled = make_batches(d, idx, 4, 3);
  std::vector<std::size_t> seen;
  for (const auto& s : shuffled) seen.insert(seen.end(), s.ids.begin(), s.ids.end());
  CHECK(seen != std::vector<std::size_t>(idx.begin(), idx.end()));
  std::sort(seen.begin(), seen.end());
  CHECK(seen == std::vector<std::size_t>(idx.begin(), idx.end()));
  CHECK_THROWS(make_batches(d, idx, 0));

  const Dataset ml = generate(small_spec(Task::multilabel));
  const std::vector<std::size_t> first = {0, 1};
  const SampleBatch mb = collate(ml, first);
  CHECK(mb.labels.shape() == Shape{2, 12});
  for (int label : ml.samples[0].labels) CHECK(mb.labels.at({0, static_cast<std::size_t>(label)}) == 1.0);
}
