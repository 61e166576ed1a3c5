#include "mfuse/gradcheck_suite.hpp"

#include <chrono>
#include <cmath>
#include <memory>

#include "mfuse/data.hpp"
#include "mfuse/model.hpp"

namespace mfuse {

namespace {

Tensor random_tensor(Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal();
  return t;
}

// Normal draws pushed at least `margin` away from `kink`.
Tensor away_from(Rng& rng, Shape shape, double kink, double margin = 0.05) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) {
    const double x = rng.normal();
    v = kink + (x >= 0.0 ? x + margin : x - margin);
  }
  return t;
}

// sum(out * w) for a fixed random w, so every output entry matters.
Tensor readout(Graph& g, const Tensor& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  return g.sum(g.mul(out, random_tensor(rng, out.shape())));
}

struct Case {
  std::string name;
  GraphBuilder builder;
  std::vector<Tensor> inputs;
};

std::vector<Case> primitive_cases() {
  Rng rng(2024);
  std::vector<Case> cases;
  auto add = [&](std::string name, std::vector<Tensor> inputs, GraphBuilder f) {
    cases.push_back({std::move(name), std::move(f), std::move(inputs)});
  };
  using In = std::span<const Tensor>;

  add("matmul", {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 2})},
      [](Graph& g, In x) { return readout(g, g.matmul(x[0], x[1])); });
  add("matmul_batched", {random_tensor(rng, {2, 3, 4}), random_tensor(rng, {2, 4, 3})},
      [](Graph& g, In x) { return readout(g, g.matmul(x[0], x[1])); });
  add("matmul_transpose_b", {random_tensor(rng, {2, 3, 4}), random_tensor(rng, {2, 5, 4})},
      [](Graph& g, In x) { return readout(g, g.matmul(x[0], x[1], true)); });
  add("matmul_chain", {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 2}), random_tensor(rng, {2, 3})},
      [](Graph& g, In x) { return readout(g, g.matmul(g.matmul(x[0], x[1]), x[2])); });
  add("add", {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})},
      [](Graph& g, In x) { return readout(g, g.add(x[0], x[1])); });
  add("add_suffix", {random_tensor(rng, {2, 3, 4}), random_tensor(rng, {4})},
      [](Graph& g, In x) { return readout(g, g.add(x[0], x[1])); });
  add("add_row_scalar", {random_tensor(rng, {2, 1}), random_tensor(rng, {2, 5})},
      [](Graph& g, In x) { return readout(g, g.add(x[0], x[1])); });
  add("mul", {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})},
      [](Graph& g, In x) { return readout(g, g.mul(x[0], x[1])); });
  add("mul_suffix", {random_tensor(rng, {3}), random_tensor(rng, {2, 3})},
      [](Graph& g, In x) { return readout(g, g.mul(x[0], x[1])); });
  add("mul_row_scalar", {random_tensor(rng, {2, 4, 3}), random_tensor(rng, {2, 4, 1})},
      [](Graph& g, In x) { return readout(g, g.mul(x[0], x[1])); });
  add("concat", {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 2}), random_tensor(rng, {2, 1})},
      [](Graph& g, In x) { return readout(g, g.concat(x)); });
  add("relu", {away_from(rng, {3, 4}, 0.0)}, [](Graph& g, In x) { return readout(g, g.relu(x[0])); });
  add("sigmoid", {random_tensor(rng, {3, 4})}, [](Graph& g, In x) { return readout(g, g.sigmoid(x[0])); });
  add("tanh", {random_tensor(rng, {3, 4})}, [](Graph& g, In x) { return readout(g, g.tanh(x[0])); });
  add("softmax", {random_tensor(rng, {2, 3, 4})}, [](Graph& g, In x) { return readout(g, g.softmax(x[0])); });
  add("softmax_masked", {random_tensor(rng, {2, 3, 4})}, [](Graph& g, In x) {
    const Tensor mask({2, 4}, {1, 1, 0, 1, 1, 0, 0, 1});
    return readout(g, g.softmax(x[0], &mask));
  });
  {
    Tensor pos = random_tensor(rng, {3, 3});
    for (double& v : pos.values()) v = 0.2 + std::abs(v);
    add("log", {pos}, [](Graph& g, In x) { return readout(g, g.log(x[0])); });
  }
  add("exp", {random_tensor(rng, {3, 3})}, [](Graph& g, In x) { return readout(g, g.exp(x[0])); });
  add("l2_norm", {random_tensor(rng, {3, 4})}, [](Graph& g, In x) { return g.scale(g.l2_norm(x[0]), 1.7); });
  add("l2_norm_rows", {random_tensor(rng, {2, 3, 4})}, [](Graph& g, In x) { return readout(g, g.l2_norm_rows(x[0])); });
  add("reciprocal", {away_from(rng, {3, 3}, 0.0, 0.5)}, [](Graph& g, In x) { return readout(g, g.reciprocal(x[0])); });
  add("scalar_min", {away_from(rng, {3, 4}, 0.3)}, [](Graph& g, In x) { return readout(g, g.scalar_min(x[0], 0.3)); });
  add("scale", {random_tensor(rng, {3, 2})}, [](Graph& g, In x) { return readout(g, g.scale(x[0], -2.5)); });
  add("slice", {random_tensor(rng, {2, 5, 3})}, [](Graph& g, In x) { return readout(g, g.slice(x[0], 1, 1, 3)); });
  add("slice_last_axis", {random_tensor(rng, {2, 5})}, [](Graph& g, In x) { return readout(g, g.slice(x[0], -1, 2, 2)); });
  add("reshape", {random_tensor(rng, {2, 6})}, [](Graph& g, In x) { return readout(g, g.reshape(x[0], {3, 4})); });
  add("mean", {random_tensor(rng, {2, 3, 4})}, [](Graph& g, In x) { return readout(g, g.mean(x[0], 1)); });
  {
    // Distinct values spaced 0.1 apart, shuffled, so max has no near ties.
    Tensor t({2, 5, 3});
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.1 * static_cast<double>(i);
    for (std::size_t i = t.numel() - 1; i > 0; --i) std::swap(t[i], t[rng.below(i + 1)]);
    add("max", {t}, [](Graph& g, In x) { return readout(g, g.max(x[0], 1)); });
  }
  add("last", {random_tensor(rng, {2, 4, 3})}, [](Graph& g, In x) { return readout(g, g.last(x[0], 1)); });
  add("outer", {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 4})},
      [](Graph& g, In x) { return readout(g, g.outer(x[0], x[1])); });
  add("embedding", {random_tensor(rng, {6, 3})}, [](Graph& g, In x) {
    const IdMatrix ids{2, 4, {1, 0, 5, 1, 3, 3, 2, 4}};
    return readout(g, g.embedding(x[0], ids));
  });
  add("layer_norm", {random_tensor(rng, {2, 3, 5}), random_tensor(rng, {5}), random_tensor(rng, {5})},
      [](Graph& g, In x) { return readout(g, g.layer_norm(x[0], x[1], x[2])); });
  add("dropout", {random_tensor(rng, {4, 5})}, [](Graph& g, In x) {
    Rng mask_rng(5);
    return readout(g, g.dropout(x[0], 0.3, mask_rng, true));
  });
  add("conv1d", {random_tensor(rng, {2, 5, 3}), random_tensor(rng, {3, 3, 2}), random_tensor(rng, {2})},
      [](Graph& g, In x) { return readout(g, g.conv1d(x[0], x[1], x[2])); });
  add("sum", {random_tensor(rng, {3, 4})}, [](Graph& g, In x) { return g.sum(g.tanh(x[0])); });
  return cases;
}

const char* const kSuiteModels[] = {"Lstm", "F-Cnn", "LstmBert", "BertStar", "BertEncoder[TF]", "StarBert[AT]"};

ModelConfig toy_config(const std::string& name, std::uint64_t seed) {
  ModelConfig c;
  c.model_name = name;
  c.task = Task::binary;
  c.ti_dim = 8;
  c.ts_hidden = 8;
  c.ts_dim = 8;
  c.ts_layers = 1;
  c.ts_heads = 2;
  c.ts_ffn = 16;
  c.star_cycles = 2;
  c.text_width = 8;
  c.text_layers = 1;
  c.text_heads = 2;
  c.text_ffn = 16;
  c.fusion_width = 8;
  c.fusion_heads = 2;
  c.dropout = 0.1;
  c.seed = seed;
  return c;
}

Dataset toy_data() {
  GeneratorSpec spec;
  spec.seed = 3;
  spec.n_samples = 4;
  spec.d1 = 4;
  spec.l = 5;
  spec.d2 = 3;
  spec.d3_min = 3;
  spec.d3_max = 6;
  spec.vocab = 16;
  spec.signature_group = 2;
  spec.signal = {0.5, 0.5, 0.5};
  return generate(spec);
}

// A model draw whose forward pass keeps every kink at least this far from
// the evaluation point, so +-step perturbations stay on one smooth piece.
constexpr double kModelKinkMargin = 1e-3;
constexpr std::size_t kMaxDraws = 64;

Case model_case(const std::string& name, const Dataset& data) {
  const std::vector<std::size_t> rows = {0, 1, 2};
  const SampleBatch batch = collate(data, rows);
  auto builder_for = [batch](std::shared_ptr<const Model> model) -> GraphBuilder {
    return [model, batch](Graph& g, std::span<const Tensor> params) {
      Forward f(g, model->params(), true, Rng(17));
      for (std::size_t i = 0; i < params.size(); ++i) f.bind(i, params[i]);
      return model->loss(f, batch);
    };
  };
  std::shared_ptr<const Model> best;
  double best_margin = -1.0;
  for (std::uint64_t seed = 0; seed < kMaxDraws && best_margin < kModelKinkMargin; ++seed) {
    auto model = std::make_shared<const Model>(resolve_config(toy_config(name, seed), data.header));
    Graph g;
    Forward f(g, model->params(), true, Rng(17));
    (void)model->loss(f, batch);
    if (g.kink_margin() > best_margin) {
      best_margin = g.kink_margin();
      best = model;
    }
  }
  std::vector<Tensor> inputs;
  for (const auto& p : best->params()) inputs.push_back(p.value);
  return {"model:" + name, builder_for(best), std::move(inputs)};
}

}  // namespace

const std::vector<std::string>& gradcheck_models() {
  static const std::vector<std::string> names(std::begin(kSuiteModels), std::end(kSuiteModels));
  return names;
}

std::vector<SuiteCase> run_gradcheck_suite(const std::function<void(const SuiteCase&)>& on_case) {
  std::vector<Case> cases = primitive_cases();
  const Dataset data = toy_data();
  for (const auto& name : gradcheck_models()) cases.push_back(model_case(name, data));

  std::vector<SuiteCase> out;
  for (const auto& c : cases) {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteCase r{c.name, grad_check(c.builder, c.inputs), 0.0};
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_case) on_case(r);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace mfuse
