// Python bindings. Structured values cross the boundary as JSON text and are
// decoded by the pure-Python wrapper.

#include <optional>
#include <string>
#include <vector>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mfuse/checkpoint.hpp"
#include "mfuse/gradcheck_suite.hpp"
#include "mfuse/metrics.hpp"
#include "mfuse/train.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace mfuse;

namespace {

std::string generate_file(const std::string& spec_json, const std::string& out) {
  const Dataset data = generate(generator_spec_from_json(json::parse(spec_json)));
  write_dataset(out, data);
  return json{{"samples", data.samples.size()}, {"out", out}}.dump();
}

std::string train_run(const std::string& config_json, const std::string& data_path,
                      std::optional<std::string> out_dir, std::optional<std::uint64_t> seed) {
  ModelConfig config = config_from_json(json::parse(config_json));
  if (seed) config.seed = *seed;
  const Dataset data = read_dataset(data_path);
  TrainOptions options;
  if (out_dir) options.out_dir = *out_dir;
  TrainResult result = [&] {
    py::gil_scoped_release release;
    return train(config, data, options);
  }();
  json history = json::array();
  for (const EpochRecord& r : result.history) history.push_back(to_json(r));
  return json{{"best_epoch", result.best_epoch}, {"history", history}, {"test", to_json(result.test)}}.dump();
}

std::string evaluate_run(const std::string& config_json, const std::string& checkpoint, const std::string& data_path,
                         const std::string& split_name, std::optional<std::uint64_t> seed) {
  const Dataset data = read_dataset(data_path);
  const ModelConfig config = resolve_config(config_from_json(json::parse(config_json)), data.header);
  Model model(config);
  load_checkpoint(checkpoint, model.params(), config_digest(config));
  const SplitIndices parts = split(data.samples.size(), seed.value_or(config.seed));
  py::gil_scoped_release release;
  return to_json(evaluate(model, data, split_part(parts, split_name), config.batch_size).report).dump();
}

Tensor matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw Error("expected a non-empty matrix");
  const std::size_t cols = rows.front().size();
  std::vector<double> flat;
  for (const auto& r : rows) {
    if (r.size() != cols) throw Error("ragged matrix");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(flat));
}

std::string list_models() {
  json out = json::array();
  for (const ModelSpec& m : model_registry()) {
    out.push_back({{"name", m.name},
                   {"fusion", to_string(m.fusion)},
                   {"main", m.main ? json(to_string(*m.main)) : json()},
                   {"ts_variant", m.ts_variant ? json(to_string(*m.ts_variant)) : json()}});
  }
  return out.dump();
}

std::string gradcheck() {
  json out = json::array();
  std::vector<SuiteCase> cases;
  {
    py::gil_scoped_release release;
    cases = run_gradcheck_suite();
  }
  for (const SuiteCase& c : cases)
    out.push_back({{"name", c.name}, {"max_rel_error", c.result.max_rel_error}, {"seconds", c.seconds}});
  return out.dump();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Gated multimodal fusion toolkit, native core";
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

  m.def("generate", &generate_file, py::arg("spec_json"), py::arg("out"));
  m.def("train", &train_run, py::arg("config_json"), py::arg("data"), py::arg("out_dir") = py::none(),
        py::arg("seed") = py::none());
  m.def("evaluate", &evaluate_run, py::arg("config_json"), py::arg("checkpoint"), py::arg("data"),
        py::arg("split") = "test", py::arg("seed") = py::none());
  m.def("list_models", &list_models);
  m.def("gradcheck", &gradcheck);

  m.def("auroc", [](const std::vector<double>& s, const std::vector<double>& t) { return auroc(s, t); },
        py::arg("scores"), py::arg("truth"));
  m.def("aupr", [](const std::vector<double>& s, const std::vector<double>& t) { return aupr(s, t); },
        py::arg("scores"), py::arg("truth"));
  m.def(
      "topk_recall",
      [](const std::vector<std::vector<double>>& s, const std::vector<std::vector<double>>& t, std::size_t k) {
        return topk_recall(matrix(s), matrix(t), k);
      },
      py::arg("scores"), py::arg("truth"), py::arg("k"));
}
