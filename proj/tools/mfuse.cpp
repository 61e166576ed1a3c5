// Command-line front end: generate, train, evaluate, gradcheck, list-models.
#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "mfuse/checkpoint.hpp"
#include "mfuse/data.hpp"
#include "mfuse/gradcheck_suite.hpp"
#include "mfuse/model.hpp"
#include "mfuse/train.hpp"

namespace {

using nlohmann::json;
using namespace mfuse;

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path);
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw Error(path + ": " + e.what());
  }
}

void print_error(const std::string& command, const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"command", command}, {"message", message}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal gated-fusion toolkit for EHR-shaped data"};
  app.require_subcommand(1);

  std::string spec_path, out_path;
  auto* generate_cmd = app.add_subcommand("generate", "Write a synthetic dataset from a generator spec");
  generate_cmd->add_option("--spec", spec_path, "Generator spec JSON")->required()->check(CLI::ExistingFile);
  generate_cmd->add_option("--out", out_path, "Dataset output (JSON lines)")->required();

  std::string config_path, data_path, run_dir;
  std::optional<std::uint64_t> seed;
  auto* train_cmd = app.add_subcommand("train", "Train a model and keep the best validation checkpoint");
  train_cmd->add_option("--config", config_path, "Model config JSON")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--data", data_path, "Dataset file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", run_dir, "Run directory")->required();
  train_cmd->add_option("--seed", seed, "Overrides the config seed");

  std::string checkpoint_path, split_name = "test";
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Print the metrics of a checkpoint on one split");
  evaluate_cmd->add_option("--config", config_path, "Config JSON (a run's config.json)")
      ->required()
      ->check(CLI::ExistingFile);
  evaluate_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint.bin")->required()->check(CLI::ExistingFile);
  evaluate_cmd->add_option("--data", data_path, "Dataset file")->required()->check(CLI::ExistingFile);
  evaluate_cmd->add_option("--split", split_name, "train, valid or test")
      ->check(CLI::IsMember({"train", "valid", "test"}));
  evaluate_cmd->add_option("--seed", seed, "Split seed (defaults to the config seed)");

  double tolerance = 1e-4;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  gradcheck_cmd->add_option("--tolerance", tolerance, "Maximum relative error")->check(CLI::PositiveNumber);

  auto* list_cmd = app.add_subcommand("list-models", "Print the model registry");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (*generate_cmd) {
      const GeneratorSpec spec = generator_spec_from_json(read_json(spec_path));
      const Dataset data = generate(spec);
      write_dataset(out_path, data);
      std::cout << json{{"samples", data.samples.size()}, {"out", out_path}}.dump() << '\n';
    } else if (*train_cmd) {
      ModelConfig config = config_from_json(read_json(config_path));
      if (seed) config.seed = *seed;
      const Dataset data = read_dataset(data_path);
      TrainOptions options;
      options.out_dir = run_dir;
      options.on_epoch = [](const EpochRecord& r) { std::cerr << to_json(r).dump() << '\n'; };
      const TrainResult result = train(config, data, options);
      std::cout << json{{"best_epoch", result.best_epoch}, {"test", to_json(result.test)}}.dump() << '\n';
    } else if (*evaluate_cmd) {
      ModelConfig config = config_from_json(read_json(config_path));
      const Dataset data = read_dataset(data_path);
      config = resolve_config(config, data.header);
      Model model(config);
      load_checkpoint(checkpoint_path, model.params(), config_digest(config));
      const SplitIndices parts = split(data.samples.size(), seed.value_or(config.seed));
      const Evaluation eval = evaluate(model, data, split_part(parts, split_name), config.batch_size);
      std::cout << to_json(eval.report).dump() << '\n';
    } else if (*gradcheck_cmd) {
      bool ok = true;
      run_gradcheck_suite([&](const SuiteCase& c) {
        const bool pass = c.result.max_rel_error < tolerance;
        ok = ok && pass;
        std::printf("%-4s %-22s max_rel_error=%.3e seconds=%.2f\n", pass ? "ok" : "FAIL", c.name.c_str(),
                    c.result.max_rel_error, c.seconds);
        if (!pass) {
          std::printf("     worst: input %zu entry %zu analytic=%.6e numeric=%.6e kink_margin=%.3e\n",
                      c.result.worst_input, c.result.worst_entry, c.result.worst_analytic, c.result.worst_numeric,
                      c.result.kink_margin);
        }
        std::fflush(stdout);
      });
      return ok ? 0 : 1;
    } else if (*list_cmd) {
      for (const auto& m : model_registry()) {
        std::cout << m.name << '\t' << to_string(m.fusion) << '\t' << (m.main ? to_string(*m.main) : "-") << '\t'
                  << (m.ts_variant ? to_string(*m.ts_variant) : "-") << '\n';
      }
    }
  } catch (const TrainingDiverged& e) {
    print_error(command, "training_diverged", e.what());
    return 1;
  } catch (const ShapeError& e) {
    print_error(command, "shape_error", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error(command, "runtime_error", e.what());
    return 1;
  }
  return 0;
}
