// Command-line front end: train, evaluate, hpo, serve, methods, dataset.

#include <CLI11.hpp>
#include <fmt/format.h>
#include <unistd.h>

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include "sslkit/evaluation.hpp"
#include "sslkit/generic.hpp"
#include "sslkit/methods.hpp"
#include "sslkit/service.hpp"
#include "sslkit/trainer.hpp"

using namespace sslkit;
namespace fs = std::filesystem;

namespace {

constexpr int kConfigError = 2;

struct CliError {
  int code;
  json body;
};

[[noreturn]] void fail(int code, const std::string& kind, const std::string& message) {
  throw CliError{code, {{"error", kind}, {"message", message}}};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(kConfigError, "MissingFile", "cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig load_config(const fs::path& p) {
  RunConfig cfg = parse_config_text(read_file(p));
  cfg.save_dir = effective_save_dir(cfg);
  return cfg;
}

/// A recipe file, a manifest directory, a generator name, or the modality
/// default when empty.
DatasetRecipe recipe_from_arg(const std::string& arg, Modality m) {
  if (arg.empty()) return DatasetRecipe::default_for(m);
  const fs::path p(arg);
  if (fs::is_directory(p)) return DatasetRecipe::from_json({{"path", arg}});
  if (fs::is_regular_file(p)) {
    const json j = json::parse(read_file(p), nullptr, false);
    if (j.is_discarded()) fail(kConfigError, "RecipeError", arg + " is not valid JSON");
    return DatasetRecipe::from_json(j);
  }
  return DatasetRecipe::from_json({{"generator", arg}});
}

InMemoryDataset load_data(const DatasetRecipe& r, Modality m) {
  InMemoryDataset ds = r.resolve();
  if (ds.modality() != m)
    fail(kConfigError, "RecipeError",
         fmt::format("dataset '{}' is {} data but the config is {}", r.name, modality_name(ds.modality()),
                     modality_name(m)));
  return ds;
}

std::shared_ptr<std::atomic<bool>> g_stop;

void on_sigint(int) {
  if (g_stop) g_stop->store(true);
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised training toolkit"};
  app.require_subcommand(1);
  bool quiet = false, no_color = false;
  app.add_flag("-q,--quiet", quiet, "only print the final report");
  app.add_flag("--no-color", no_color, "disable ANSI colours");

  std::string config, resume, dataset, val_dataset, checkpoint, out, run_id, host = "127.0.0.1",
                                                                             modality_filter, recipe;
  int port = 8080;

  auto* train = app.add_subcommand("train", "run pretext training");
  train->add_option("--config", config, "run config JSON")->required();
  train->add_option("--resume", resume, "checkpoint to resume from");
  train->add_option("--dataset", dataset, "recipe file, manifest directory or generator name");
  train->add_option("--val", val_dataset, "validation dataset (same forms as --dataset)");
  train->add_option("--run-id", run_id, "run identifier (default: derived from the config hash)");

  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint");
  evaluate->add_option("--config", config, "run config JSON")->required();
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  evaluate->add_option("--dataset", dataset, "training split for the probe or prototypes");
  evaluate->add_option("--test", val_dataset, "held-out split (default: same recipe, other seed)");
  evaluate->add_option("--out", out, "report path (default: <checkpoint dir>/evaluation/report.json)");

  auto* hpo = app.add_subcommand("hpo", "run the hyperparameter search only");
  hpo->add_option("--config", config, "run config JSON")->required();
  hpo->add_option("--dataset", dataset, "training dataset");
  hpo->add_option("--val", val_dataset, "validation dataset");
  hpo->add_option("--out", out, "directory for trial logs");

  auto* serve = app.add_subcommand("serve", "start the HTTP service");
  serve->add_option("--port", port, "port (0 picks a free one)");
  serve->add_option("--host", host, "bind address");

  auto* methods = app.add_subcommand("methods", "print the method catalog with schemas");
  methods->add_option("--modality", modality_filter, "only methods of this modality");

  auto* make_ds = app.add_subcommand("dataset", "write a recipe's samples to a manifest directory");
  make_ds->add_option("--recipe", recipe, "recipe file or generator name")->required();
  make_ds->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  const bool color = !no_color && isatty(STDOUT_FILENO);
  try {
    if (*methods) {
      json cat = Registry::global().catalog_json();
      if (!modality_filter.empty()) {
        const auto m = parse_modality(modality_filter);
        if (!m) fail(kConfigError, "ValidationError", "unknown modality '" + modality_filter + "'");
        json kept = json::array();
        for (const auto& e : cat["methods"])
          if (e["modality"] == modality_name(*m)) kept.push_back(e);
        cat["methods"] = kept;
      }
      cat["sections"] = section_schemas_json();
      print_json(cat);
      return 0;
    }

    if (*make_ds) {
      const DatasetRecipe r = fs::is_regular_file(recipe)
                                  ? DatasetRecipe::from_json(json::parse(read_file(recipe)))
                                  : DatasetRecipe::from_json({{"generator", recipe}});
      const InMemoryDataset ds = r.resolve();
      write_dataset(ds, out, r.to_json());
      print_json({{"path", out}, {"count", ds.size()}, {"modality", modality_name(ds.modality())}});
      return 0;
    }

    if (*serve) {
      RunService svc;
      HttpServer http(svc);
      const int bound = http.start(host, port);
      std::cout << fmt::format("serving on http://{}:{}\n", host, bound) << std::flush;
      static std::atomic<bool> stop_serving{false};
      std::signal(SIGINT, [](int) { stop_serving.store(true); });
      std::signal(SIGTERM, [](int) { stop_serving.store(true); });
      while (!stop_serving.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      http.stop();
      return 0;
    }

    const RunConfig cfg = load_config(config);
    const DatasetRecipe train_recipe = recipe_from_arg(dataset, cfg.modality);
    const InMemoryDataset train_data = load_data(train_recipe, cfg.modality);
    std::optional<InMemoryDataset> val_data;

    if (*train || *hpo) {
      if (!val_dataset.empty()) val_data = load_data(recipe_from_arg(val_dataset, cfg.modality), cfg.modality);
      const Dataset* val = val_data ? &*val_data : nullptr;
      if (*hpo) {
        const fs::path dir = out.empty() ? fs::path(cfg.save_dir) / "hpo" / default_run_id(cfg) : fs::path(out);
        const SearchResult res = run_hpo(cfg, train_data, val, {}, dir);
        print_json(res.summary());
        return 0;
      }
      TrainOptions opt;
      opt.run_id = run_id;
      if (!resume.empty()) opt.resume_from = resume;
      g_stop = std::make_shared<std::atomic<bool>>(false);
      opt.stop = g_stop;
      std::signal(SIGINT, on_sigint);
      auto logger = std::make_shared<TerminalLogger>(std::cout, color);
      if (!quiet) opt.listeners.push_back([logger](const ordered_json& e) { (*logger)(e); });
      const TrainReport rep = Trainer(cfg, opt).train(train_data, val);
      if (quiet) print_json(rep.to_json());
      return 0;
    }

    // evaluate
    const InMemoryDataset test_data =
        load_data(val_dataset.empty() ? train_recipe.held_out() : recipe_from_arg(val_dataset, cfg.modality),
                  cfg.modality);
    TrainOptions opt;
    opt.write_files = false;
    Trainer tr(cfg, opt);
    tr.prepare(train_data);
    const LoadReport lr = continue_from_weights(tr.method(), fs::path(checkpoint), true);
    MethodInstance& m = tr.method();
    const std::size_t n_classes = infer_data_shape(train_data).num_classes;
    json report = {{"checkpoint", checkpoint}, {"method", m.key()}, {"loaded_tensors", lr.loaded.size()}};
    if (cfg.modality == Modality::kCrossmodal) {
      if (!m.pair_encoder()) fail(1, "Unsupported", "cross-modal evaluation needs a two-tower method");
      const std::size_t bs = cfg.eval_template ? static_cast<std::size_t>(cfg.eval_template->batch_size) : 64;
      const auto ytrain = dataset_labels(train_data), ytest = dataset_labels(test_data);
      const PrototypeMatrix protos =
          build_prototypes(embed_dataset(*m.pair_encoder(), train_data, bs, true), ytrain, n_classes);
      const NdArray imgs = embed_dataset(m.encoder(), test_data, bs, false);
      const ZeroShotResult zs = zero_shot_classify(imgs, protos);
      std::size_t correct = 0;
      for (std::size_t i = 0; i < ytest.size(); ++i) correct += zs.predictions[i] == ytest[i];
      report["zero_shot_accuracy"] = static_cast<double>(correct) / static_cast<double>(ytest.size());
      if (imgs.dim(0) > 2) report["separation_ratio"] = separation_ratio(project_embeddings(imgs, 2), ytest);
    } else {
      ProbeConfig pc = cfg.eval_template ? ProbeConfig::from(*cfg.eval_template, cfg.seed) : ProbeConfig{};
      if (!cfg.eval_template) pc.num_classes = n_classes;
      report["probe"] = linear_probe(m.encoder(), train_data, test_data, pc).to_json();
    }
    const fs::path rp = out.empty() ? fs::path(checkpoint).parent_path() / "evaluation" / "report.json" : fs::path(out);
    if (rp.has_parent_path()) fs::create_directories(rp.parent_path());
    std::ofstream(rp) << report.dump(2) << "\n";
    print_json(report);
    return 0;
  } catch (const CliError& e) {
    std::cerr << e.body.dump() << "\n";
    return e.code;
  } catch (const ValidationError& e) {
    std::cerr << e.to_json().dump() << "\n";
    return kConfigError;
  } catch (const UnknownMethod& e) {
    std::cerr << json{{"error", "UnknownMethod"}, {"message", e.what()}, {"available", e.available()}}.dump() << "\n";
    return kConfigError;
  } catch (const RecipeError& e) {
    std::cerr << json{{"error", "RecipeError"}, {"message", e.what()}}.dump() << "\n";
    return kConfigError;
  } catch (const json::exception& e) {
    std::cerr << json{{"error", "ParseError"}, {"message", e.what()}}.dump() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "RuntimeError"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
}
