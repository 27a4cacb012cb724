#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "csiloc/harness.hpp"

using namespace csiloc;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Options {
  std::string spec_path;
  std::vector<std::uint64_t> seeds;
  std::string out = "runs";
  int jobs = 1;
};

// Artifacts of one seed live under <out>/seed_<n>.
struct Run {
  const ExperimentSpec& spec;
  std::uint64_t seed;
  fs::path dir;
  int jobs;
  std::string digest;
};

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("missing artifact " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_manifest(const Run& run, const std::string& command, json extra = json::object()) {
  extra["command"] = command;
  extra["spec_digest"] = run.digest;
  extra["seed"] = run.seed;
  extra["experiment"] = run.spec.name;
  write_json(run.dir / (command + ".manifest.json"), extra);
}

// The manifest of an earlier stage must exist and match the current spec.
json require_stage(const Run& run, const std::string& command) {
  const fs::path p = run.dir / (command + ".manifest.json");
  if (!fs::exists(p)) throw DataError("missing artifact " + p.string() + " (run '" + command + "' first)");
  json m = read_json(p);
  if (m.value("spec_digest", "") != run.digest)
    throw DigestMismatch(p.string() + " was produced from a different experiment spec (" + m.value("spec_digest", "?") +
                         " vs " + run.digest + ")");
  if (m.value("seed", std::uint64_t{0}) != run.seed) throw DigestMismatch(p.string() + " belongs to another seed");
  return m;
}

fs::path data_file(const Run& run, const std::string& name) { return run.dir / "data" / (name + ".csids"); }

std::vector<std::string> historical_names(const ExperimentSpec& spec) {
  std::vector<std::string> names;
  for (std::size_t p = 0; p < spec.historical.size(); ++p) names.push_back("historical_" + std::to_string(p));
  return names;
}

std::vector<GraphInput> load_graphs(const Run& run, const json& gen, const std::string& name) {
  const auto& files = gen.at("datasets");
  if (!files.contains(name)) throw DataError("dataset '" + name + "' not listed in gen manifest");
  const std::uint64_t digest = std::stoull(files.at(name).get<std::string>(), nullptr, 16);
  return dataset_graphs(read_dataset(data_file(run, name), digest));
}

std::vector<std::vector<GraphInput>> load_historical(const Run& run, const json& gen) {
  std::vector<std::vector<GraphInput>> hist;
  for (const auto& n : historical_names(run.spec)) hist.push_back(load_graphs(run, gen, n));
  return hist;
}

HistoricalModels load_models(const Run& run) {
  HistoricalModels m;
  m.bank = ScenarioBank::load(run.dir / "bank");
  if (run.spec.baselines.pooled_meta) m.pooled_meta = ParamSet::load(run.dir / "pooled_meta.params");
  if (run.spec.baselines.plain_gnn) m.plain_gnn = ParamSet::load(run.dir / "plain_gnn.params");
  return m;
}

void cmd_gen(const Run& run) {
  const ComparisonData data = comparison_data(run.spec, run.seed, run.jobs);
  fs::create_directories(run.dir / "data");
  json files = json::object();
  auto put = [&](const std::string& name, const Dataset& ds) {
    write_dataset(ds, data_file(run, name));
    files[name] = hex_digest(scenario_digest(ds.config));
  };
  const auto names = historical_names(run.spec);
  for (std::size_t p = 0; p < names.size(); ++p) put(names[p], data.historical[p]);
  put("support", data.support);
  put("test", data.test);
  write_manifest(run, "gen", {{"datasets", files}});
  std::cout << "gen: " << files.size() << " datasets in " << (run.dir / "data").string() << '\n';
}

void cmd_train_meta(const Run& run) {
  const json gen = require_stage(run, "gen");
  const auto hist = load_historical(run, gen);
  HistoricalModels m = train_historical(run.spec, hist, run.seed, run.jobs);
  m.bank.save(run.dir / "bank");
  if (run.spec.baselines.pooled_meta) m.pooled_meta.save(run.dir / "pooled_meta.params");
  if (run.spec.baselines.plain_gnn) m.plain_gnn.save(run.dir / "plain_gnn.params");

  std::ofstream log(run.dir / "meta_log.jsonl", std::ios::app);
  for (std::size_t p = 0; p < m.meta_logs.size(); ++p)
    for (const auto& rec : m.meta_logs[p])
      log << json{{"scenario", m.bank.entries[p].id}, {"epoch", rec.epoch}, {"outer_loss", rec.outer_loss},
                  {"inner_losses", rec.inner_losses}}.dump()
          << '\n';
  json ids = json::array();
  for (const auto& e : m.bank.entries) ids.push_back({{"id", e.id}, {"params_checksum", hex_digest(e.params.checksum())}});
  write_manifest(run, "train-meta", {{"scenarios", ids}});
  std::cout << "train-meta: " << ids.size() << " scenario models in " << (run.dir / "bank").string() << '\n';
}

void cmd_embed(const Run& run) {
  const json gen = require_stage(run, "gen");
  require_stage(run, "train-meta");
  const auto hist = load_historical(run, gen);
  ScenarioBank bank = ScenarioBank::load(run.dir / "bank");
  embed_bank(bank, run.spec, hist, run.seed);
  bank.save(run.dir / "bank");
  write_manifest(run, "embed", {{"autoencoder_checksum", hex_digest(bank.autoencoder_params.checksum())}});
  std::cout << "embed: autoencoder trained, " << bank.entries.size() << " embedding sets stored\n";
}

void cmd_finetune(const Run& run) {
  const json gen = require_stage(run, "gen");
  require_stage(run, "embed");
  const auto support = load_graphs(run, gen, "support");
  const HistoricalModels m = load_models(run);
  const AdaptedModels a = adapt_to_target(run.spec, m, pointers(support), run.seed, run.jobs);
  json methods = json::array();
  fs::create_directories(run.dir / "finetuned");
  for (const auto& [name, ps] : a.methods) {
    ps.save(run.dir / "finetuned" / (name + ".params"));
    methods.push_back({{"method", name}, {"params_checksum", hex_digest(ps.checksum())}});
  }
  write_json(run.dir / "selection.json",
             {{"selected", a.selected_id}, {"index", a.selection.index}, {"mmd2", a.selection.mmd2}, {"sigma", a.selection.sigma}});
  write_manifest(run, "finetune", {{"selected", a.selected_id}, {"methods", methods}});
  std::cout << "finetune: selected '" << a.selected_id << "'";
  for (std::size_t i = 0; i < a.selection.mmd2.size(); ++i) std::cout << (i ? ", " : " (mmd2 ") << a.selection.mmd2[i];
  std::cout << ")\n";
}

void cmd_eval(const Run& run) {
  const json gen = require_stage(run, "gen");
  const json ft = require_stage(run, "finetune");
  const auto test = load_graphs(run, gen, "test");
  AdaptedModels a;
  a.selected_id = ft.at("selected").get<std::string>();
  for (const auto& m : ft.at("methods")) {
    const std::string name = m.at("method").get<std::string>();
    ParamSet ps = ParamSet::load(run.dir / "finetuned" / (name + ".params"));
    if (hex_digest(ps.checksum()) != m.at("params_checksum").get<std::string>())
      throw DigestMismatch("fine-tuned parameters of '" + name + "' differ from the finetune manifest");
    a.methods.emplace_back(name, std::move(ps));
  }
  const auto records = evaluate_methods(run.spec, a, pointers(test), run.seed, run.jobs);
  json out = json::array();
  for (const auto& r : records) {
    out.push_back(to_json(r));
    std::cout << "eval: " << r.method << " mean " << r.mean << " m, std " << r.std << " m\n";
  }
  write_json(run.dir / "metrics" / "comparison.json", out);
  write_manifest(run, "eval", {{"records", records.size()}});
}

void cmd_sweep(const Run& run) {
  if (run.spec.sweep.empty()) throw ConfigError("sweep: the experiment spec has no sweep section");
  const auto records = run_sweep(run.spec, run.seed, run.jobs);
  json out = json::array();
  for (const auto& r : records) out.push_back(to_json(r));
  write_json(run.dir / "metrics" / "sweep.json", out);
  write_manifest(run, "sweep", {{"records", records.size()}});
  std::cout << "sweep: " << records.size() << " configurations evaluated\n";
}

void cmd_report(const Options& opt, const ExperimentSpec& spec, const std::string& digest) {
  std::vector<MetricsRecord> records;
  json sources = json::array();
  const fs::path root(opt.out);
  for (const auto seed : opt.seeds) {
    const fs::path dir = root / ("seed_" + std::to_string(seed));
    for (const char* stage : {"eval", "sweep"}) {
      const fs::path m = dir / (std::string(stage) + ".manifest.json");
      if (!fs::exists(m)) continue;
      const json man = read_json(m);
      if (man.value("spec_digest", "") != digest) throw DigestMismatch(m.string() + " was produced from a different experiment spec");
      const fs::path file = dir / "metrics" / (std::string(stage) == "eval" ? "comparison.json" : "sweep.json");
      for (const auto& r : read_json(file)) records.push_back(metrics_from_json(r));
      sources.push_back(fs::relative(file, root).string());
    }
  }
  if (records.empty()) throw DataError("report: no metrics found under " + root.string() + " (run eval or sweep first)");
  const auto files = write_reports(records, root / "reports");
  write_json(root / "reports" / "report.manifest.json",
             {{"command", "report"}, {"spec_digest", digest}, {"seeds", opt.seeds}, {"experiment", spec.name},
              {"sources", sources}, {"tables", files}});
  for (const auto& f : files) std::cout << "report: " << (root / "reports" / f).string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulation and meta-learning toolkit for WiFi CSI localization"};
  app.require_subcommand(1);
  Options opt;
  auto common = [&](CLI::App* c) {
    c->add_option("--spec", opt.spec_path, "Experiment spec (JSON)")->required()->check(CLI::ExistingFile);
    c->add_option("--seed", opt.seeds, "Seed(s); defaults to the experiment's seed list");
    c->add_option("--out", opt.out, "Artifact directory")->capture_default_str();
    c->add_option("--jobs", opt.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  };
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen", "Generate historical and target datasets"},
      {"train-meta", "Meta-train one model per historical scenario plus baselines"},
      {"embed", "Train the graph autoencoder and store scenario embeddings"},
      {"finetune", "Select the most similar scenario and fine-tune on the target support set"},
      {"eval", "Evaluate fine-tuned models on the target test set"},
      {"sweep", "Run device-configuration sweeps"},
      {"report", "Aggregate metrics into CSV tables"}};
  for (const auto& [name, help] : commands) common(app.add_subcommand(name, help));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const ExperimentSpec spec = load_experiment(opt.spec_path);
    const std::string digest = hex_digest(experiment_digest(spec));
    if (opt.seeds.empty()) opt.seeds = spec.seeds;
    const std::string command = app.get_subcommands().front()->get_name();
    if (command == "report") {
      cmd_report(opt, spec, digest);
      return 0;
    }
    for (const auto seed : opt.seeds) {
      const auto t0 = std::chrono::steady_clock::now();
      const Run run{spec, seed, fs::path(opt.out) / ("seed_" + std::to_string(seed)), opt.jobs, digest};
      fs::create_directories(run.dir);
      if (command == "gen") cmd_gen(run);
      else if (command == "train-meta") cmd_train_meta(run);
      else if (command == "embed") cmd_embed(run);
      else if (command == "finetune") cmd_finetune(run);
      else if (command == "eval") cmd_eval(run);
      else if (command == "sweep") cmd_sweep(run);
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cout << command << " seed " << seed << " done in " << s << " s\n";
    }
  } catch (const DigestMismatch& e) {
    std::cerr << "digest mismatch: " << e.what() << '\n';
    return 5;
  } catch (const ConfigError& e) {
    std::cerr << "spec error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
