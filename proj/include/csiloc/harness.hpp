#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "csiloc/meta.hpp"
#include "csiloc/scenario_io.hpp"

namespace csiloc {

struct Budgets {
  int train_samples_per_rp = 80;
  int finetune_samples_per_rp = 20;
  int test_samples_per_rp = 100;
};

struct SupervisedConfig {
  int steps = 1000;
  Scalar lr = 0.05;
  int batch = 32;
};

struct DeviceSweep {
  std::vector<int> bandwidths;
  std::vector<std::pair<int, int>> antennas;  // (n_tx, n_rx)
  std::vector<int> ap_counts;
  std::vector<Scalar> rp_spacings;
  std::vector<int> finetune_samples;

  bool empty() const;
};

struct Baselines {
  bool plain_gnn = true;
  bool random_init = true;
  bool pooled_meta = true;
};

struct ExperimentSpec {
  std::string name = "experiment";
  std::vector<ScenarioConfig> historical;
  ScenarioConfig target;
  Budgets budgets;
  LocalizerConfig model;
  MetaConfig meta;
  AutoencoderConfig autoencoder;
  SupervisedConfig supervised;
  int embedding_samples = 200;
  DeviceSweep sweep;
  Baselines baselines;
  std::vector<std::uint64_t> seeds{1};

  void validate() const;
};

// Scenario entries are preset names, paths (relative to base_dir) or inline
// scenario objects; an inline object with a "preset" key patches that preset.
// "scenario_overrides" is merged into each entry.
ExperimentSpec experiment_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json experiment_to_json(const ExperimentSpec& spec);
ExperimentSpec load_experiment(const std::filesystem::path& path);
std::uint64_t experiment_digest(const ExperimentSpec& spec);

// Method labels used in records and reports.
inline constexpr const char* kMetaSimGnn = "meta_simgnn";
inline constexpr const char* kPooledMeta = "pooled_meta";
inline constexpr const char* kPlainGnn = "plain_gnn";
inline constexpr const char* kRandomInit = "random_init";

struct MetricsRecord {
  std::string method;
  std::string scenario;
  std::uint64_t seed = 0;
  nlohmann::json tags = nlohmann::json::object();
  std::vector<Scalar> errors;  // meters
  Scalar mean = 0.0;
  Scalar std = 0.0;  // population standard deviation
  std::vector<Scalar> cdf_grid;
  std::vector<Scalar> cdf;
  nlohmann::json provenance = nlohmann::json::object();
};

// Fills mean, std and a CDF on `grid_points` evenly spaced errors from 0 to
// the largest error.
MetricsRecord make_metrics(std::vector<Scalar> errors, int grid_points = 51);

MetricsRecord evaluate(const Localizer& model, ParamSet& params, const std::vector<const GraphInput*>& test);

nlohmann::json to_json(const MetricsRecord& r);
MetricsRecord metrics_from_json(const nlohmann::json& j);

enum class Role { Historical, Target };

// Scenario with its noise realisation tied to the run seed; the target role
// draws from a separate realisation so a copied scenario gets fresh noise.
ScenarioConfig realize(const ScenarioConfig& cfg, std::uint64_t seed, Role role);

// Sample counters for disjoint splits of one scenario.
inline constexpr int kFinetuneOffset = 0;
inline constexpr int kTestOffset = 1 << 20;

std::vector<GraphInput> scenario_graphs(const ScenarioConfig& cfg, int samples_per_rp, int sample_offset, int jobs = 1,
                                        const std::vector<int>& ap_subset = {});

// Up to `limit` graphs drawn without replacement, order preserved.
std::vector<const GraphInput*> subsample(const std::vector<const GraphInput*>& graphs, int limit, std::uint64_t seed);

struct HistoricalModels {
  ScenarioBank bank;
  ParamSet pooled_meta;  // empty unless requested
  ParamSet plain_gnn;    // empty unless requested
  std::vector<std::vector<EpochRecord>> meta_logs;
};

// Per-scenario meta-training plus the requested pooled baselines. Bank
// embeddings are left empty.
HistoricalModels train_historical(const ExperimentSpec& spec, const std::vector<std::vector<GraphInput>>& historical,
                                  std::uint64_t seed, int jobs = 1);

// Trains the autoencoder on all historical graphs and stores embedding
// samples in the bank.
void embed_bank(ScenarioBank& bank, const ExperimentSpec& spec, const std::vector<std::vector<GraphInput>>& historical,
                std::uint64_t seed);

RowMatrix embed_graphs(const ScenarioBank& bank, const std::vector<const GraphInput*>& graphs, int limit, std::uint64_t seed);

// Historical training splits and the target's fine-tune and test splits.
struct ComparisonData {
  std::vector<Dataset> historical;
  Dataset support;
  Dataset test;
};

ComparisonData comparison_data(const ExperimentSpec& spec, std::uint64_t seed, int jobs = 1);

// Final parameters per method, in report order.
struct AdaptedModels {
  Selection selection;
  std::string selected_id;
  std::vector<std::pair<std::string, ParamSet>> methods;
};

// Selects a bank scenario from the support set and fine-tunes the selected
// parameters and the baselines on it.
AdaptedModels adapt_to_target(const ExperimentSpec& spec, const HistoricalModels& models,
                              const std::vector<const GraphInput*>& support, std::uint64_t seed, int jobs = 1);

std::vector<MetricsRecord> evaluate_methods(const ExperimentSpec& spec, const AdaptedModels& adapted,
                                            const std::vector<const GraphInput*>& test, std::uint64_t seed, int jobs = 1);

struct ComparisonResult {
  Selection selection;
  std::vector<MetricsRecord> records;
};

// Full method comparison for one seed: the stages above in sequence.
ComparisonResult run_comparison(const ExperimentSpec& spec, std::uint64_t seed, int jobs = 1);

// Device-configuration sweeps for one seed.
std::vector<MetricsRecord> run_sweep(const ExperimentSpec& spec, std::uint64_t seed, int jobs = 1);

// Aggregated CSV tables written to out_dir; returns the file names written.
std::vector<std::string> write_reports(const std::vector<MetricsRecord>& records, const std::filesystem::path& out_dir);

// Mean of per-record mean errors for each distinct value of tag `key`
// (records without the tag are skipped), keyed by the tag's JSON dump.
std::vector<std::pair<std::string, Scalar>> mean_error_by_tag(const std::vector<MetricsRecord>& records, const std::string& key);

}  // namespace csiloc
