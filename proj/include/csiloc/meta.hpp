#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csiloc/autoencoder.hpp"
#include "csiloc/gnn.hpp"
#include "csiloc/mmd.hpp"

namespace csiloc {

struct MetaConfig {
  Scalar inner_lr = 0.05;       // alpha
  Scalar outer_lr = 0.05;       // beta
  int epochs = 100;             // outer updates
  int meta_batch = 2;           // groups adapted per outer update
  int inner_steps = 1;
  int finetune_steps = 50;
  int groups_per_scenario = 4;  // RP partition size per epoch
  int task_size = 16;           // graphs drawn from a group, split 50/50
  Scalar finetune_lr = 0.05;
  int finetune_batch = 4096;

  void validate() const;
};

struct TaskSplit {
  std::vector<const GraphInput*> support;
  std::vector<const GraphInput*> query;
};

// Groups graphs by (scenario, RP). Each draw partitions the RP keys at random
// into groups_per_scenario groups, picks meta_batch of them and draws
// task_size graphs from each.
class TaskSampler {
 public:
  explicit TaskSampler(const std::vector<std::vector<const GraphInput*>>& scenarios);

  std::vector<TaskSplit> sample(const MetaConfig& cfg, std::mt19937_64& rng) const;
  std::size_t keys() const { return by_key_.size(); }

 private:
  std::vector<std::vector<const GraphInput*>> by_key_;
};

// Loss on `batch` at `ps`; gradients land in `grad_dst` (added to existing
// ones when accumulate is set).
Scalar compute_gradients(const Localizer& model, ParamSet& ps, const std::vector<const GraphInput*>& batch,
                         const ForwardOptions& opt, ParamSet& grad_dst, bool accumulate);

// inner_steps SGD steps at inner_lr on the full support set. Batch norm uses
// batch statistics and leaves running statistics alone. The input set is not
// modified. Optional losses receive the support loss before every step.
ParamSet inner_adapt(const Localizer& model, const ParamSet& theta, const std::vector<const GraphInput*>& support,
                     const MetaConfig& cfg, std::vector<Scalar>* losses = nullptr);

struct EpochRecord {
  int epoch = 0;
  Scalar outer_loss = 0.0;  // mean query loss at the adapted parameters
  std::vector<Scalar> inner_losses;
};

struct MetaResult {
  ParamSet params;
  std::vector<EpochRecord> log;
};

// First-order meta-training: per epoch, sample tasks, adapt on each support
// set, take query gradients at the adapted parameters, sum them and apply
// theta <- theta - outer_lr * sum. Query passes refresh BN running
// statistics, which are carried back into theta.
MetaResult meta_train(const Localizer& model, ParamSet theta, const TaskSampler& sampler, const MetaConfig& cfg,
                      std::uint64_t seed);
MetaResult meta_train_scenario(const Localizer& model, const std::vector<const GraphInput*>& graphs,
                               const MetaConfig& cfg, std::uint64_t seed);

// Per-epoch generator used by meta_train.
std::mt19937_64 meta_epoch_rng(std::uint64_t seed, int epoch);

struct TrainResult {
  ParamSet params;
  std::vector<Scalar> losses;  // minibatch loss before each step
};

// Minibatch SGD with batch statistics and running-stat updates. Minibatches
// walk a reshuffled permutation of the graphs. After the last step the BN
// running statistics are re-estimated on the training graphs.
TrainResult train_sgd(const Localizer& model, ParamSet init, const std::vector<const GraphInput*>& graphs, int steps,
                      Scalar lr, int batch, std::uint64_t seed);

// Replaces BN running statistics by the cumulative average of batch
// statistics over consecutive chunks of `graphs`.
void recalibrate_batchnorm(const Localizer& model, ParamSet& ps, const std::vector<const GraphInput*>& graphs,
                           std::size_t batch);

// finetune_steps full-support gradient steps at finetune_lr from theta. The
// gradient is accumulated over shuffled chunks of finetune_batch graphs, so BN
// batch statistics are per chunk.
TrainResult finetune(const Localizer& model, const ParamSet& theta, const std::vector<const GraphInput*>& support,
                     const MetaConfig& cfg, std::uint64_t seed);

// Eval-mode loss (model reduction) over a set of graphs.
Scalar evaluate_loss(const Localizer& model, ParamSet& ps, const std::vector<const GraphInput*>& graphs);

nlohmann::json to_json(const MetaConfig& cfg);
MetaConfig meta_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LocalizerConfig& cfg);
LocalizerConfig localizer_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AutoencoderConfig& cfg);
AutoencoderConfig autoencoder_config_from_json(const nlohmann::json& j);

struct BankEntry {
  std::string id;
  std::uint64_t config_digest = 0;
  ParamSet params;
  RowMatrix embeddings;
  nlohmann::json metadata = nlohmann::json::object();
};

// Per-scenario meta-parameters and embedding samples plus the shared encoder.
// On disk: manifest.json, theta_<id>.params, autoencoder.params and
// embeddings.bin inside one directory.
struct ScenarioBank {
  LocalizerConfig model;
  AutoencoderConfig autoencoder;
  ParamSet autoencoder_params;
  std::vector<BankEntry> entries;

  std::vector<RowMatrix> embedding_sets() const;
  Selection select(const RowMatrix& new_embeddings) const;
  void save(const std::filesystem::path& dir) const;
  static ScenarioBank load(const std::filesystem::path& dir);
};

void write_embeddings(const std::vector<std::pair<std::string, RowMatrix>>& sets, const std::filesystem::path& path);
std::vector<std::pair<std::string, RowMatrix>> read_embeddings(const std::filesystem::path& path);

}  // namespace csiloc
