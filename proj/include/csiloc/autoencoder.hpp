#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "csiloc/graph.hpp"

namespace csiloc {

struct AutoencoderConfig {
  // Each image channel is average-pooled onto a grid x grid lattice.
  int grid = 8;
  // Encoder widths; the decoder mirrors them back to the descriptor width.
  std::vector<Index> encoder{64, 32, 16};
  Scalar dropout = 0.1;
  int epochs = 30;
  int batch = 32;
  Scalar lr = 0.1;

  Index descriptor_dim() const { return 3 * static_cast<Index>(grid) * grid; }
  Index embedding_dim() const { return encoder.back(); }
  void validate() const;
};

// Adaptive average pooling of each channel onto grid x grid, R then G then B.
Vector node_descriptor(const CsiImage& image, int grid);
RowMatrix graph_descriptors(const GraphInput& graph, int grid);

// Encoder: graph convs with ReLU and dropout, then per-graph mean pooling.
// Decoder: embedding broadcast to every node, graph convs back to the
// descriptor width with a linear last layer.
class GraphAutoencoder {
 public:
  explicit GraphAutoencoder(AutoencoderConfig cfg = {}, std::string prefix = "ae");

  void init(ParamSet& ps, std::mt19937_64& rng) const;

  // nodes [total, D] -> [B, embedding_dim]
  ad::Var encode(Binding& b, ad::Var nodes, const GraphBatch& batch, const ForwardOptions& opt) const;
  // embeddings [B, E] -> [total, D]
  ad::Var decode(Binding& b, ad::Var embeddings, const GraphBatch& batch, const ForwardOptions& opt) const;
  ad::Var loss(Binding& b, const std::vector<const GraphInput*>& graphs, const ForwardOptions& opt) const;

  // Eval-mode embeddings, one row per graph.
  RowMatrix embed(ParamSet& ps, const std::vector<const GraphInput*>& graphs, std::size_t batch = 128) const;
  Scalar reconstruction_loss(ParamSet& ps, const std::vector<const GraphInput*>& graphs) const;

  const AutoencoderConfig& config() const { return cfg_; }

 private:
  ad::Var batch_nodes(ad::Tape& tape, const std::vector<const GraphInput*>& graphs) const;

  AutoencoderConfig cfg_;
  std::string prefix_;
};

struct TrainedAutoencoder {
  GraphAutoencoder model;
  ParamSet params;
  Scalar initial_loss = 0.0;
  std::vector<Scalar> epoch_loss;  // eval-mode reconstruction loss after each epoch
};

// Trains on the pooled graphs of all historical scenarios (at least two).
TrainedAutoencoder train_autoencoder(const std::vector<std::vector<const GraphInput*>>& scenarios,
                                     const AutoencoderConfig& cfg, std::uint64_t seed);

}  // namespace csiloc
