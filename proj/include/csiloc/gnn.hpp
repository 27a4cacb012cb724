#pragma once

#include <random>
#include <string>
#include <vector>

#include "csiloc/graph.hpp"

namespace csiloc {

struct GnnConfig {
  Index input_dim = 64;
  // Widths of the graph-conv layers.
  std::vector<Index> hidden{64, 64, 64};
};

// Graph conv layers S <- ReLU(BN(P S W + b)) with P the block-diagonal
// propagation matrix, global mean pooling per graph, FC to 2-D.
class GnnLocalizer {
 public:
  explicit GnnLocalizer(GnnConfig cfg = {}, std::string prefix = "gnn");

  void init(ParamSet& ps, std::mt19937_64& rng) const;

  // nodes [total, input_dim] -> [B, 2].
  ad::Var forward(Binding& b, ad::Var nodes, const GraphBatch& batch, const ForwardOptions& opt) const;

  const GnnConfig& config() const { return cfg_; }

 private:
  GnnConfig cfg_;
  std::string prefix_;
};

// Single-graph forward on fixed node features (eval mode by default).
Vec2 gnn_forward(const CsiGraph& graph, const GnnLocalizer& gnn, ParamSet& ps,
                 const ForwardOptions& opt = ForwardOptions::eval());

// Squared Euclidean distance.
Scalar mse_loss(const Vec2& pred, const Vec2& truth);
Scalar mse_loss(const std::vector<Vec2>& pred, const std::vector<Vec2>& truth, ad::Reduction reduction = ad::Reduction::Sum);

struct LocalizerConfig {
  ExtractorConfig extractor;
  std::vector<Index> gnn_hidden{64, 64, 64};
  ad::Reduction reduction = ad::Reduction::Mean;
};

// Extractor and GNN trained end to end on CSI-image graphs. Targets are
// locations divided by room extent; predictions are mapped back to meters.
class Localizer {
 public:
  explicit Localizer(LocalizerConfig cfg = {});

  void init(ParamSet& ps, std::mt19937_64& rng) const;
  ParamSet make_params(std::uint64_t seed) const;

  // Normalised predictions [B, 2]. Images of different sizes run through the
  // conv stack in separate same-size groups.
  ad::Var forward(Binding& b, const std::vector<const GraphInput*>& graphs, const ForwardOptions& opt) const;
  ad::Var loss(Binding& b, const std::vector<const GraphInput*>& graphs, const ForwardOptions& opt) const;

  // Eval-mode predictions in meters, computed in chunks of `batch`.
  std::vector<Vec2> predict(ParamSet& ps, const std::vector<const GraphInput*>& graphs, std::size_t batch = 64) const;

  const LocalizerConfig& config() const { return cfg_; }
  const FeatureExtractor& extractor() const { return extractor_; }
  const GnnLocalizer& gnn() const { return gnn_; }

 private:
  LocalizerConfig cfg_;
  FeatureExtractor extractor_;
  GnnLocalizer gnn_;
};

std::vector<const GraphInput*> pointers(const std::vector<GraphInput>& graphs);

}  // namespace csiloc
