#pragma once

#include <vector>

#include "csiloc/feature.hpp"

namespace csiloc {

// Complete graph over APs with inverse-distance weights; zero diagonal.
// Coincident APs are rejected with ConfigError.
template <typename T>
Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> adjacency_matrix(
    const std::vector<Eigen::Matrix<T, 2, 1>>& positions) {
  const Index n = static_cast<Index>(positions.size());
  if (n < 1) throw ConfigError("adjacency_matrix: at least one AP required");
  Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> a =
      Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) {
      const T d = (positions[i] - positions[j]).norm();
      if (!(d > T(0))) throw ConfigError("adjacency_matrix: APs " + std::to_string(i) + " and " + std::to_string(j) + " coincide");
      a(i, j) = a(j, i) = T(1) / d;
    }
  return a;
}

// Row-normalised (A + I) when self_loops, row-normalised A otherwise (rows
// without neighbours stay zero).
RowMatrix propagation_matrix(const RowMatrix& adjacency, bool self_loops = true);

// Per-UE-position graph with fixed node features.
struct CsiGraph {
  RowMatrix node_features;  // N x D
  RowMatrix adjacency;      // N x N
  std::vector<Vec2> ap_positions;
  Vec2 true_location = Vec2::Zero();
};

// Training-time graph: node inputs are CSI images, features are computed on
// the tape so the extractor trains end to end.
struct GraphInput {
  std::vector<CsiImage> images;
  RowMatrix adjacency;
  std::vector<Vec2> ap_positions;
  Vec2 true_location = Vec2::Zero();
  Vec2 room_extent{1.0, 1.0};
  int rp_index = 0;
  int sample_index = 0;

  Index nodes() const { return static_cast<Index>(images.size()); }
  Vec2 normalized_target() const { return true_location.cwiseQuotient(room_extent); }
};

// Samples of all APs at one UE position. Throws DataError when the samples do
// not share an RP.
GraphInput build_graph_input(const std::vector<const CsiSample*>& samples, const std::vector<Vec2>& ap_positions,
                             const Vec2& room_extent, const DenoiseConfig& denoise = {});

CsiGraph build_graph(const std::vector<const CsiSample*>& samples, const FeatureExtractor& fx, ParamSet& ps,
                     const std::vector<Vec2>& ap_positions);

// One graph per (RP, sample) using the listed APs (all APs when empty).
std::vector<GraphInput> dataset_graphs(const Dataset& ds, const std::vector<int>& ap_subset = {},
                                       const DenoiseConfig& denoise = {});

// Dense block structure for a mini-batch of graphs with `total` nodes.
struct GraphBatch {
  SparseMatrix propagation;  // total x total, block diagonal
  SparseMatrix pooling;      // B x total, row b averages graph b's nodes
  SparseMatrix broadcast;    // total x B, copies graph b's vector to its nodes
  std::vector<Index> offsets;

  Index graphs() const { return pooling.rows(); }
  Index nodes() const { return propagation.rows(); }
};

GraphBatch make_batch(const std::vector<const RowMatrix*>& adjacencies, bool self_loops = true);

}  // namespace csiloc
