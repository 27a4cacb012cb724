#include "csiloc/graph.hpp"

namespace csiloc {

RowMatrix propagation_matrix(const RowMatrix& adjacency, bool self_loops) {
  RowMatrix p = adjacency;
  if (self_loops) p.diagonal().array() += 1.0;
  for (Index i = 0; i < p.rows(); ++i) {
    const Scalar s = p.row(i).sum();
    if (s > 0.0) p.row(i) /= s;
  }
  return p;
}

GraphInput build_graph_input(const std::vector<const CsiSample*>& samples, const std::vector<Vec2>& ap_positions,
                             const Vec2& room_extent, const DenoiseConfig& denoise) {
  if (samples.empty()) throw DataError("build_graph: no AP samples");
  if (samples.size() != ap_positions.size()) throw DataError("build_graph: sample / AP position count mismatch");
  GraphInput g;
  g.rp_index = samples.front()->rp_index;
  g.sample_index = samples.front()->sample_index;
  g.true_location = samples.front()->true_location;
  g.room_extent = room_extent;
  for (const CsiSample* s : samples) {
    if (s->rp_index != g.rp_index) throw DataError("build_graph: samples from different RPs");
    g.images.push_back(sample_to_image(*s, denoise));
  }
  g.ap_positions = ap_positions;
  g.adjacency = adjacency_matrix<Scalar>(ap_positions);
  return g;
}

CsiGraph build_graph(const std::vector<const CsiSample*>& samples, const FeatureExtractor& fx, ParamSet& ps,
                     const std::vector<Vec2>& ap_positions) {
  if (samples.empty()) throw DataError("build_graph: no AP samples");
  if (samples.size() != ap_positions.size()) throw DataError("build_graph: sample / AP position count mismatch");
  CsiGraph g;
  g.adjacency = adjacency_matrix<Scalar>(ap_positions);
  g.ap_positions = ap_positions;
  g.true_location = samples.front()->true_location;
  g.node_features.resize(static_cast<Index>(samples.size()), fx.output_dim());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i]->rp_index != samples.front()->rp_index) throw DataError("build_graph: samples from different RPs");
    g.node_features.row(static_cast<Index>(i)) = extract_feature(fx, ps, sample_to_image(*samples[i])).transpose();
  }
  return g;
}

std::vector<GraphInput> dataset_graphs(const Dataset& ds, const std::vector<int>& ap_subset, const DenoiseConfig& denoise) {
  std::vector<int> aps = ap_subset;
  if (aps.empty())
    for (int i = 0; i < static_cast<int>(ds.config.aps.size()); ++i) aps.push_back(i);
  std::vector<Vec2> positions;
  for (int a : aps) positions.push_back(ds.config.aps.at(a).position);
  std::vector<GraphInput> out;
  out.reserve(static_cast<std::size_t>(ds.config.rp_count()) * ds.samples_per_rp);
  for (int rp = 0; rp < ds.config.rp_count(); ++rp)
    for (int s = 0; s < ds.samples_per_rp; ++s) {
      std::vector<const CsiSample*> samples;
      for (int a : aps) samples.push_back(&ds.record(rp, s, a));
      out.push_back(build_graph_input(samples, positions, ds.config.room_extent, denoise));
    }
  return out;
}

GraphBatch make_batch(const std::vector<const RowMatrix*>& adjacencies, bool self_loops) {
  if (adjacencies.empty()) throw ShapeError("make_batch: no graphs");
  GraphBatch b;
  Index total = 0;
  for (const RowMatrix* a : adjacencies) {
    if (a->rows() != a->cols() || a->rows() < 1) throw ShapeError("make_batch: adjacency must be square and non-empty");
    b.offsets.push_back(total);
    total += a->rows();
  }
  const Index nb = static_cast<Index>(adjacencies.size());
  std::vector<Eigen::Triplet<Scalar, Index>> prop, pool, bcast;
  for (Index i = 0; i < nb; ++i) {
    const RowMatrix& a = *adjacencies[static_cast<std::size_t>(i)];
    const Index off = b.offsets[static_cast<std::size_t>(i)];
    const Index n = a.rows();
    const RowMatrix p = propagation_matrix(a, self_loops);
    for (Index r = 0; r < n; ++r) {
      for (Index c = 0; c < n; ++c)
        if (p(r, c) != 0.0) prop.emplace_back(off + r, off + c, p(r, c));
      pool.emplace_back(i, off + r, 1.0 / static_cast<Scalar>(n));
      bcast.emplace_back(off + r, i, 1.0);
    }
  }
  b.propagation.resize(total, total);
  b.propagation.setFromTriplets(prop.begin(), prop.end());
  b.pooling.resize(nb, total);
  b.pooling.setFromTriplets(pool.begin(), pool.end());
  b.broadcast.resize(total, nb);
  b.broadcast.setFromTriplets(bcast.begin(), bcast.end());
  return b;
}

}  // namespace csiloc
