#include "csiloc/gnn.hpp"

#include <map>

namespace csiloc {

GnnLocalizer::GnnLocalizer(GnnConfig cfg, std::string prefix) : cfg_(std::move(cfg)), prefix_(std::move(prefix)) {
  if (cfg_.input_dim < 1 || cfg_.hidden.empty()) throw ConfigError("gnn: invalid layer sizes");
  for (Index h : cfg_.hidden)
    if (h < 1) throw ConfigError("gnn: layer widths must be positive");
}

void GnnLocalizer::init(ParamSet& ps, std::mt19937_64& rng) const {
  Index in = cfg_.input_dim;
  for (std::size_t g = 0; g < cfg_.hidden.size(); ++g) {
    const std::string p = prefix_ + ".gc" + std::to_string(g + 1);
    add_linear(ps, p, in, cfg_.hidden[g], rng);
    add_batchnorm(ps, p + ".bn", cfg_.hidden[g]);
    in = cfg_.hidden[g];
  }
  add_linear(ps, prefix_ + ".out", in, 2, rng);
}

ad::Var GnnLocalizer::forward(Binding& b, ad::Var nodes, const GraphBatch& batch, const ForwardOptions& opt) const {
  const auto& s = nodes.shape();
  if (s.size() != 2 || s[1] != cfg_.input_dim)
    throw ShapeError("gnn: expected [N, " + std::to_string(cfg_.input_dim) + "] node features, got " + ad::shape_str(s));
  if (s[0] != batch.nodes()) throw ShapeError("gnn: node count does not match the graph batch");
  ad::Var h = nodes;
  for (std::size_t g = 0; g < cfg_.hidden.size(); ++g) {
    const std::string p = prefix_ + ".gc" + std::to_string(g + 1);
    h = linear(b, p, ad::matmul(batch.propagation, h));
    h = ad::relu(batchnorm(b, p + ".bn", h, opt));
  }
  ad::Var pooled = ad::matmul(batch.pooling, h);
  return linear(b, prefix_ + ".out", pooled);
}

Vec2 gnn_forward(const CsiGraph& graph, const GnnLocalizer& gnn, ParamSet& ps, const ForwardOptions& opt) {
  const Index n = graph.node_features.rows();
  if (n < 1) throw ShapeError("gnn_forward: graph has no nodes");
  if (graph.adjacency.rows() != n || graph.adjacency.cols() != n) throw ShapeError("gnn_forward: adjacency does not match node count");
  ad::Tape tape;
  Binding b(tape, ps, false);
  const GraphBatch batch = make_batch({&graph.adjacency});
  ad::Var out = gnn.forward(b, tape.constant(ad::Tensor::from_matrix(graph.node_features)), batch, opt);
  return Vec2(out.value().data()[0], out.value().data()[1]);
}

Scalar mse_loss(const Vec2& pred, const Vec2& truth) { return (pred - truth).squaredNorm(); }

Scalar mse_loss(const std::vector<Vec2>& pred, const std::vector<Vec2>& truth, ad::Reduction reduction) {
  if (pred.size() != truth.size()) throw ShapeError("mse_loss: size mismatch");
  Scalar s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += mse_loss(pred[i], truth[i]);
  if (reduction == ad::Reduction::Mean && !pred.empty()) s /= static_cast<Scalar>(pred.size());
  return s;
}

namespace {

GnnConfig gnn_config(const LocalizerConfig& cfg) {
  GnnConfig g;
  g.input_dim = cfg.extractor.feature_dim;
  g.hidden = cfg.gnn_hidden;
  return g;
}

}  // namespace

Localizer::Localizer(LocalizerConfig cfg) : cfg_(std::move(cfg)), extractor_(cfg_.extractor), gnn_(gnn_config(cfg_)) {}

void Localizer::init(ParamSet& ps, std::mt19937_64& rng) const {
  extractor_.init(ps, rng);
  gnn_.init(ps, rng);
}

ParamSet Localizer::make_params(std::uint64_t seed) const {
  ParamSet ps;
  std::mt19937_64 rng(splitmix64(seed));
  init(ps, rng);
  return ps;
}

ad::Var Localizer::forward(Binding& b, const std::vector<const GraphInput*>& graphs, const ForwardOptions& opt) const {
  if (graphs.empty()) throw UsageError("localizer: empty batch");
  // Group node images by size; remember each node's slot in the grouped order.
  std::map<Index, std::vector<const CsiImage*>> groups;
  std::vector<std::pair<Index, Index>> slot;  // (size, position within group)
  std::vector<const RowMatrix*> adj;
  for (const GraphInput* g : graphs) {
    if (g->images.empty()) throw ShapeError("localizer: graph without nodes");
    if (g->adjacency.rows() != g->nodes()) throw ShapeError("localizer: adjacency does not match node count");
    adj.push_back(&g->adjacency);
    for (const CsiImage& img : g->images) {
      auto& v = groups[img.n_img];
      slot.emplace_back(img.n_img, static_cast<Index>(v.size()));
      v.push_back(&img);
    }
  }
  ad::Tape& tape = b.tape();
  ad::Var features;
  if (groups.size() == 1) {
    features = extractor_.extract(b, tape.constant(stack_images(groups.begin()->second)), opt);
  } else {
    std::map<Index, Index> base;
    std::vector<ad::Var> parts;
    Index off = 0;
    for (const auto& [n, imgs] : groups) {
      base[n] = off;
      off += static_cast<Index>(imgs.size());
      parts.push_back(extractor_.extract(b, tape.constant(stack_images(imgs)), opt));
    }
    std::vector<Index> order;
    order.reserve(slot.size());
    for (const auto& [n, pos] : slot) order.push_back(base[n] + pos);
    features = ad::take_rows(ad::concat(parts, 0), order);
  }
  return gnn_.forward(b, features, make_batch(adj), opt);
}

ad::Var Localizer::loss(Binding& b, const std::vector<const GraphInput*>& graphs, const ForwardOptions& opt) const {
  ad::Var pred = forward(b, graphs, opt);
  ad::Tensor target({static_cast<Index>(graphs.size()), 2});
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    const Vec2 t = graphs[i]->normalized_target();
    target.data()[2 * i] = t.x();
    target.data()[2 * i + 1] = t.y();
  }
  return ad::mse_loss(pred, target, cfg_.reduction);
}

std::vector<Vec2> Localizer::predict(ParamSet& ps, const std::vector<const GraphInput*>& graphs, std::size_t batch) const {
  std::vector<Vec2> out;
  out.reserve(graphs.size());
  batch = std::max<std::size_t>(batch, 1);
  for (std::size_t i = 0; i < graphs.size(); i += batch) {
    std::vector<const GraphInput*> chunk(graphs.begin() + static_cast<std::ptrdiff_t>(i),
                                         graphs.begin() + static_cast<std::ptrdiff_t>(std::min(graphs.size(), i + batch)));
    ad::Tape tape;
    Binding b(tape, ps, false);
    const ad::Tensor& v = forward(b, chunk, ForwardOptions::eval()).value();
    for (std::size_t j = 0; j < chunk.size(); ++j)
      out.push_back(Vec2(v.data()[2 * j], v.data()[2 * j + 1]).cwiseProduct(chunk[j]->room_extent));
  }
  return out;
}

std::vector<const GraphInput*> pointers(const std::vector<GraphInput>& graphs) {
  std::vector<const GraphInput*> out;
  out.reserve(graphs.size());
  for (const auto& g : graphs) out.push_back(&g);
  return out;
}

}  // namespace csiloc
