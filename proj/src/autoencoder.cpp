#include "csiloc/autoencoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace csiloc {

void AutoencoderConfig::validate() const {
  if (grid < 1) throw ConfigError("autoencoder: grid must be >= 1");
  if (encoder.empty()) throw ConfigError("autoencoder: at least one encoder layer");
  for (Index w : encoder)
    if (w < 1) throw ConfigError("autoencoder: layer widths must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("autoencoder: dropout must lie in [0, 1)");
  if (epochs < 0 || batch < 1 || !(lr >= 0.0)) throw ConfigError("autoencoder: invalid training schedule");
}

Vector node_descriptor(const CsiImage& image, int grid) {
  const Index n = image.n_img;
  const Index g = grid;
  Vector out(3 * g * g);
  Index k = 0;
  for (int c = 0; c < 3; ++c)
    for (Index i = 0; i < g; ++i) {
      const Index r0 = i * n / g, r1 = std::max(r0 + 1, ((i + 1) * n + g - 1) / g);
      for (Index j = 0; j < g; ++j) {
        const Index c0 = j * n / g, c1 = std::max(c0 + 1, ((j + 1) * n + g - 1) / g);
        out[k++] = image.channels[c].block(r0, c0, r1 - r0, c1 - c0).mean();
      }
    }
  return out;
}

RowMatrix graph_descriptors(const GraphInput& graph, int grid) {
  RowMatrix m(graph.nodes(), 3 * static_cast<Index>(grid) * grid);
  for (Index i = 0; i < graph.nodes(); ++i) m.row(i) = node_descriptor(graph.images[static_cast<std::size_t>(i)], grid).transpose();
  return m;
}

GraphAutoencoder::GraphAutoencoder(AutoencoderConfig cfg, std::string prefix) : cfg_(std::move(cfg)), prefix_(std::move(prefix)) {
  cfg_.validate();
}

void GraphAutoencoder::init(ParamSet& ps, std::mt19937_64& rng) const {
  Index in = cfg_.descriptor_dim();
  for (std::size_t i = 0; i < cfg_.encoder.size(); ++i) {
    add_linear(ps, prefix_ + ".enc" + std::to_string(i + 1), in, cfg_.encoder[i], rng);
    in = cfg_.encoder[i];
  }
  for (std::size_t i = 0; i < cfg_.encoder.size(); ++i) {
    const std::size_t back = cfg_.encoder.size() - 1 - i;
    const Index out = back == 0 ? cfg_.descriptor_dim() : cfg_.encoder[back - 1];
    add_linear(ps, prefix_ + ".dec" + std::to_string(i + 1), in, out, rng);
    in = out;
  }
}

ad::Var GraphAutoencoder::encode(Binding& b, ad::Var nodes, const GraphBatch& batch, const ForwardOptions& opt) const {
  if (nodes.shape().size() != 2 || nodes.shape()[1] != cfg_.descriptor_dim() || nodes.shape()[0] != batch.nodes())
    throw ShapeError("autoencoder: node descriptors do not match batch, got " + ad::shape_str(nodes.shape()));
  ad::Var h = nodes;
  for (std::size_t i = 0; i < cfg_.encoder.size(); ++i) {
    h = ad::relu(linear(b, prefix_ + ".enc" + std::to_string(i + 1), ad::matmul(batch.propagation, h)));
    h = dropout(h, opt);
  }
  return ad::matmul(batch.pooling, h);
}

ad::Var GraphAutoencoder::decode(Binding& b, ad::Var embeddings, const GraphBatch& batch, const ForwardOptions&) const {
  ad::Var h = ad::matmul(batch.broadcast, embeddings);
  const std::size_t layers = cfg_.encoder.size();
  for (std::size_t i = 0; i < layers; ++i) {
    h = linear(b, prefix_ + ".dec" + std::to_string(i + 1), ad::matmul(batch.propagation, h));
    if (i + 1 < layers) h = ad::relu(h);
  }
  return h;
}

ad::Var GraphAutoencoder::batch_nodes(ad::Tape& tape, const std::vector<const GraphInput*>& graphs) const {
  Index total = 0;
  for (const GraphInput* g : graphs) total += g->nodes();
  RowMatrix m(total, cfg_.descriptor_dim());
  Index off = 0;
  for (const GraphInput* g : graphs) {
    m.middleRows(off, g->nodes()) = graph_descriptors(*g, cfg_.grid);
    off += g->nodes();
  }
  return tape.constant(ad::Tensor::from_matrix(m));
}

namespace {

GraphBatch batch_of(const std::vector<const GraphInput*>& graphs) {
  std::vector<const RowMatrix*> adj;
  for (const GraphInput* g : graphs) adj.push_back(&g->adjacency);
  return make_batch(adj);
}

}  // namespace

ad::Var GraphAutoencoder::loss(Binding& b, const std::vector<const GraphInput*>& graphs, const ForwardOptions& opt) const {
  if (graphs.empty()) throw UsageError("autoencoder: empty batch");
  const GraphBatch batch = batch_of(graphs);
  ad::Var nodes = batch_nodes(b.tape(), graphs);
  ad::Var recon = decode(b, encode(b, nodes, batch, opt), batch, opt);
  return ad::mean_squared_error(recon, nodes.value());
}

RowMatrix GraphAutoencoder::embed(ParamSet& ps, const std::vector<const GraphInput*>& graphs, std::size_t batch) const {
  RowMatrix out(static_cast<Index>(graphs.size()), cfg_.embedding_dim());
  batch = std::max<std::size_t>(batch, 1);
  for (std::size_t i = 0; i < graphs.size(); i += batch) {
    std::vector<const GraphInput*> chunk(graphs.begin() + static_cast<std::ptrdiff_t>(i),
                                         graphs.begin() + static_cast<std::ptrdiff_t>(std::min(graphs.size(), i + batch)));
    ad::Tape tape;
    Binding b(tape, ps, false);
    const GraphBatch gb = batch_of(chunk);
    ad::Var h = encode(b, batch_nodes(tape, chunk), gb, ForwardOptions::eval());
    out.middleRows(static_cast<Index>(i), static_cast<Index>(chunk.size())) = h.value().matrix();
  }
  return out;
}

Scalar GraphAutoencoder::reconstruction_loss(ParamSet& ps, const std::vector<const GraphInput*>& graphs) const {
  Scalar total = 0.0;
  Index count = 0;
  for (std::size_t i = 0; i < graphs.size(); i += 128) {
    std::vector<const GraphInput*> chunk(graphs.begin() + static_cast<std::ptrdiff_t>(i),
                                         graphs.begin() + static_cast<std::ptrdiff_t>(std::min(graphs.size(), i + 128)));
    ad::Tape tape;
    Binding b(tape, ps, false);
    ad::Var l = loss(b, chunk, ForwardOptions::eval());
    Index n = 0;
    for (const GraphInput* g : chunk) n += g->nodes();
    total += l.value().item() * static_cast<Scalar>(n);
    count += n;
  }
  return count ? total / static_cast<Scalar>(count) : 0.0;
}

TrainedAutoencoder train_autoencoder(const std::vector<std::vector<const GraphInput*>>& scenarios,
                                     const AutoencoderConfig& cfg, std::uint64_t seed) {
  if (scenarios.size() < 2) throw UsageError("train_autoencoder: at least two historical scenarios required");
  std::vector<const GraphInput*> all;
  for (const auto& s : scenarios) all.insert(all.end(), s.begin(), s.end());
  if (all.empty()) throw UsageError("train_autoencoder: no graphs");

  TrainedAutoencoder out{GraphAutoencoder(cfg), ParamSet{}, 0.0, {}};
  std::mt19937_64 init_rng = substream(seed, 0xae);
  out.model.init(out.params, init_rng);
  out.initial_loss = out.model.reconstruction_loss(out.params, all);

  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng = substream(seed, 0xae, epoch + 1);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(cfg.batch)) {
      std::vector<const GraphInput*> chunk;
      for (std::size_t j = i; j < std::min(order.size(), i + static_cast<std::size_t>(cfg.batch)); ++j) chunk.push_back(all[order[j]]);
      ForwardOptions opt;
      opt.dropout = cfg.dropout;
      opt.rng = &rng;
      ad::Tape tape;
      Binding b(tape, out.params);
      try {
        ad::Var l = out.model.loss(b, chunk, opt);
        tape.backward(l);
      } catch (const NumericalError& e) {
        throw TrainingError("autoencoder diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      b.collect_grads();
      sgd_step(out.params, cfg.lr);
    }
    out.epoch_loss.push_back(out.model.reconstruction_loss(out.params, all));
    if (!std::isfinite(out.epoch_loss.back())) throw TrainingError("autoencoder diverged at epoch " + std::to_string(epoch));
  }
  return out;
}

}  // namespace csiloc
