#include "csiloc/meta.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include "csiloc/scenario_io.hpp"

namespace csiloc {

using nlohmann::json;

void MetaConfig::validate() const {
  auto rate = [](Scalar v, const char* name) {
    if (!(v >= 0.0 && v < 1.0)) throw ConfigError(std::string("meta: ") + name + " must lie in [0, 1)");
  };
  rate(inner_lr, "inner_lr");
  rate(outer_lr, "outer_lr");
  rate(finetune_lr, "finetune_lr");
  if (epochs < 0 || inner_steps < 0 || finetune_steps < 0) throw ConfigError("meta: step counts must be non-negative");
  if (meta_batch < 1 || groups_per_scenario < 1) throw ConfigError("meta: meta_batch and groups_per_scenario must be >= 1");
  if (meta_batch > groups_per_scenario) throw ConfigError("meta: meta_batch exceeds groups_per_scenario");
  if (task_size < 2) throw ConfigError("meta: task_size must be >= 2 so support and query are non-empty");
  if (finetune_batch < 1) throw ConfigError("meta: finetune_batch must be >= 1");
}

TaskSampler::TaskSampler(const std::vector<std::vector<const GraphInput*>>& scenarios) {
  for (const auto& graphs : scenarios) {
    std::map<int, std::vector<const GraphInput*>> rp;
    for (const GraphInput* g : graphs) rp[g->rp_index].push_back(g);
    for (auto& [k, v] : rp) by_key_.push_back(std::move(v));
  }
  if (by_key_.empty()) throw DataError("task sampler: no graphs");
}

std::vector<TaskSplit> TaskSampler::sample(const MetaConfig& cfg, std::mt19937_64& rng) const {
  const std::size_t groups = static_cast<std::size_t>(cfg.groups_per_scenario);
  if (by_key_.size() < groups)
    throw DataError("task sampler: " + std::to_string(by_key_.size()) + " RPs cannot form " + std::to_string(groups) + " groups");
  std::vector<std::size_t> keys(by_key_.size());
  std::iota(keys.begin(), keys.end(), 0);
  std::shuffle(keys.begin(), keys.end(), rng);
  std::vector<std::size_t> group_order(groups);
  std::iota(group_order.begin(), group_order.end(), 0);
  std::shuffle(group_order.begin(), group_order.end(), rng);

  std::vector<TaskSplit> out;
  for (int t = 0; t < cfg.meta_batch; ++t) {
    const std::size_t g = group_order[static_cast<std::size_t>(t)];
    const std::size_t begin = g * keys.size() / groups, end = (g + 1) * keys.size() / groups;
    std::vector<const GraphInput*> pool;
    for (std::size_t i = begin; i < end; ++i) pool.insert(pool.end(), by_key_[keys[i]].begin(), by_key_[keys[i]].end());
    const std::size_t n = std::min(pool.size(), static_cast<std::size_t>(cfg.task_size));
    if (n < 2) throw DataError("task sampler: group holds fewer than two graphs");
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    TaskSplit split;
    split.support.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n / 2));
    split.query.assign(pool.begin() + static_cast<std::ptrdiff_t>(n / 2), pool.begin() + static_cast<std::ptrdiff_t>(n));
    out.push_back(std::move(split));
  }
  return out;
}

Scalar compute_gradients(const Localizer& model, ParamSet& ps, const std::vector<const GraphInput*>& batch,
                         const ForwardOptions& opt, ParamSet& grad_dst, bool accumulate) {
  ad::Tape tape;
  Binding b(tape, ps);
  ad::Var l = model.loss(b, batch, opt);
  tape.backward(l);
  b.collect_grads(grad_dst, accumulate);
  return l.value().item();
}

namespace {

ForwardOptions frozen_stats() {
  ForwardOptions o;
  o.update_running_stats = false;
  return o;
}

}  // namespace

ParamSet inner_adapt(const Localizer& model, const ParamSet& theta, const std::vector<const GraphInput*>& support,
                     const MetaConfig& cfg, std::vector<Scalar>* losses) {
  if (support.empty()) throw UsageError("inner_adapt: empty support set");
  ParamSet adapted = theta;
  adapted.clear_grads();
  for (int step = 0; step < cfg.inner_steps; ++step) {
    Scalar l = 0.0;
    try {
      l = compute_gradients(model, adapted, support, frozen_stats(), adapted, false);
    } catch (const NumericalError& e) {
      throw TrainingError("inner_adapt diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (losses) losses->push_back(l);
    sgd_step(adapted, cfg.inner_lr);
  }
  return adapted;
}

std::mt19937_64 meta_epoch_rng(std::uint64_t seed, int epoch) { return substream(seed, 0x3e7a, epoch); }

MetaResult meta_train(const Localizer& model, ParamSet theta, const TaskSampler& sampler, const MetaConfig& cfg,
                      std::uint64_t seed) {
  cfg.validate();
  MetaResult out;
  theta.clear_grads();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng = meta_epoch_rng(seed, epoch);
    const auto tasks = sampler.sample(cfg, rng);
    EpochRecord rec;
    rec.epoch = epoch;
    for (const TaskSplit& task : tasks) {
      std::vector<Scalar> inner;
      ParamSet adapted = inner_adapt(model, theta, task.support, cfg, &inner);
      if (!inner.empty()) rec.inner_losses.push_back(inner.back());
      try {
        rec.outer_loss += compute_gradients(model, adapted, task.query, ForwardOptions{}, theta, true);
      } catch (const NumericalError& e) {
        throw TrainingError("meta_train diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      theta.copy_buffers_from(adapted);
    }
    rec.outer_loss /= static_cast<Scalar>(tasks.size());
    sgd_step(theta, cfg.outer_lr);
    out.log.push_back(std::move(rec));
  }
  out.params = std::move(theta);
  return out;
}

MetaResult meta_train_scenario(const Localizer& model, const std::vector<const GraphInput*>& graphs,
                               const MetaConfig& cfg, std::uint64_t seed) {
  return meta_train(model, model.make_params(seed), TaskSampler({graphs}), cfg, seed);
}

TrainResult train_sgd(const Localizer& model, ParamSet init, const std::vector<const GraphInput*>& graphs, int steps,
                      Scalar lr, int batch, std::uint64_t seed) {
  if (graphs.empty()) throw UsageError("train_sgd: no training graphs");
  if (batch < 1) throw ConfigError("train_sgd: batch must be >= 1");
  TrainResult out{std::move(init), {}};
  out.params.clear_grads();
  std::mt19937_64 rng = substream(seed, 0x5d6);
  std::vector<std::size_t> order(graphs.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::size_t bs = std::min(graphs.size(), static_cast<std::size_t>(batch));
  for (int step = 0; step < steps; ++step) {
    std::vector<const GraphInput*> mb;
    while (mb.size() < bs) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      mb.push_back(graphs[order[cursor++]]);
    }
    try {
      out.losses.push_back(compute_gradients(model, out.params, mb, ForwardOptions{}, out.params, false));
    } catch (const NumericalError& e) {
      throw TrainingError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    sgd_step(out.params, lr);
  }
  if (steps > 0) recalibrate_batchnorm(model, out.params, graphs, bs);
  return out;
}

void recalibrate_batchnorm(const Localizer& model, ParamSet& ps, const std::vector<const GraphInput*>& graphs,
                           std::size_t batch) {
  if (graphs.empty() || batch == 0) throw UsageError("recalibrate_batchnorm: no graphs");
  ForwardOptions opt;
  int chunk = 0;
  for (std::size_t i = 0; i < graphs.size(); i += batch, ++chunk) {
    const std::vector<const GraphInput*> part(graphs.begin() + static_cast<std::ptrdiff_t>(i),
                                              graphs.begin() + static_cast<std::ptrdiff_t>(std::min(graphs.size(), i + batch)));
    opt.bn_momentum = 1.0 / (chunk + 1);
    ad::Tape tape;
    Binding b(tape, ps, false);
    model.forward(b, part, opt);
  }
}

TrainResult finetune(const Localizer& model, const ParamSet& theta, const std::vector<const GraphInput*>& support,
                     const MetaConfig& cfg, std::uint64_t seed) {
  if (support.empty()) throw UsageError("finetune: empty support set");
  if (cfg.finetune_batch < 1) throw ConfigError("finetune: finetune_batch must be >= 1");
  TrainResult out{theta, {}};
  out.params.clear_grads();
  std::mt19937_64 rng = substream(seed, 0xf7e);
  std::vector<const GraphInput*> order = support;
  const std::size_t bs = std::min(support.size(), static_cast<std::size_t>(cfg.finetune_batch));
  const bool mean = model.config().reduction == ad::Reduction::Mean;
  for (int step = 0; step < cfg.finetune_steps; ++step) {
    // one full-support gradient, accumulated over chunks
    std::shuffle(order.begin(), order.end(), rng);
    Scalar loss = 0.0;
    for (std::size_t i = 0; i < order.size(); i += bs) {
      const std::vector<const GraphInput*> part(order.begin() + static_cast<std::ptrdiff_t>(i),
                                                order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + bs)));
      const Scalar w = mean ? static_cast<Scalar>(part.size()) / static_cast<Scalar>(order.size()) : 1.0;
      try {
        ad::Tape tape;
        Binding b(tape, out.params);
        ad::Var l = ad::scale(model.loss(b, part, ForwardOptions{}), w);
        tape.backward(l);
        b.collect_grads(out.params, i > 0);
        loss += l.value().item();
      } catch (const NumericalError& e) {
        throw TrainingError("fine-tuning diverged at step " + std::to_string(step) + ": " + e.what());
      }
    }
    out.losses.push_back(loss);
    sgd_step(out.params, cfg.finetune_lr);
  }
  if (cfg.finetune_steps > 0) recalibrate_batchnorm(model, out.params, support, bs);
  return out;
}

Scalar evaluate_loss(const Localizer& model, ParamSet& ps, const std::vector<const GraphInput*>& graphs) {
  if (graphs.empty()) throw UsageError("evaluate_loss: no graphs");
  std::vector<Vec2> pred, truth;
  const auto meters = model.predict(ps, graphs);
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    pred.push_back(meters[i].cwiseQuotient(graphs[i]->room_extent));
    truth.push_back(graphs[i]->normalized_target());
  }
  return mse_loss(pred, truth, model.config().reduction);
}

// Config serialisation ------------------------------------------------------

namespace {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

const char* reduction_name(ad::Reduction r) { return r == ad::Reduction::Sum ? "sum" : "mean"; }

ad::Reduction reduction_from(const std::string& s) {
  if (s == "sum") return ad::Reduction::Sum;
  if (s == "mean") return ad::Reduction::Mean;
  throw ConfigError("unknown loss reduction '" + s + "'");
}

}  // namespace

json to_json(const MetaConfig& c) {
  return {{"inner_lr", c.inner_lr},
          {"outer_lr", c.outer_lr},
          {"epochs", c.epochs},
          {"meta_batch", c.meta_batch},
          {"inner_steps", c.inner_steps},
          {"finetune_steps", c.finetune_steps},
          {"groups_per_scenario", c.groups_per_scenario},
          {"task_size", c.task_size},
          {"finetune_lr", c.finetune_lr},
          {"finetune_batch", c.finetune_batch}};
}

MetaConfig meta_config_from_json(const json& j) {
  reject_unknown(j, {"inner_lr", "outer_lr", "epochs", "meta_batch", "inner_steps", "finetune_steps",
                     "groups_per_scenario", "task_size", "finetune_lr", "finetune_batch"},
                 "meta");
  MetaConfig c;
  read_opt(j, "inner_lr", c.inner_lr);
  read_opt(j, "outer_lr", c.outer_lr);
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "meta_batch", c.meta_batch);
  read_opt(j, "inner_steps", c.inner_steps);
  read_opt(j, "finetune_steps", c.finetune_steps);
  read_opt(j, "groups_per_scenario", c.groups_per_scenario);
  read_opt(j, "task_size", c.task_size);
  read_opt(j, "finetune_lr", c.finetune_lr);
  read_opt(j, "finetune_batch", c.finetune_batch);
  c.validate();
  return c;
}

json to_json(const LocalizerConfig& c) {
  return {{"spp_levels", c.extractor.spp.levels},
          {"channels", c.extractor.spp.channels},
          {"spp_pool", c.extractor.spp.pool == PoolKind::Max ? "max" : "mean"},
          {"feature_dim", c.extractor.feature_dim},
          {"gnn_hidden", c.gnn_hidden},
          {"reduction", reduction_name(c.reduction)}};
}

LocalizerConfig localizer_config_from_json(const json& j) {
  reject_unknown(j, {"spp_levels", "channels", "spp_pool", "feature_dim", "gnn_hidden", "reduction"}, "model");
  LocalizerConfig c;
  read_opt(j, "spp_levels", c.extractor.spp.levels);
  read_opt(j, "channels", c.extractor.spp.channels);
  if (j.contains("spp_pool")) {
    const auto s = j.at("spp_pool").get<std::string>();
    if (s == "max") c.extractor.spp.pool = PoolKind::Max;
    else if (s == "mean") c.extractor.spp.pool = PoolKind::Mean;
    else throw ConfigError("model: unknown spp_pool '" + s + "'");
  }
  read_opt(j, "feature_dim", c.extractor.feature_dim);
  read_opt(j, "gnn_hidden", c.gnn_hidden);
  if (j.contains("reduction")) c.reduction = reduction_from(j.at("reduction").get<std::string>());
  c.extractor.spp.validate();
  return c;
}

json to_json(const AutoencoderConfig& c) {
  return {{"grid", c.grid}, {"encoder", c.encoder}, {"dropout", c.dropout},
          {"epochs", c.epochs}, {"batch", c.batch}, {"lr", c.lr}};
}

AutoencoderConfig autoencoder_config_from_json(const json& j) {
  reject_unknown(j, {"grid", "encoder", "dropout", "epochs", "batch", "lr"}, "autoencoder");
  AutoencoderConfig c;
  read_opt(j, "grid", c.grid);
  read_opt(j, "encoder", c.encoder);
  read_opt(j, "dropout", c.dropout);
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "batch", c.batch);
  read_opt(j, "lr", c.lr);
  c.validate();
  return c;
}

// Scenario bank -------------------------------------------------------------

namespace {

constexpr char kEmbMagic[8] = {'C', 'S', 'I', 'L', 'E', 'M', 'B', '1'};

template <typename T>
void put(std::string& buf, const T& v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::string& buf, std::size_t& pos) {
  if (pos + sizeof(T) > buf.size()) throw DataError("embedding archive truncated");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

void write_embeddings(const std::vector<std::pair<std::string, RowMatrix>>& sets, const std::filesystem::path& path) {
  std::string buf(kEmbMagic, 8);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(sets.size()));
  for (const auto& [id, m] : sets) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(id.size()));
    buf += id;
    put<std::uint64_t>(buf, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(buf, static_cast<std::uint64_t>(m.cols()));
    buf.append(reinterpret_cast<const char*>(m.data()), sizeof(Scalar) * static_cast<std::size_t>(m.size()));
  }
  put<std::uint64_t>(buf, fnv1a(buf));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

std::vector<std::pair<std::string, RowMatrix>> read_embeddings(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("missing embedding archive " + path.string());
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 20 || buf.compare(0, 8, std::string(kEmbMagic, 8)) != 0) throw DataError("not an embedding archive: " + path.string());
  std::size_t tail = buf.size() - sizeof(std::uint64_t);
  std::uint64_t stored = take<std::uint64_t>(buf, tail);
  if (stored != fnv1a(std::string_view(buf).substr(0, buf.size() - sizeof(std::uint64_t))))
    throw DigestMismatch("embedding archive checksum mismatch: " + path.string());
  std::size_t pos = 8;
  const auto n = take<std::uint32_t>(buf, pos);
  std::vector<std::pair<std::string, RowMatrix>> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto len = take<std::uint32_t>(buf, pos);
    std::string id = buf.substr(pos, len);
    pos += len;
    const auto rows = take<std::uint64_t>(buf, pos);
    const auto cols = take<std::uint64_t>(buf, pos);
    RowMatrix m(static_cast<Index>(rows), static_cast<Index>(cols));
    const std::size_t bytes = sizeof(Scalar) * rows * cols;
    if (pos + bytes > buf.size()) throw DataError("embedding archive truncated");
    std::memcpy(m.data(), buf.data() + pos, bytes);
    pos += bytes;
    out.emplace_back(std::move(id), std::move(m));
  }
  return out;
}

std::vector<RowMatrix> ScenarioBank::embedding_sets() const {
  std::vector<RowMatrix> out;
  for (const auto& e : entries) out.push_back(e.embeddings);
  return out;
}

Selection ScenarioBank::select(const RowMatrix& new_embeddings) const {
  return select_scenario(embedding_sets(), new_embeddings);
}

void ScenarioBank::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "csiloc-bank";
  manifest["version"] = 1;
  manifest["model"] = to_json(model);
  manifest["autoencoder"] = to_json(autoencoder);
  manifest["autoencoder_params"] = hex_digest(autoencoder_params.checksum());
  autoencoder_params.save(dir / "autoencoder.params");
  std::vector<std::pair<std::string, RowMatrix>> emb;
  json list = json::array();
  for (const auto& e : entries) {
    const std::string file = "theta_" + e.id + ".params";
    e.params.save(dir / file);
    list.push_back({{"id", e.id},
                    {"config_digest", hex_digest(e.config_digest)},
                    {"params", file},
                    {"params_checksum", hex_digest(e.params.checksum())},
                    {"embeddings", e.embeddings.rows()},
                    {"metadata", e.metadata}});
    emb.emplace_back(e.id, e.embeddings);
  }
  manifest["scenarios"] = list;
  write_embeddings(emb, dir / "embeddings.bin");
  std::ofstream f(dir / "manifest.json");
  if (!f) throw DataError("cannot write bank manifest in " + dir.string());
  f << manifest.dump(2) << '\n';
}

ScenarioBank ScenarioBank::load(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw DataError("missing scenario bank manifest in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(f);
  } catch (const json::exception& e) {
    throw DataError(std::string("bank manifest: ") + e.what());
  }
  ScenarioBank bank;
  bank.model = localizer_config_from_json(manifest.at("model"));
  bank.autoencoder = autoencoder_config_from_json(manifest.at("autoencoder"));
  bank.autoencoder_params = ParamSet::load(dir / "autoencoder.params");
  if (hex_digest(bank.autoencoder_params.checksum()) != manifest.at("autoencoder_params").get<std::string>())
    throw DigestMismatch("autoencoder parameters do not match the bank manifest");
  const auto emb = read_embeddings(dir / "embeddings.bin");
  for (const auto& s : manifest.at("scenarios")) {
    BankEntry e;
    e.id = s.at("id").get<std::string>();
    e.config_digest = std::stoull(s.at("config_digest").get<std::string>(), nullptr, 16);
    e.params = ParamSet::load(dir / s.at("params").get<std::string>());
    if (hex_digest(e.params.checksum()) != s.at("params_checksum").get<std::string>())
      throw DigestMismatch("parameters of scenario '" + e.id + "' do not match the bank manifest");
    e.metadata = s.value("metadata", json::object());
    auto it = std::find_if(emb.begin(), emb.end(), [&](const auto& p) { return p.first == e.id; });
    if (it == emb.end()) throw DataError("no embeddings stored for scenario '" + e.id + "'");
    e.embeddings = it->second;
    bank.entries.push_back(std::move(e));
  }
  return bank;
}

}  // namespace csiloc
