#include "csiloc/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <thread>

namespace csiloc {

using nlohmann::json;

namespace {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

// Runs fn(0..n-1) on up to `jobs` threads; the first exception is rethrown.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(jobs, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

ScenarioConfig scenario_entry(const json& j, const json& overrides, const std::filesystem::path& base_dir) {
  ScenarioConfig cfg;
  if (j.is_string())
    cfg = resolve_scenario(j.get<std::string>(), base_dir);
  else if (j.is_object() && j.contains("preset")) {
    json merged = scenario_to_json(resolve_scenario(j.at("preset").get<std::string>(), base_dir));
    json rest = j;
    rest.erase("preset");
    merged.merge_patch(rest);
    cfg = scenario_from_json(merged);
  } else if (j.is_object())
    cfg = scenario_from_json(j);
  else
    throw ConfigError("experiment: scenario entries must be names, paths or objects");
  if (!overrides.is_null() && !overrides.empty()) {
    json merged = scenario_to_json(cfg);
    merged.merge_patch(overrides);
    cfg = scenario_from_json(merged);
  }
  cfg.validate();
  return cfg;
}

std::string unique_id(const std::string& name, std::set<std::string>& used) {
  std::string id;
  for (char c : name) id += (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-') ? c : '_';
  if (id.empty()) id = "scenario";
  std::string out = id;
  for (int k = 2; used.count(out); ++k) out = id + "_" + std::to_string(k);
  used.insert(out);
  return out;
}

Scalar mean_of(const std::vector<Scalar>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<Scalar>(v.size());
}

Scalar pstd_of(const std::vector<Scalar>& v) {
  if (v.empty()) return 0.0;
  const Scalar m = mean_of(v);
  Scalar s = 0.0;
  for (Scalar x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<Scalar>(v.size()));
}

}  // namespace

bool DeviceSweep::empty() const {
  return bandwidths.empty() && antennas.empty() && ap_counts.empty() && rp_spacings.empty() && finetune_samples.empty();
}

void ExperimentSpec::validate() const {
  if (seeds.empty()) throw ConfigError("experiment: seeds must be non-empty");
  if (historical.empty()) throw ConfigError("experiment: at least one historical scenario required");
  if (budgets.train_samples_per_rp < 1 || budgets.finetune_samples_per_rp < 1 || budgets.test_samples_per_rp < 1)
    throw ConfigError("experiment: sample budgets must be >= 1");
  if (supervised.steps < 0 || supervised.batch < 1 || !(supervised.lr >= 0.0 && supervised.lr < 1.0))
    throw ConfigError("experiment: invalid supervised schedule");
  if (embedding_samples < 1) throw ConfigError("experiment: embedding_samples must be >= 1");
  meta.validate();
  autoencoder.validate();
  for (int b : sweep.bandwidths)
    if (b != 20 && b != 40 && b != 80 && b != 160) throw ConfigError("experiment: unsupported sweep bandwidth " + std::to_string(b));
  for (const auto& [tx, rx] : sweep.antennas)
    if (tx < 1 || rx < 1) throw ConfigError("experiment: antenna counts must be >= 1");
  for (int k : sweep.ap_counts)
    if (k < 1 || k > static_cast<int>(target.aps.size())) throw ConfigError("experiment: AP count " + std::to_string(k) + " out of range");
  for (Scalar s : sweep.rp_spacings)
    if (!(s > 0.0)) throw ConfigError("experiment: RP spacing must be positive");
  for (int f : sweep.finetune_samples)
    if (f < 1) throw ConfigError("experiment: fine-tune sample counts must be >= 1");
}

ExperimentSpec experiment_from_json(const json& j, const std::filesystem::path& base_dir) {
  reject_unknown(j, {"name", "historical", "new", "scenario_overrides", "budgets", "model", "meta", "autoencoder",
                     "supervised", "embedding_samples", "sweep", "baselines", "seeds"},
                 "experiment");
  ExperimentSpec s;
  try {
    read_opt(j, "name", s.name);
    const json overrides = j.value("scenario_overrides", json::object());
    if (!j.contains("historical") || !j.at("historical").is_array()) throw ConfigError("experiment: 'historical' list required");
    if (!j.contains("new")) throw ConfigError("experiment: 'new' scenario required");
    for (const auto& h : j.at("historical")) s.historical.push_back(scenario_entry(h, overrides, base_dir));
    s.target = scenario_entry(j.at("new"), overrides, base_dir);
    if (j.contains("budgets")) {
      const auto& b = j.at("budgets");
      reject_unknown(b, {"train_samples_per_rp", "finetune_samples_per_rp", "test_samples_per_rp"}, "budgets");
      read_opt(b, "train_samples_per_rp", s.budgets.train_samples_per_rp);
      read_opt(b, "finetune_samples_per_rp", s.budgets.finetune_samples_per_rp);
      read_opt(b, "test_samples_per_rp", s.budgets.test_samples_per_rp);
    }
    if (j.contains("model")) s.model = localizer_config_from_json(j.at("model"));
    if (j.contains("meta")) s.meta = meta_config_from_json(j.at("meta"));
    if (j.contains("autoencoder")) s.autoencoder = autoencoder_config_from_json(j.at("autoencoder"));
    if (j.contains("supervised")) {
      const auto& t = j.at("supervised");
      reject_unknown(t, {"steps", "lr", "batch"}, "supervised");
      read_opt(t, "steps", s.supervised.steps);
      read_opt(t, "lr", s.supervised.lr);
      read_opt(t, "batch", s.supervised.batch);
    }
    read_opt(j, "embedding_samples", s.embedding_samples);
    if (j.contains("sweep")) {
      const auto& w = j.at("sweep");
      reject_unknown(w, {"bandwidths", "antennas", "ap_counts", "rp_spacings", "finetune_samples"}, "sweep");
      read_opt(w, "bandwidths", s.sweep.bandwidths);
      read_opt(w, "ap_counts", s.sweep.ap_counts);
      read_opt(w, "rp_spacings", s.sweep.rp_spacings);
      read_opt(w, "finetune_samples", s.sweep.finetune_samples);
      if (w.contains("antennas"))
        for (const auto& a : w.at("antennas")) {
          if (!a.is_array() || a.size() != 2) throw ConfigError("sweep: antennas entries are [n_tx, n_rx]");
          s.sweep.antennas.emplace_back(a[0].get<int>(), a[1].get<int>());
        }
    }
    if (j.contains("baselines")) {
      s.baselines = {false, false, false};
      for (const auto& b : j.at("baselines")) {
        const auto name = b.get<std::string>();
        if (name == kPlainGnn) s.baselines.plain_gnn = true;
        else if (name == kRandomInit) s.baselines.random_init = true;
        else if (name == kPooledMeta) s.baselines.pooled_meta = true;
        else throw ConfigError("experiment: unknown baseline '" + name + "'");
      }
    }
    if (j.contains("seeds")) s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment: ") + e.what());
  }
  s.validate();
  return s;
}

json experiment_to_json(const ExperimentSpec& s) {
  json hist = json::array();
  for (const auto& h : s.historical) hist.push_back(scenario_to_json(h));
  json antennas = json::array();
  for (const auto& [tx, rx] : s.sweep.antennas) antennas.push_back({tx, rx});
  json baselines = json::array();
  if (s.baselines.plain_gnn) baselines.push_back(kPlainGnn);
  if (s.baselines.random_init) baselines.push_back(kRandomInit);
  if (s.baselines.pooled_meta) baselines.push_back(kPooledMeta);
  return {{"name", s.name},
          {"historical", hist},
          {"new", scenario_to_json(s.target)},
          {"budgets",
           {{"train_samples_per_rp", s.budgets.train_samples_per_rp},
            {"finetune_samples_per_rp", s.budgets.finetune_samples_per_rp},
            {"test_samples_per_rp", s.budgets.test_samples_per_rp}}},
          {"model", to_json(s.model)},
          {"meta", to_json(s.meta)},
          {"autoencoder", to_json(s.autoencoder)},
          {"supervised", {{"steps", s.supervised.steps}, {"lr", s.supervised.lr}, {"batch", s.supervised.batch}}},
          {"embedding_samples", s.embedding_samples},
          {"sweep",
           {{"bandwidths", s.sweep.bandwidths},
            {"antennas", antennas},
            {"ap_counts", s.sweep.ap_counts},
            {"rp_spacings", s.sweep.rp_spacings},
            {"finetune_samples", s.sweep.finetune_samples}}},
          {"baselines", baselines},
          {"seeds", s.seeds}};
}

ExperimentSpec load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open experiment spec " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_from_json(j, path.parent_path());
}

std::uint64_t experiment_digest(const ExperimentSpec& spec) { return fnv1a(experiment_to_json(spec).dump()); }

// Metrics ---------------------------------------------------------------------

MetricsRecord make_metrics(std::vector<Scalar> errors, int grid_points) {
  MetricsRecord r;
  r.errors = std::move(errors);
  r.mean = mean_of(r.errors);
  r.std = pstd_of(r.errors);
  grid_points = std::max(grid_points, 2);
  const Scalar top = r.errors.empty() ? 0.0 : *std::max_element(r.errors.begin(), r.errors.end());
  std::vector<Scalar> sorted = r.errors;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < grid_points; ++i) {
    const Scalar x = i + 1 == grid_points ? top : top * static_cast<Scalar>(i) / static_cast<Scalar>(grid_points - 1);
    r.cdf_grid.push_back(x);
    const auto count = std::upper_bound(sorted.begin(), sorted.end(), x) - sorted.begin();
    r.cdf.push_back(sorted.empty() ? 1.0 : static_cast<Scalar>(count) / static_cast<Scalar>(sorted.size()));
  }
  return r;
}

MetricsRecord evaluate(const Localizer& model, ParamSet& params, const std::vector<const GraphInput*>& test) {
  if (test.empty()) throw UsageError("evaluate: empty test set");
  const auto pred = model.predict(params, test);
  std::vector<Scalar> errors;
  errors.reserve(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) errors.push_back((pred[i] - test[i]->true_location).norm());
  MetricsRecord r = make_metrics(std::move(errors));
  r.provenance["params_checksum"] = hex_digest(params.checksum());
  r.provenance["test_graphs"] = test.size();
  return r;
}

json to_json(const MetricsRecord& r) {
  return {{"method", r.method}, {"scenario", r.scenario}, {"seed", r.seed},   {"tags", r.tags},
          {"mean", r.mean},     {"std", r.std},           {"errors", r.errors}, {"cdf_grid", r.cdf_grid},
          {"cdf", r.cdf},       {"provenance", r.provenance}};
}

MetricsRecord metrics_from_json(const json& j) {
  MetricsRecord r;
  try {
    r.method = j.at("method").get<std::string>();
    r.scenario = j.value("scenario", "");
    r.seed = j.value("seed", std::uint64_t{0});
    r.tags = j.value("tags", json::object());
    r.errors = j.at("errors").get<std::vector<Scalar>>();
    r.mean = j.at("mean").get<Scalar>();
    r.std = j.at("std").get<Scalar>();
    r.cdf_grid = j.value("cdf_grid", std::vector<Scalar>{});
    r.cdf = j.value("cdf", std::vector<Scalar>{});
    r.provenance = j.value("provenance", json::object());
  } catch (const json::exception& e) {
    throw DataError(std::string("metrics record: ") + e.what());
  }
  return r;
}

// Pipeline --------------------------------------------------------------------

ScenarioConfig realize(const ScenarioConfig& cfg, std::uint64_t seed, Role role) {
  ScenarioConfig out = cfg;
  out.realization = splitmix64(seed ^ (role == Role::Target ? 0x7a26e7ULL : 0x415ULL));
  return out;
}

std::vector<GraphInput> scenario_graphs(const ScenarioConfig& cfg, int samples_per_rp, int sample_offset, int jobs,
                                        const std::vector<int>& ap_subset) {
  return dataset_graphs(generate_dataset(cfg, samples_per_rp, sample_offset, jobs), ap_subset);
}

std::vector<const GraphInput*> subsample(const std::vector<const GraphInput*>& graphs, int limit, std::uint64_t seed) {
  if (limit < 0 || graphs.size() <= static_cast<std::size_t>(limit)) return graphs;
  std::vector<std::size_t> idx(graphs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng = substream(seed, 0x5b5);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(limit));
  std::sort(idx.begin(), idx.end());
  std::vector<const GraphInput*> out;
  for (std::size_t i : idx) out.push_back(graphs[i]);
  return out;
}

HistoricalModels train_historical(const ExperimentSpec& spec, const std::vector<std::vector<GraphInput>>& historical,
                                  std::uint64_t seed, int jobs) {
  if (historical.size() != spec.historical.size()) throw UsageError("train_historical: scenario count mismatch");
  const Localizer model(spec.model);
  const std::size_t p_count = historical.size();
  HistoricalModels out;
  out.bank.model = spec.model;
  out.bank.autoencoder = spec.autoencoder;
  out.bank.entries.resize(p_count);
  out.meta_logs.resize(p_count);

  std::vector<const GraphInput*> pooled;
  std::vector<std::vector<const GraphInput*>> per;
  for (const auto& g : historical) {
    per.push_back(pointers(g));
    pooled.insert(pooled.end(), per.back().begin(), per.back().end());
  }
  std::set<std::string> used;
  for (std::size_t p = 0; p < p_count; ++p) {
    out.bank.entries[p].id = unique_id(spec.historical[p].name, used);
    out.bank.entries[p].config_digest = scenario_digest(spec.historical[p]);
  }

  // Jobs: one per historical scenario, then the pooled baselines.
  const std::size_t n_jobs = p_count + 2;
  parallel_for(n_jobs, jobs, [&](std::size_t k) {
    if (k < p_count) {
      MetaResult r = meta_train_scenario(model, per[k], spec.meta, splitmix64(seed) ^ (k + 1));
      out.bank.entries[k].params = std::move(r.params);
      out.bank.entries[k].metadata = {{"graphs", per[k].size()}, {"epochs", spec.meta.epochs},
                                      {"final_outer_loss", r.log.empty() ? 0.0 : r.log.back().outer_loss}};
      out.meta_logs[k] = std::move(r.log);
    } else if (k == p_count && spec.baselines.pooled_meta) {
      MetaResult r = meta_train(model, model.make_params(splitmix64(seed) ^ 0x900), TaskSampler(per), spec.meta,
                                splitmix64(seed) ^ 0x901);
      out.pooled_meta = std::move(r.params);
    } else if (k == p_count + 1 && spec.baselines.plain_gnn) {
      out.plain_gnn = train_sgd(model, model.make_params(splitmix64(seed) ^ 0xa00), pooled, spec.supervised.steps,
                                spec.supervised.lr, spec.supervised.batch, splitmix64(seed) ^ 0xa01)
                          .params;
    }
  });
  return out;
}

void embed_bank(ScenarioBank& bank, const ExperimentSpec& spec, const std::vector<std::vector<GraphInput>>& historical,
                std::uint64_t seed) {
  if (historical.size() != bank.entries.size()) throw UsageError("embed_bank: scenario count mismatch");
  std::vector<std::vector<const GraphInput*>> per;
  for (const auto& g : historical) per.push_back(pointers(g));
  TrainedAutoencoder ae = train_autoencoder(per, spec.autoencoder, splitmix64(seed) ^ 0xae0);
  bank.autoencoder = spec.autoencoder;
  bank.autoencoder_params = std::move(ae.params);
  for (std::size_t p = 0; p < per.size(); ++p) {
    bank.entries[p].embeddings = embed_graphs(bank, per[p], spec.embedding_samples, splitmix64(seed) ^ (0xe0 + p));
    bank.entries[p].metadata["autoencoder_final_loss"] = ae.epoch_loss.empty() ? ae.initial_loss : ae.epoch_loss.back();
  }
}

RowMatrix embed_graphs(const ScenarioBank& bank, const std::vector<const GraphInput*>& graphs, int limit, std::uint64_t seed) {
  const GraphAutoencoder ae(bank.autoencoder);
  ParamSet params = bank.autoencoder_params;
  return ae.embed(params, subsample(graphs, limit, seed));
}

ComparisonData comparison_data(const ExperimentSpec& spec, std::uint64_t seed, int jobs) {
  spec.validate();
  ComparisonData d;
  for (const auto& h : spec.historical)
    d.historical.push_back(generate_dataset(realize(h, seed, Role::Historical), spec.budgets.train_samples_per_rp, 0, jobs));
  const ScenarioConfig target = realize(spec.target, seed, Role::Target);
  d.support = generate_dataset(target, spec.budgets.finetune_samples_per_rp, kFinetuneOffset, jobs);
  d.test = generate_dataset(target, spec.budgets.test_samples_per_rp, kTestOffset, jobs);
  return d;
}

AdaptedModels adapt_to_target(const ExperimentSpec& spec, const HistoricalModels& models,
                              const std::vector<const GraphInput*>& support, std::uint64_t seed, int jobs) {
  const Localizer model(spec.model);
  AdaptedModels out;
  out.selection = models.bank.select(embed_graphs(models.bank, support, spec.embedding_samples, splitmix64(seed) ^ 0xe00));
  const auto& chosen = models.bank.entries[static_cast<std::size_t>(out.selection.index)];
  out.selected_id = chosen.id;

  struct Job {
    std::string method;
    const ParamSet* init;
    bool finetune;
  };
  const ParamSet random_init = model.make_params(splitmix64(seed) ^ 0xb00);
  std::vector<Job> todo{{kMetaSimGnn, &chosen.params, true}};
  if (spec.baselines.pooled_meta) {
    if (models.pooled_meta.size() == 0) throw DataError("pooled meta baseline requested but not trained");
    todo.push_back({kPooledMeta, &models.pooled_meta, true});
  }
  if (spec.baselines.plain_gnn) {
    if (models.plain_gnn.size() == 0) throw DataError("plain GNN baseline requested but not trained");
    todo.push_back({kPlainGnn, &models.plain_gnn, false});
  }
  if (spec.baselines.random_init) todo.push_back({kRandomInit, &random_init, true});

  out.methods.resize(todo.size());
  parallel_for(todo.size(), jobs, [&](std::size_t k) {
    out.methods[k].first = todo[k].method;
    out.methods[k].second = todo[k].finetune
                                ? finetune(model, *todo[k].init, support, spec.meta, splitmix64(seed) ^ 0xf00).params
                                : *todo[k].init;
  });
  return out;
}

std::vector<MetricsRecord> evaluate_methods(const ExperimentSpec& spec, const AdaptedModels& adapted,
                                            const std::vector<const GraphInput*>& test, std::uint64_t seed, int jobs) {
  const Localizer model(spec.model);
  const std::uint64_t spec_digest = experiment_digest(spec);
  const std::uint64_t target_digest = scenario_digest(realize(spec.target, seed, Role::Target));
  std::vector<MetricsRecord> out(adapted.methods.size());
  parallel_for(out.size(), jobs, [&](std::size_t k) {
    ParamSet params = adapted.methods[k].second;
    MetricsRecord r = evaluate(model, params, test);
    r.method = adapted.methods[k].first;
    r.scenario = spec.target.name;
    r.seed = seed;
    r.tags = {{"experiment", "comparison"}};
    if (r.method == kMetaSimGnn) r.tags["selected"] = adapted.selected_id;
    r.provenance["spec_digest"] = hex_digest(spec_digest);
    r.provenance["scenario_digest"] = hex_digest(target_digest);
    out[k] = std::move(r);
  });
  return out;
}

ComparisonResult run_comparison(const ExperimentSpec& spec, std::uint64_t seed, int jobs) {
  const ComparisonData data = comparison_data(spec, seed, jobs);
  std::vector<std::vector<GraphInput>> hist;
  for (const auto& ds : data.historical) hist.push_back(dataset_graphs(ds));
  const auto support_graphs = dataset_graphs(data.support);
  const auto test_graphs = dataset_graphs(data.test);

  HistoricalModels models = train_historical(spec, hist, seed, jobs);
  embed_bank(models.bank, spec, hist, seed);
  const AdaptedModels adapted = adapt_to_target(spec, models, pointers(support_graphs), seed, jobs);
  return {adapted.selection, evaluate_methods(spec, adapted, pointers(test_graphs), seed, jobs)};
}

namespace {

ScenarioConfig with_bandwidth(ScenarioConfig c, int bw) {
  for (auto& ap : c.aps) ap.bandwidth_mhz = bw;
  return c;
}

ScenarioConfig with_antennas(ScenarioConfig c, int n_tx, int n_rx) {
  for (auto& ap : c.aps) ap.n_tx = n_tx;
  c.n_rx = n_rx;
  return c;
}

}  // namespace

std::vector<MetricsRecord> run_sweep(const ExperimentSpec& spec, std::uint64_t seed, int jobs) {
  spec.validate();
  const Localizer model(spec.model);
  const ScenarioConfig target = realize(spec.target, seed, Role::Target);
  const std::uint64_t spec_digest = experiment_digest(spec);

  struct Point {
    std::string key;
    json value;
    ScenarioConfig cfg;
    int aps = 0;  // 0: all
    ScenarioConfig test_cfg;
  };
  std::vector<Point> points;
  for (int bw : spec.sweep.bandwidths) {
    auto c = with_bandwidth(target, bw);
    points.push_back({"bandwidth_mhz", bw, c, 0, c});
  }
  for (const auto& [tx, rx] : spec.sweep.antennas) {
    auto c = with_antennas(target, tx, rx);
    points.push_back({"antennas", json::array({tx, rx}), c, 0, c});
  }
  for (int k : spec.sweep.ap_counts) points.push_back({"ap_count", k, target, k, target});
  if (!spec.sweep.rp_spacings.empty()) {
    ScenarioConfig fine = target;
    fine.rp_spacing = *std::min_element(spec.sweep.rp_spacings.begin(), spec.sweep.rp_spacings.end());
    for (Scalar s : spec.sweep.rp_spacings) {
      ScenarioConfig c = target;
      c.rp_spacing = s;
      points.push_back({"rp_spacing", s, c, 0, fine});
    }
  }

  std::vector<MetricsRecord> out(points.size());
  parallel_for(points.size(), jobs, [&](std::size_t k) {
    const Point& pt = points[k];
    std::vector<int> subset;
    for (int a = 0; a < pt.aps; ++a) subset.push_back(a);
    const auto train = scenario_graphs(pt.cfg, spec.budgets.train_samples_per_rp, 0, 1, subset);
    const auto test = scenario_graphs(pt.test_cfg, spec.budgets.test_samples_per_rp, kTestOffset, 1, subset);
    ParamSet params = train_sgd(model, model.make_params(splitmix64(seed) ^ 0xc00), pointers(train), spec.supervised.steps,
                                spec.supervised.lr, spec.supervised.batch, splitmix64(seed) ^ 0xc01)
                          .params;
    MetricsRecord r = evaluate(model, params, pointers(test));
    r.method = kPlainGnn;
    r.scenario = spec.target.name;
    r.seed = seed;
    r.tags = {{"experiment", "sweep"}, {pt.key, pt.value}};
    r.provenance["spec_digest"] = hex_digest(spec_digest);
    r.provenance["scenario_digest"] = hex_digest(scenario_digest(pt.cfg));
    out[k] = std::move(r);
  });

  if (!spec.sweep.finetune_samples.empty()) {
    std::vector<std::vector<GraphInput>> hist;
    for (const auto& h : spec.historical)
      hist.push_back(scenario_graphs(realize(h, seed, Role::Historical), spec.budgets.train_samples_per_rp, 0, jobs));
    HistoricalModels models = train_historical(spec, hist, seed, jobs);
    embed_bank(models.bank, spec, hist, seed);
    const auto test_graphs = scenario_graphs(target, spec.budgets.test_samples_per_rp, kTestOffset, jobs);
    const auto test = pointers(test_graphs);
    std::vector<MetricsRecord> ft(spec.sweep.finetune_samples.size());
    parallel_for(ft.size(), jobs, [&](std::size_t k) {
      const int n = spec.sweep.finetune_samples[k];
      const auto support_graphs = scenario_graphs(target, n, kFinetuneOffset, 1);
      const auto support = pointers(support_graphs);
      const Selection sel = models.bank.select(embed_graphs(models.bank, support, spec.embedding_samples, splitmix64(seed) ^ 0xe00));
      const auto& chosen = models.bank.entries[static_cast<std::size_t>(sel.index)];
      ParamSet params = finetune(model, chosen.params, support, spec.meta, splitmix64(seed) ^ 0xf00).params;
      MetricsRecord r = evaluate(model, params, test);
      r.method = kMetaSimGnn;
      r.scenario = spec.target.name;
      r.seed = seed;
      r.tags = {{"experiment", "sweep"}, {"finetune_samples_per_rp", n}, {"selected", chosen.id}};
      r.provenance["spec_digest"] = hex_digest(spec_digest);
      r.provenance["scenario_digest"] = hex_digest(scenario_digest(target));
      ft[k] = std::move(r);
    });
    out.insert(out.end(), ft.begin(), ft.end());
  }
  return out;
}

// Reports ---------------------------------------------------------------------

std::vector<std::pair<std::string, Scalar>> mean_error_by_tag(const std::vector<MetricsRecord>& records, const std::string& key) {
  std::vector<std::pair<std::string, std::vector<Scalar>>> groups;
  for (const auto& r : records) {
    if (!r.tags.contains(key)) continue;
    const std::string v = r.tags.at(key).dump();
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == v; });
    if (it == groups.end()) {
      groups.push_back({v, {}});
      it = groups.end() - 1;
    }
    it->second.push_back(r.mean);
  }
  std::vector<std::pair<std::string, Scalar>> out;
  for (const auto& [v, means] : groups) out.emplace_back(v, mean_of(means));
  return out;
}

namespace {

struct Summary {
  std::size_t runs = 0;
  Scalar mean = 0.0;      // mean of run means
  Scalar std = 0.0;       // mean of run STDs
  Scalar seed_std = 0.0;  // spread of run means across seeds
};

Summary summarize(const std::vector<const MetricsRecord*>& rs) {
  std::vector<Scalar> means, stds;
  for (const auto* r : rs) {
    means.push_back(r->mean);
    stds.push_back(r->std);
  }
  return {rs.size(), mean_of(means), mean_of(stds), pstd_of(means)};
}

std::string csv_value(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "x" : "") + csv_value(v[i]);
    return s;
  }
  return v.dump();
}

void write_grouped(const std::vector<MetricsRecord>& records, const std::string& key, const std::string& header,
                   const std::filesystem::path& path) {
  std::vector<std::pair<std::string, std::vector<const MetricsRecord*>>> groups;
  std::vector<json> values;
  for (const auto& r : records) {
    if (!r.tags.contains(key)) continue;
    const std::string v = r.tags.at(key).dump() + '\x1f' + r.method;
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == v; });
    if (it == groups.end()) {
      groups.push_back({v, {}});
      values.push_back(r.tags.at(key));
      it = groups.end() - 1;
    }
    it->second.push_back(&r);
  }
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << header << ",method,runs,mean_error_m,std_error_m,seed_std_m\n";
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const Summary s = summarize(groups[i].second);
    f << csv_value(values[i]) << ',' << groups[i].second.front()->method << ',' << s.runs << ',' << s.mean << ','
      << s.std << ',' << s.seed_std << '\n';
  }
}

}  // namespace

std::vector<std::string> write_reports(const std::vector<MetricsRecord>& records, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> written;

  std::vector<std::string> methods;
  std::map<std::string, std::vector<const MetricsRecord*>> by_method;
  for (const auto& r : records) {
    if (r.tags.value("experiment", "") != "comparison") continue;
    if (!by_method.count(r.method)) methods.push_back(r.method);
    by_method[r.method].push_back(&r);
  }
  {
    std::ofstream f(out_dir / "method_comparison.csv");
    if (!f) throw DataError("cannot write reports in " + out_dir.string());
    f << "method,runs,mean_error_m,std_error_m,seed_std_m\n";
    for (const auto& m : methods) {
      const Summary s = summarize(by_method[m]);
      f << m << ',' << s.runs << ',' << s.mean << ',' << s.std << ',' << s.seed_std << '\n';
    }
    written.push_back("method_comparison.csv");
  }
  {
    std::ofstream f(out_dir / "error_cdf.csv");
    f << "method,error_m,cdf\n";
    for (const auto& m : methods) {
      std::vector<Scalar> all;
      for (const auto* r : by_method[m]) all.insert(all.end(), r->errors.begin(), r->errors.end());
      const MetricsRecord pooled = make_metrics(all);
      for (std::size_t i = 0; i < pooled.cdf_grid.size(); ++i) f << m << ',' << pooled.cdf_grid[i] << ',' << pooled.cdf[i] << '\n';
    }
    written.push_back("error_cdf.csv");
  }
  const std::vector<std::tuple<std::string, std::string, std::string>> tables{
      {"bandwidth_mhz", "bandwidth_mhz", "error_vs_bandwidth.csv"},
      {"ap_count", "ap_count", "error_vs_ap_count.csv"},
      {"rp_spacing", "rp_spacing_m", "error_vs_rp_spacing.csv"},
      {"finetune_samples_per_rp", "finetune_samples_per_rp", "error_vs_finetune_samples.csv"},
      {"antennas", "antennas_txrx", "error_vs_antennas.csv"}};
  for (const auto& [key, header, file] : tables) {
    write_grouped(records, key, header, out_dir / file);
    written.push_back(file);
  }
  return written;
}

}  // namespace csiloc
