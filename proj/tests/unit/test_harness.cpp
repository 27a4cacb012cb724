#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"

#include "csiloc/harness.hpp"

using namespace csiloc;

namespace {

nlohmann::json small_spec_json() {
  return {{"name", "unit"},
          {"historical", {"tiny", {{"preset", "tiny"}, {"seed", 31}}}},
          {"new", "tiny"},
          {"budgets", {{"train_samples_per_rp", 4}, {"finetune_samples_per_rp", 2}, {"test_samples_per_rp", 2}}},
          {"model", {{"channels", 4}, {"feature_dim", 16}, {"gnn_hidden", {16, 16, 16}}}},
          {"meta", {{"epochs", 6}, {"meta_batch", 2}, {"groups_per_scenario", 3}, {"task_size", 6}, {"finetune_steps", 5}}},
          {"autoencoder", {{"epochs", 2}, {"encoder", {16, 8}}}},
          {"supervised", {{"steps", 5}, {"lr", 0.05}, {"batch", 8}}},
          {"embedding_samples", 20},
          {"seeds", {3, 4}}};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_CASE("metrics definitions") {
  const MetricsRecord perfect = make_metrics({0.0, 0.0, 0.0});
  CHECK(perfect.mean == 0.0);
  CHECK(perfect.std == 0.0);
  CHECK(perfect.cdf.back() == 1.0);

  const MetricsRecord two = make_metrics({1.0, 3.0});
  CHECK(two.mean == 2.0);
  CHECK(two.std == 1.0);
  REQUIRE(two.cdf_grid.size() == 51);
  CHECK(two.cdf_grid.front() == 0.0);
  CHECK(two.cdf_grid.back() == 3.0);
  CHECK(two.cdf.back() == 1.0);
  CHECK(two.cdf.front() == 0.0);
  CHECK(two.cdf[25] == 0.5);

  std::vector<Scalar> e;
  for (int i = 0; i < 97; ++i) e.push_back(std::fmod(i * 0.37, 2.9));
  const MetricsRecord m = make_metrics(e);
  for (std::size_t i = 1; i < m.cdf.size(); ++i) CHECK(m.cdf[i] >= m.cdf[i - 1]);
  CHECK(m.cdf.back() == 1.0);
  const double mean = std::accumulate(e.begin(), e.end(), 0.0) / e.size();
  double var = 0.0;
  for (double x : e) var += (x - mean) * (x - mean);
  CHECK(m.mean == doctest::Approx(mean).epsilon(1e-14));
  CHECK(m.std == doctest::Approx(std::sqrt(var / e.size())).epsilon(1e-12));

  const MetricsRecord back = metrics_from_json(to_json(m));
  CHECK(back.errors == m.errors);
  CHECK(back.mean == m.mean);
  CHECK(back.cdf == m.cdf);
}

TEST_CASE("constant room-centre predictor gives the average distance to the centre") {
  ScenarioConfig c = preset_scenario("scen2");
  c.rp_spacing = 1.0;
  const auto graphs = scenario_graphs(c, 1, 0);
  LocalizerConfig lc;
  lc.extractor.spp.channels = 4;
  lc.extractor.feature_dim = 8;
  lc.gnn_hidden = {8, 8, 8};
  const Localizer model(lc);
  ParamSet ps = model.make_params(1);
  for (auto& [name, e] : ps)
    if (e.trainable) e.value.data().setZero();
  ps.value("gnn.out.bias").data().setConstant(0.5);
  const MetricsRecord m = evaluate(model, ps, pointers(graphs));

  const Vec2 centre = 0.5 * c.room_extent;
  double sum = 0.0;
  int n = 0;
  for (int rp = 0; rp < c.rp_count(); ++rp) {
    const Vec2 p = c.rp_position(rp);
    sum += std::hypot(p.x() - centre.x(), p.y() - centre.y());
    ++n;
  }
  CHECK(static_cast<int>(m.errors.size()) == n);
  CHECK(m.mean == doctest::Approx(sum / n).epsilon(1e-12));
}

TEST_CASE("experiment spec parsing") {
  const ExperimentSpec spec = experiment_from_json(small_spec_json());
  CHECK(spec.historical.size() == 2);
  CHECK(spec.historical[1].seed == 31);
  CHECK(spec.budgets.train_samples_per_rp == 4);
  CHECK(spec.model.gnn_hidden.size() == 3);
  CHECK(spec.seeds == std::vector<std::uint64_t>{3, 4});

  const ExperimentSpec again = experiment_from_json(experiment_to_json(spec));
  CHECK(experiment_digest(again) == experiment_digest(spec));
  ExperimentSpec changed = spec;
  changed.meta.inner_lr = 0.01;
  CHECK(experiment_digest(changed) != experiment_digest(spec));

  const ExperimentSpec defaults = experiment_from_json({{"historical", {"scen1", "scen3"}}, {"new", "scen2"}});
  CHECK(defaults.budgets.train_samples_per_rp == 80);
  CHECK(defaults.budgets.finetune_samples_per_rp == 20);
  CHECK(defaults.budgets.test_samples_per_rp == 100);

  auto bad = small_spec_json();
  bad["seeds"] = nlohmann::json::array();
  CHECK_THROWS_AS(experiment_from_json(bad), ConfigError);
  bad = small_spec_json();
  bad["colour"] = 1;
  CHECK_THROWS_AS(experiment_from_json(bad), ConfigError);
  bad = small_spec_json();
  bad["budgets"]["train"] = 1;
  CHECK_THROWS_AS(experiment_from_json(bad), ConfigError);
  bad = small_spec_json();
  bad["sweep"] = {{"bandwidth", {20}}};
  CHECK_THROWS_AS(experiment_from_json(bad), ConfigError);
  bad = small_spec_json();
  bad["new"] = "no_such_room.json";
  CHECK_THROWS_AS(experiment_from_json(bad), ConfigError);
  bad = small_spec_json();
  bad["historical"] = nlohmann::json::array();
  CHECK_THROWS_AS(experiment_from_json(bad), ConfigError);

  auto over = small_spec_json();
  over["scenario_overrides"] = {{"noise_std", 0.0}};
  const ExperimentSpec o = experiment_from_json(over);
  CHECK(o.target.noise_std == 0.0);
  CHECK(o.historical[1].noise_std == 0.0);
  CHECK(o.historical[1].seed == 31);
}

TEST_CASE("realisation and subsampling") {
  const ScenarioConfig c = preset_scenario("tiny");
  const ScenarioConfig h = realize(c, 5, Role::Historical), t = realize(c, 5, Role::Target);
  CHECK(h.realization != t.realization);
  CHECK(realize(c, 5, Role::Target).realization == t.realization);
  CHECK(realize(c, 6, Role::Target).realization != t.realization);
  CHECK(h.seed == c.seed);

  const auto graphs = scenario_graphs(c, 3, 0);
  const auto ptrs = pointers(graphs);
  const auto sub = subsample(ptrs, 10, 2);
  REQUIRE(sub.size() == 10);
  for (std::size_t i = 1; i < sub.size(); ++i) CHECK(sub[i - 1] < sub[i]);
  CHECK(subsample(ptrs, 10, 2) == sub);
  CHECK(subsample(ptrs, 10, 3) != sub);
  CHECK(subsample(ptrs, 1000, 2) == ptrs);
}

TEST_CASE("comparison is deterministic and reports every method") {
  const ExperimentSpec spec = experiment_from_json(small_spec_json());
  const ComparisonResult a = run_comparison(spec, 3);
  const ComparisonResult b = run_comparison(spec, 3);
  REQUIRE(a.records.size() == 4);
  std::vector<std::string> methods;
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    methods.push_back(a.records[i].method);
    CHECK(a.records[i].errors == b.records[i].errors);
    CHECK(a.records[i].seed == 3);
    CHECK(a.records[i].tags["experiment"] == "comparison");
    CHECK(a.records[i].errors.size() == static_cast<std::size_t>(spec.target.rp_count() * 2));
  }
  CHECK(methods == std::vector<std::string>{kMetaSimGnn, kPooledMeta, kPlainGnn, kRandomInit});
  CHECK(a.selection.mmd2 == b.selection.mmd2);
  CHECK(a.selection.index == 0);

  const auto dir = std::filesystem::temp_directory_path() / "csiloc_reports_unit";
  std::filesystem::remove_all(dir);
  const auto files = write_reports(a.records, dir);
  CHECK(std::find(files.begin(), files.end(), "method_comparison.csv") != files.end());
  const std::string csv = slurp(dir / "method_comparison.csv");
  CHECK(csv.rfind("method,runs,mean_error_m,std_error_m,seed_std_m\n", 0) == 0);
  for (const char* m : {kMetaSimGnn, kPooledMeta, kPlainGnn, kRandomInit}) CHECK(csv.find(std::string("\n") + m + ",1,") != std::string::npos);
  const std::string cdf = slurp(dir / "error_cdf.csv");
  CHECK(cdf.find(",1\n") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("sweep records carry their configuration tag") {
  auto j = small_spec_json();
  j["sweep"] = {{"bandwidths", {20, 40}}, {"ap_counts", {1, 3}}};
  const ExperimentSpec spec = experiment_from_json(j);
  const auto recs = run_sweep(spec, 4);
  CHECK(recs.size() == 4);
  const auto bw = mean_error_by_tag(recs, "bandwidth_mhz");
  REQUIRE(bw.size() == 2);
  CHECK(bw[0].first == "20");
  CHECK(bw[1].first == "40");
  const auto ap = mean_error_by_tag(recs, "ap_count");
  REQUIRE(ap.size() == 2);
  for (const auto& r : recs) CHECK(r.tags["experiment"] == "sweep");

  const auto dir = std::filesystem::temp_directory_path() / "csiloc_sweep_unit";
  std::filesystem::remove_all(dir);
  const auto files = write_reports(recs, dir);
  CHECK(std::find(files.begin(), files.end(), "error_vs_bandwidth.csv") != files.end());
  CHECK(std::find(files.begin(), files.end(), "error_vs_ap_count.csv") != files.end());
  CHECK(slurp(dir / "error_vs_ap_count.csv").rfind("ap_count,method,runs,mean_error_m,std_error_m,seed_std_m\n", 0) == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("model trained and tested on one noiseless scenario is accurate") {
  ScenarioConfig c = preset_scenario("scen1");
  c.noise_std = 0.0;
  c.rp_spacing = 1.0;
  const auto train = scenario_graphs(c, 2, 0);
  const auto test = scenario_graphs(c, 1, kTestOffset);
  LocalizerConfig lc;
  lc.extractor.feature_dim = 32;
  lc.gnn_hidden = {32, 32, 32};
  const Localizer model(lc);
  TrainResult r = train_sgd(model, model.make_params(11), pointers(train), 600, 0.1, 32, 11);
  const MetricsRecord m = evaluate(model, r.params, pointers(test));
  CHECK(m.mean < 0.1 * c.diagonal());
}
