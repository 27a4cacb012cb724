#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "fd_oracle.hpp"

#include "csiloc/channel_sim.hpp"
#include "csiloc/gnn.hpp"
#include "csiloc/scenario_io.hpp"

using namespace csiloc;
using ad::Tensor;
using ad::Var;

namespace {

std::vector<Vec2> random_layout(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 10.0);
  std::vector<Vec2> p;
  for (int i = 0; i < n; ++i) p.emplace_back(u(rng), u(rng));
  return p;
}

CsiGraph random_graph(int n, Index dim, std::mt19937_64& rng) {
  CsiGraph g;
  g.ap_positions = random_layout(n, rng);
  g.adjacency = adjacency_matrix(g.ap_positions);
  g.node_features.resize(n, dim);
  std::normal_distribution<double> d(0.0, 1.0);
  for (Index i = 0; i < g.node_features.size(); ++i) g.node_features.data()[i] = d(rng);
  return g;
}

// Non-trivial BN buffers so eval mode is not the identity.
void perturb_buffers(ParamSet& ps, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto& [name, e] : ps)
    if (!e.trainable)
      for (Index i = 0; i < e.value.size(); ++i) e.value.data()[i] = name.find("var") != std::string::npos ? u(rng) : u(rng) - 1.0;
}

GraphInput random_input(int n_ap, int n_img, std::mt19937_64& rng) {
  GraphInput g;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  g.ap_positions = random_layout(n_ap, rng);
  g.adjacency = adjacency_matrix(g.ap_positions);
  for (int i = 0; i < n_ap; ++i) {
    CsiImage img;
    img.n_img = n_img;
    img.ap_index = i;
    for (auto& ch : img.channels) {
      ch.resize(n_img, n_img);
      for (Index k = 0; k < ch.size(); ++k) ch.data()[k] = u(rng);
    }
    g.images.push_back(std::move(img));
  }
  g.room_extent = Vec2(10.0, 8.0);
  g.true_location = Vec2(10.0 * u(rng), 8.0 * u(rng));
  return g;
}

}  // namespace

TEST_CASE("adjacency examples") {
  const RowMatrix a = adjacency_matrix(std::vector<Vec2>{{0.0, 0.0}, {2.0, 0.0}});
  CHECK(a(0, 0) == 0.0);
  CHECK(a(0, 1) == 0.5);
  CHECK(a(1, 0) == 0.5);
  CHECK(a(1, 1) == 0.0);

  const RowMatrix one = adjacency_matrix(std::vector<Vec2>{{3.0, 1.0}});
  CHECK(one.rows() == 1);
  CHECK(one(0, 0) == 0.0);

  const RowMatrix sq = adjacency_matrix(std::vector<Vec2>{{0, 0}, {1, 0}, {1, 1}, {0, 1}});
  const double r = 1.0 / std::sqrt(2.0);
  RowMatrix expect(4, 4);
  expect << 0, 1, r, 1, 1, 0, 1, r, r, 1, 0, 1, 1, r, 1, 0;
  CHECK((sq - expect).cwiseAbs().maxCoeff() < 1e-15);

  const auto af = adjacency_matrix(std::vector<Eigen::Vector2f>{{0.f, 0.f}, {0.f, 4.f}});
  CHECK(af(0, 1) == 0.25f);
}

TEST_CASE("adjacency matches brute-force distances for random layouts") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + trial % 8;
    const auto p = random_layout(n, rng);
    const RowMatrix a = adjacency_matrix(p);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const double d = std::hypot(p[i].x() - p[j].x(), p[i].y() - p[j].y());
        const double want = i == j ? 0.0 : 1.0 / d;
        CHECK(std::abs(a(i, j) - want) <= 1e-12 * std::max(1.0, want));
        CHECK(a(i, j) == a(j, i));
        CHECK(a(i, j) >= 0.0);
      }
  }
}

TEST_CASE("graph construction errors") {
  CHECK_THROWS_AS(adjacency_matrix(std::vector<Vec2>{{1.0, 1.0}, {1.0, 1.0}}), ConfigError);
  CHECK_THROWS_AS(adjacency_matrix(std::vector<Vec2>{}), ConfigError);

  ScenarioConfig c = preset_scenario("tiny");
  const Dataset ds = generate_dataset(c, 1, 2);
  std::vector<const CsiSample*> mixed;
  for (const auto& s : ds.records)
    if (s.ap_index == 0 && s.rp_index == 0 && mixed.empty()) mixed.push_back(&s);
  for (const auto& s : ds.records)
    if (s.ap_index == 1 && s.rp_index == 1 && mixed.size() == 1) mixed.push_back(&s);
  REQUIRE(mixed.size() == 2);
  std::vector<Vec2> aps;
  for (const auto& ap : c.aps) aps.push_back(ap.position);
  CHECK_THROWS_AS(build_graph_input(mixed, {aps[0], aps[1]}, c.room_extent), DataError);
}

TEST_CASE("built graphs from a dataset") {
  ScenarioConfig c = preset_scenario("tiny");
  const Dataset ds = generate_dataset(c, 2, 3);
  const auto graphs = dataset_graphs(ds);
  CHECK(graphs.size() == static_cast<std::size_t>(ds.config.rp_count() * 2));
  for (const auto& g : graphs) {
    CHECK(g.nodes() == static_cast<Index>(c.aps.size()));
    CHECK((g.adjacency - g.adjacency.transpose()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.adjacency.diagonal().cwiseAbs().maxCoeff() == 0.0);
  }
  const auto sub = dataset_graphs(ds, {0, 2});
  CHECK(sub.front().nodes() == 2);
  CHECK(sub.front().adjacency(0, 1) == doctest::Approx(1.0 / (c.aps[0].position - c.aps[2].position).norm()));

  FeatureExtractor fx;
  ParamSet ps;
  std::mt19937_64 rng(1);
  fx.init(ps, rng);
  std::vector<const CsiSample*> at_rp;
  std::vector<Vec2> aps;
  for (const auto& s : ds.records)
    if (s.rp_index == 3 && s.sample_index == ds.sample_offset + 1) {
      at_rp.push_back(&s);
      aps.push_back(c.aps[static_cast<std::size_t>(s.ap_index)].position);
    }
  const CsiGraph g = build_graph(at_rp, fx, ps, aps);
  CHECK(g.node_features.rows() == static_cast<Index>(at_rp.size()));
  CHECK(g.node_features.cols() == 64);
  CHECK((g.node_features.row(0).transpose() - extract_feature(fx, ps, sample_to_image(*at_rp[0]))).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gnn output is invariant to node permutations") {
  std::mt19937_64 rng(12);
  GnnConfig cfg;
  cfg.input_dim = 10;
  cfg.hidden = {12, 12, 12};
  GnnLocalizer gnn(cfg);
  ParamSet ps;
  gnn.init(ps, rng);
  perturb_buffers(ps, rng);
  for (int n = 1; n <= 6; ++n)
    for (int trial = 0; trial < 5; ++trial) {
      const CsiGraph g = random_graph(n, 10, rng);
      std::vector<int> perm(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      CsiGraph h;
      h.node_features.resize(n, 10);
      for (int i = 0; i < n; ++i) {
        h.node_features.row(i) = g.node_features.row(perm[i]);
        h.ap_positions.push_back(g.ap_positions[perm[i]]);
      }
      h.adjacency = adjacency_matrix(h.ap_positions);
      const Vec2 a = gnn_forward(g, gnn, ps), b = gnn_forward(h, gnn, ps);
      CHECK((a - b).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("gnn runs on single-node graphs and after AP removal") {
  std::mt19937_64 rng(13);
  GnnConfig cfg;
  cfg.input_dim = 8;
  GnnLocalizer gnn(cfg);
  ParamSet ps;
  gnn.init(ps, rng);
  const CsiGraph one = random_graph(1, 8, rng);
  CHECK(gnn_forward(one, gnn, ps).allFinite());

  CsiGraph four = random_graph(4, 8, rng);
  const Vec2 full = gnn_forward(four, gnn, ps);
  CsiGraph three;
  three.node_features = four.node_features.topRows(3);
  three.ap_positions = {four.ap_positions.begin(), four.ap_positions.begin() + 3};
  three.adjacency = adjacency_matrix(three.ap_positions);
  const Vec2 reduced = gnn_forward(three, gnn, ps);
  CHECK(reduced.allFinite());
  CHECK((full - reduced).norm() > 0.0);

  CsiGraph wrong = four;
  wrong.node_features = RowMatrix::Ones(4, 7);
  CHECK_THROWS_AS(gnn_forward(wrong, gnn, ps), ShapeError);
  wrong.node_features = RowMatrix::Ones(3, 8);
  CHECK_THROWS_AS(gnn_forward(wrong, gnn, ps), ShapeError);
}

TEST_CASE("propagation matrix and far-AP suppression") {
  const std::vector<Vec2> p{{0, 0}, {1, 0}, {0, 3}};
  const RowMatrix a = adjacency_matrix(p);
  const RowMatrix with = propagation_matrix(a);
  const RowMatrix without = propagation_matrix(a, false);
  for (Index i = 0; i < 3; ++i) {
    CHECK(with.row(i).sum() == doctest::Approx(1.0));
    CHECK(without.row(i).sum() == doctest::Approx(1.0));
    CHECK(without(i, i) == 0.0);
    CHECK(with(i, i) == doctest::Approx(1.0 / (1.0 + a.row(i).sum())));
  }
  CHECK(propagation_matrix(RowMatrix::Zero(1, 1), false)(0, 0) == 0.0);
  CHECK(propagation_matrix(RowMatrix::Zero(1, 1))(0, 0) == 1.0);

  // One linear layer without self loops: node m's share of node 0's
  // pre-activation is exactly P[0][m] times its projected feature.
  std::mt19937_64 rng(14);
  std::normal_distribution<double> d(0.0, 1.0);
  RowMatrix x(3, 4), w(4, 5);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = d(rng);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = d(rng);
  const RowMatrix base = without * x * w;
  for (Index m = 1; m < 3; ++m) {
    RowMatrix xm = x;
    xm.row(m).setZero();
    const RowMatrix delta = base - without * xm * w;
    CHECK((delta.row(0) - without(0, m) * (x.row(m) * w)).cwiseAbs().maxCoeff() < 1e-12);
  }

  // Doubling a distance halves the raw weight.
  const std::vector<Vec2> far{{0, 0}, {2, 0}, {0, 3}};
  CHECK(adjacency_matrix(far)(0, 1) == doctest::Approx(0.5 * a(0, 1)));
  CHECK(adjacency_matrix(far)(0, 2) == a(0, 2));
}

TEST_CASE("batched forward equals per-graph forward") {
  std::mt19937_64 rng(15);
  GnnConfig cfg;
  cfg.input_dim = 6;
  cfg.hidden = {8, 8, 8};
  GnnLocalizer gnn(cfg);
  ParamSet ps;
  gnn.init(ps, rng);
  perturb_buffers(ps, rng);
  std::vector<CsiGraph> gs;
  for (int n : {2, 5, 1, 3}) gs.push_back(random_graph(n, 6, rng));
  std::vector<const RowMatrix*> adj;
  Index total = 0;
  for (const auto& g : gs) {
    adj.push_back(&g.adjacency);
    total += g.node_features.rows();
  }
  RowMatrix stacked(total, 6);
  Index off = 0;
  for (const auto& g : gs) {
    stacked.middleRows(off, g.node_features.rows()) = g.node_features;
    off += g.node_features.rows();
  }
  const GraphBatch batch = make_batch(adj);
  CHECK(batch.graphs() == 4);
  CHECK(batch.nodes() == 11);
  ad::Tape t;
  Binding b(t, ps, false);
  Var y = gnn.forward(b, t.constant(Tensor::from_matrix(stacked)), batch, ForwardOptions::eval());
  for (std::size_t i = 0; i < gs.size(); ++i) {
    const Vec2 single = gnn_forward(gs[i], gnn, ps);
    CHECK(std::abs(y.value().matrix()(static_cast<Index>(i), 0) - single.x()) < 1e-12);
    CHECK(std::abs(y.value().matrix()(static_cast<Index>(i), 1) - single.y()) < 1e-12);
  }
}

TEST_CASE("mse_loss examples") {
  CHECK(mse_loss(Vec2(1.5, -2.0), Vec2(1.5, -2.0)) == 0.0);
  CHECK(mse_loss(Vec2(1.0, 0.0), Vec2(0.0, 0.0)) == 1.0);
  const std::vector<Vec2> pred{{1.0, 0.0}, {0.0, 2.0}}, truth{{0.0, 0.0}, {0.0, 0.0}};
  CHECK(mse_loss(pred, truth) == 5.0);
  CHECK(mse_loss(pred, truth, ad::Reduction::Mean) == 2.5);
}

TEST_CASE("localizer gradients match finite differences end to end") {
  std::mt19937_64 rng(16);
  LocalizerConfig cfg;
  cfg.extractor.spp.channels = 3;
  cfg.extractor.feature_dim = 5;
  cfg.gnn_hidden = {4, 4, 4};
  Localizer model(cfg);
  ParamSet ps = model.make_params(3);
  std::vector<GraphInput> graphs{random_input(3, 8, rng), random_input(2, 10, rng), random_input(3, 8, rng),
                                 random_input(4, 10, rng)};
  const auto ptrs = pointers(graphs);
  ForwardOptions opt;
  opt.update_running_stats = false;
  auto f = [&](Binding& b) { return model.loss(b, ptrs, opt); };
  const fd::Report r = fd::check(ps, f, 1e-6, 6, 1e-5);
  CHECK(r.checked > 100);
  INFO(r.worst);
  CHECK(r.max_abs < 1e-7);
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("localizer predictions are in meters and batch-size independent") {
  std::mt19937_64 rng(17);
  LocalizerConfig cfg;
  cfg.extractor.feature_dim = 16;
  cfg.gnn_hidden = {16, 16, 16};
  Localizer model(cfg);
  ParamSet ps = model.make_params(5);
  std::vector<GraphInput> graphs;
  for (int i = 0; i < 9; ++i) graphs.push_back(random_input(3, i % 2 ? 12 : 16, rng));
  const auto ptrs = pointers(graphs);
  const auto a = model.predict(ps, ptrs, 64), b = model.predict(ps, ptrs, 2);
  REQUIRE(a.size() == 9);
  for (std::size_t i = 0; i < 9; ++i) CHECK((a[i] - b[i]).cwiseAbs().maxCoeff() < 1e-12);

  ad::Tape t;
  Binding bind(t, ps, false);
  Var norm = model.forward(bind, ptrs, ForwardOptions::eval());
  for (Index i = 0; i < 9; ++i) {
    CHECK(a[static_cast<std::size_t>(i)].x() == doctest::Approx(norm.value().matrix()(i, 0) * 10.0));
    CHECK(a[static_cast<std::size_t>(i)].y() == doctest::Approx(norm.value().matrix()(i, 1) * 8.0));
  }
  CHECK(model.make_params(5).same_values(ps));
  CHECK_FALSE(model.make_params(6).same_values(ps));
}
