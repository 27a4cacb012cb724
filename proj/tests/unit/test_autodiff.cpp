#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "fd_oracle.hpp"

#include "csiloc/layers.hpp"

using namespace csiloc;
using ad::Tensor;
using ad::Var;

namespace {

Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
  return t;
}

const Tensor& grad_of(ad::Tape& t, Var v) { return t.grad(v); }

}  // namespace

TEST_CASE("relu example") {
  ad::Tape t;
  Var x = t.variable(Tensor({3}, Vector((Vector(3) << -1.0, 0.0, 2.0).finished())));
  Var y = ad::relu(x);
  CHECK(y.value().data()[0] == 0.0);
  CHECK(y.value().data()[1] == 0.0);
  CHECK(y.value().data()[2] == 2.0);
}

TEST_CASE("identity kernel convolution leaves the input unchanged") {
  std::mt19937_64 rng(1);
  ad::Tape t;
  Var x = t.constant(random_tensor({1, 1, 5, 5}, rng));
  Tensor w({1, 1, 3, 3}, 0.0);
  w.data()[4] = 1.0;
  Var y = ad::conv2d(x, t.constant(w), Var(), 1, 1);
  CHECK(y.shape() == ad::Shape{1, 1, 5, 5});
  CHECK((y.value().data() - x.value().data()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("conv2d and matmul are linear in the input") {
  std::mt19937_64 rng(2);
  ad::Tape t;
  const Tensor xv = random_tensor({2, 3, 6, 6}, rng);
  Tensor scaled = xv;
  scaled.data() *= 2.5;
  Var w = t.constant(random_tensor({4, 3, 3, 3}, rng));
  Var a = ad::conv2d(t.constant(xv), w, Var(), 1, 1);
  Var b = ad::conv2d(t.constant(scaled), w, Var(), 1, 1);
  CHECK((b.value().data() - 2.5 * a.value().data()).cwiseAbs().maxCoeff() < 1e-12);

  Var m = t.constant(random_tensor({5, 4}, rng));
  const Tensor xm = random_tensor({3, 5}, rng);
  Tensor xm2 = xm;
  xm2.data() *= -1.75;
  Var p = ad::matmul(t.constant(xm), m), q = ad::matmul(t.constant(xm2), m);
  CHECK((q.value().data() + 1.75 * p.value().data()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("sparse matmul matches dense matmul in value and gradient") {
  std::mt19937_64 rng(12);
  RowMatrix dense = RowMatrix::Zero(6, 5);
  for (Index r = 0; r < 6; ++r) dense(r, (r * 2) % 5) = 0.5 + static_cast<Scalar>(r);
  dense(1, 4) = -2.0;
  const SparseMatrix sparse = dense.sparseView();
  const Tensor x = random_tensor({5, 3}, rng), g = random_tensor({6, 3}, rng);

  ad::Tape t1, t2;
  Var x1 = t1.variable(x), x2 = t2.variable(x);
  Var y1 = ad::matmul(t1.constant(Tensor::from_matrix(dense)), x1);
  Var y2 = ad::matmul(sparse, x2);
  CHECK((y1.value().data() - y2.value().data()).cwiseAbs().maxCoeff() < 1e-14);
  t1.backward(ad::sum(ad::mul(y1, t1.constant(g))));
  t2.backward(ad::sum(ad::mul(y2, t2.constant(g))));
  CHECK((t1.grad(x1).data() - t2.grad(x2).data()).cwiseAbs().maxCoeff() < 1e-14);
  CHECK_THROWS_AS(ad::matmul(sparse, t2.constant(random_tensor({4, 3}, rng))), ShapeError);
}

TEST_CASE("conv2d with stride and padding matches a direct loop") {
  std::mt19937_64 rng(3);
  ad::Tape t;
  const Tensor x = random_tensor({2, 2, 7, 6}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
  Var y = ad::conv2d(t.constant(x), t.constant(w), t.constant(b), 2, 1);
  const Index oh = (7 + 2 - 3) / 2 + 1, ow = (6 + 2 - 3) / 2 + 1;
  REQUIRE(y.shape() == ad::Shape{2, 3, oh, ow});
  double worst = 0.0;
  for (Index n = 0; n < 2; ++n)
    for (Index o = 0; o < 3; ++o)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) {
          double s = b.data()[o];
          for (Index c = 0; c < 2; ++c)
            for (Index di = 0; di < 3; ++di)
              for (Index dj = 0; dj < 3; ++dj) {
                const Index r = i * 2 - 1 + di, q = j * 2 - 1 + dj;
                if (r < 0 || r >= 7 || q < 0 || q >= 6) continue;
                s += w.data()[((o * 2 + c) * 3 + di) * 3 + dj] * x.data()[((n * 2 + c) * 7 + r) * 6 + q];
              }
          worst = std::max(worst, std::abs(s - y.value().data()[((n * 3 + o) * oh + i) * ow + j]));
        }
  CHECK(worst < 1e-12);
}

TEST_CASE("batchnorm train mode normalises and updates running statistics") {
  std::mt19937_64 rng(4);
  ad::Tape t;
  Tensor x = random_tensor({6, 3, 4, 4}, rng, 3.0);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] += 5.0;
  Tensor rm({3}, 0.0), rv({3}, 1.0);
  Var y = ad::batchnorm(t.constant(x), t.constant(Tensor({3}, 1.0)), t.constant(Tensor({3}, 0.0)), rm, rv, {});
  const Index inner = 16;
  for (Index c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (Index n = 0; n < 6; ++n)
      for (Index s = 0; s < inner; ++s) m += y.value().data()[(n * 3 + c) * inner + s];
    m /= 6 * inner;
    for (Index n = 0; n < 6; ++n)
      for (Index s = 0; s < inner; ++s) v += std::pow(y.value().data()[(n * 3 + c) * inner + s] - m, 2);
    v /= 6 * inner;
    CHECK(std::abs(m) < 1e-6);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(rm.data()[c] > 0.3);
  }

  // Eval mode uses the stored statistics.
  Tensor em({2}, Vector((Vector(2) << 1.0, -2.0).finished())), ev({2}, Vector((Vector(2) << 4.0, 0.25).finished()));
  Tensor xe({1, 2}, Vector((Vector(2) << 3.0, -1.0).finished()));
  ad::BatchNormOptions eval;
  eval.mode = ad::Mode::Eval;
  eval.eps = 0.0;
  Var ye = ad::batchnorm(t.constant(xe), t.constant(Tensor({2}, 1.0)), t.constant(Tensor({2}, 0.0)), em, ev, eval);
  CHECK(ye.value().data()[0] == doctest::Approx(1.0));
  CHECK(ye.value().data()[1] == doctest::Approx(2.0));

  // Frozen statistics in train mode.
  Tensor fm({3}, 0.0), fv({3}, 1.0);
  ad::BatchNormOptions frozen;
  frozen.update_running = false;
  ad::batchnorm(t.constant(x), t.constant(Tensor({3}, 1.0)), t.constant(Tensor({3}, 0.0)), fm, fv, frozen);
  CHECK(fm.data().cwiseAbs().maxCoeff() == 0.0);
  CHECK((fv.data().array() == 1.0).all());
}

TEST_CASE("scalar gradient examples") {
  ad::Tape t;
  Var x = t.variable(Tensor::scalar(3.0));
  Var y = ad::mul(x, x);
  t.backward(y);
  CHECK(grad_of(t, x).data()[0] == doctest::Approx(6.0));

  ad::Tape t2;
  Var a = t2.variable(Tensor::scalar(2.0));
  Var z = ad::add(ad::scale(a, 3.0), ad::mul(a, a));  // fan-out on a
  t2.backward(z);
  CHECK(grad_of(t2, a).data()[0] == doctest::Approx(7.0));
}

TEST_CASE("mse gradient vanishes at the target") {
  ad::Tape t;
  Tensor target({2, 2}, Vector((Vector(4) << 1.0, 2.0, -3.0, 0.5).finished()));
  Var p = t.variable(target);
  Var l = ad::mse_loss(p, target);
  CHECK(l.value().item() == 0.0);
  t.backward(l);
  CHECK(grad_of(t, p).data().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mse_loss reductions") {
  ad::Tape t;
  Tensor target({2, 2}, 0.0);
  Var p = t.constant(Tensor({2, 2}, Vector((Vector(4) << 1.0, 0.0, 0.0, 2.0).finished())));
  CHECK(ad::mse_loss(p, target, ad::Reduction::Sum).value().item() == doctest::Approx(5.0));
  CHECK(ad::mse_loss(p, target, ad::Reduction::Mean).value().item() == doctest::Approx(2.5));
  CHECK(ad::mean_squared_error(p, target).value().item() == doctest::Approx(1.25));
}

TEST_CASE("errors: shapes, non-scalar loss, non-finite values") {
  ad::Tape t;
  Var a = t.variable(Tensor({2, 3}, 1.0));
  Var b = t.variable(Tensor({2, 3}, 1.0));
  CHECK_THROWS_AS(ad::matmul(a, b), ShapeError);
  CHECK_THROWS_AS(ad::add(a, t.constant(Tensor({3, 2}, 1.0))), ShapeError);
  CHECK_THROWS_AS(t.backward(a), UsageError);
  CHECK_THROWS_AS(ad::scale(a, std::numeric_limits<double>::infinity()), NumericalError);
  try {
    ad::matmul(a, b);
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
  }
}

TEST_CASE("sliding windows and window pooling") {
  const auto w = ad::sliding_windows(6, 2, 2);
  REQUIRE(w.size() == 3);
  CHECK(w[2].begin == 4);
  CHECK(w[2].end == 6);
  CHECK(ad::sliding_windows(5, 2, 2).size() == 2);

  ad::Tape t;
  Tensor x({1, 1, 2, 2}, Vector((Vector(4) << 1.0, 4.0, 3.0, 2.0).finished()));
  Var v = t.variable(x);
  Var mx = ad::window_max_pool(v, {{0, 2}}, {{0, 2}});
  CHECK(mx.value().item() == 4.0);
  t.backward(ad::sum(mx));
  CHECK(grad_of(t, v).data()[1] == 1.0);
  CHECK(grad_of(t, v).data()[0] == 0.0);
  Var mean = ad::window_mean_pool(t.constant(x), {{0, 2}}, {{0, 2}});
  CHECK(mean.value().item() == doctest::Approx(2.5));
}

TEST_CASE("finite differences for every primitive") {
  std::mt19937_64 rng(5);
  ParamSet ps;
  ps.add("a", random_tensor({3, 4}, rng));
  ps.add("b", random_tensor({4, 5}, rng));
  ps.add("bias", random_tensor({5}, rng));
  ps.add("c", random_tensor({3, 5}, rng));
  ps.add("img", random_tensor({2, 2, 5, 5}, rng));
  ps.add("w", random_tensor({3, 2, 3, 3}, rng, 0.5));
  ps.add("wb", random_tensor({3}, rng));
  ps.add("gamma", random_tensor({3}, rng));
  ps.add("beta", random_tensor({3}, rng));
  ps.add("rm", Tensor({3}, 0.0), false);
  ps.add("rv", Tensor({3}, 1.0), false);
  const Tensor target = random_tensor({2, 6}, rng);

  auto loss = [&](Binding& b) {
    Var m = ad::add_row_bias(ad::matmul(b["a"], b["b"]), b["bias"]);
    Var e = ad::mul(ad::sub(m, b["c"]), ad::relu(b["c"]));
    Var rows = ad::concat({ad::take_rows(e, {2, 0}), ad::mean_rows(e)}, 0);
    Var s1 = ad::global_mean(ad::mul(rows, rows));
    Var conv = ad::conv2d(b["img"], b["w"], b["wb"], 1, 1);
    ad::BatchNormOptions bn;
    bn.update_running = false;
    Var nrm = ad::batchnorm(conv, b["gamma"], b["beta"], b.buffer("rm"), b.buffer("rv"), bn);
    const auto win = ad::sliding_windows(5, 2, 2);
    Var pooled = ad::window_max_pool(nrm, win, win);
    Var pm = ad::window_mean_pool(nrm, {{0, 3}, {2, 5}}, {{1, 5}});
    Var flat = ad::concat({ad::reshape(pooled, {2, 12}), ad::reshape(pm, {2, 6})}, 1);
    Var proj = ad::matmul(flat, ad::reshape(ad::take_rows(ad::reshape(b["a"], {12, 1}), {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 0, 1, 2, 3, 4, 5}), {18, 1}));
    Var s2 = ad::mse_loss(ad::concat({proj, ad::reshape(ad::sum(flat), {1, 1})}, 0), Tensor({3, 1}, 0.3), ad::Reduction::Mean);
    Var s3 = ad::mean_squared_error(ad::take_rows(ad::reshape(nrm, {6, 25}), {0, 5}), Tensor({2, 25}, 0.1));
    return ad::add(ad::add(s1, ad::scale(s2, 0.5)), ad::add(s3, ad::mse_loss(ad::reshape(flat, {2, 18}), Tensor({2, 18}, 0.0))));
  };
  const fd::Report r = fd::check(ps, loss, 1e-5, 40);
  CHECK(r.checked > 100);
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("tape replay is bit-identical") {
  std::mt19937_64 rng(6);
  ParamSet ps;
  ps.add("w", random_tensor({4, 3, 3, 3}, rng));
  const Tensor x = random_tensor({2, 3, 6, 6}, rng);
  auto run = [&] {
    ad::Tape t;
    Binding b(t, ps);
    Var y = ad::global_mean(ad::relu(ad::conv2d(t.constant(x), b["w"], Var(), 1, 1)));
    t.backward(y);
    return std::make_pair(y.value().item(), Vector(t.grad(b["w"]).data()));
  };
  const auto a = run(), c = run();
  CHECK(a.first == c.first);
  CHECK((a.second.array() == c.second.array()).all());
}

TEST_CASE("sgd_step examples") {
  ParamSet ps;
  ps.add("p", Tensor::scalar(1.0));
  ps.accumulate_grad("p", Vector::Constant(1, 2.0));
  sgd_step(ps, 0.1);
  CHECK(ps.value("p").item() == doctest::Approx(0.8));
  CHECK(ps.entry("p").grad.empty());

  ps.accumulate_grad("p", Vector::Constant(1, 5.0));
  sgd_step(ps, 0.0);
  CHECK(ps.value("p").item() == doctest::Approx(0.8));

  CHECK_THROWS_AS(sgd_step(ps, 0.1), UsageError);

  // One step on a convex quadratic reduces the loss.
  ParamSet q;
  q.add("x", Tensor({3}, Vector((Vector(3) << 1.0, -2.0, 0.5).finished())));
  auto f = [](Binding& b) { return ad::sum(ad::mul(b["x"], b["x"])); };
  const double before = fd::loss_value(q, f);
  ad::Tape t;
  Binding b(t, q);
  t.backward(f(b));
  b.collect_grads();
  sgd_step(q, 0.1);
  CHECK(fd::loss_value(q, f) < before);
}

TEST_CASE("ParamSet save/load, checksum and buffers") {
  std::mt19937_64 rng(7);
  ParamSet ps;
  ps.add("layer.weight", random_tensor({3, 2}, rng));
  ps.add("layer.bn.running_mean", Tensor({2}, 0.5), false);
  const auto path = std::filesystem::temp_directory_path() / "csiloc_unit.params";
  ps.save(path);
  const ParamSet back = ParamSet::load(path);
  CHECK(back.same_values(ps));
  CHECK(back.checksum() == ps.checksum());
  CHECK(back.names() == ps.names());
  CHECK_FALSE(back.entry("layer.bn.running_mean").trainable);

  // Corrupt one payload byte.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-12, std::ios::end);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(ParamSet::load(path), DigestMismatch);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(ParamSet::load(path), DataError);

  ParamSet other = ps;
  other.value("layer.bn.running_mean").data().setConstant(2.0);
  ps.copy_buffers_from(other);
  CHECK(ps.value("layer.bn.running_mean").data()[1] == 2.0);
  CHECK_THROWS_AS(ps.add("layer.weight", Tensor({1}, 0.0)), UsageError);
}

TEST_CASE("collect_grads writes zeros for unreached parameters") {
  ParamSet ps;
  ps.add("used", Tensor::scalar(2.0));
  ps.add("unused", Tensor::scalar(1.0));
  ad::Tape t;
  Binding b(t, ps);
  Var u = b["unused"];
  (void)u;
  t.backward(ad::mul(b["used"], b["used"]));
  b.collect_grads();
  CHECK(ps.entry("used").grad.data()[0] == doctest::Approx(4.0));
  CHECK(ps.entry("unused").grad.data()[0] == 0.0);
}

TEST_CASE("dropout") {
  ad::Tape t;
  Var x = t.constant(Tensor({100, 10}, 1.0));
  ForwardOptions eval = ForwardOptions::eval();
  eval.dropout = 0.5;
  CHECK(dropout(x, eval).id() == x.id());
  std::mt19937_64 rng(1);
  ForwardOptions train;
  train.dropout = 0.5;
  train.rng = &rng;
  Var y = dropout(x, train);
  const double zeros = (y.value().data().array() == 0.0).cast<double>().mean();
  CHECK(zeros > 0.4);
  CHECK(zeros < 0.6);
  CHECK(y.value().data().maxCoeff() == doctest::Approx(2.0));
  train.rng = nullptr;
  CHECK_THROWS_AS(dropout(x, train), UsageError);
}
