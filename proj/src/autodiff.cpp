#include "csiloc/autodiff.hpp"

#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

namespace csiloc::ad {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ']';
  return os.str();
}

namespace {

Index element_count(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Index{1}, [](Index a, Index b) { return a * b; });
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void expect_rank(const char* op, const Tensor& t, int rank, const char* which) {
  if (t.rank() != rank)
    shape_fail(op, std::string(which) + " must have rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
}

}  // namespace

Tensor::Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)), data_(Vector::Constant(element_count(shape_), fill)) {}

Tensor::Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (element_count(shape_) != data_.size())
    throw ShapeError("Tensor: shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                     " elements");
}

Tensor Tensor::from_matrix(const RowMatrix& m) {
  Tensor t({m.rows(), m.cols()});
  t.matrix() = m;
  return t;
}

Eigen::Map<RowMatrix> Tensor::matrix() {
  if (rank() != 2) throw ShapeError("Tensor::matrix: rank-2 tensor required, got " + shape_str(shape_));
  return {data_.data(), shape_[0], shape_[1]};
}

Eigen::Map<const RowMatrix> Tensor::matrix() const {
  if (rank() != 2) throw ShapeError("Tensor::matrix: rank-2 tensor required, got " + shape_str(shape_));
  return {data_.data(), shape_[0], shape_[1]};
}

Scalar Tensor::item() const {
  if (size() != 1) throw UsageError("Tensor::item: tensor has " + std::to_string(size()) + " elements");
  return data_[0];
}

const Tensor& Var::value() const { return tape_->value(id_); }

// ---------------------------------------------------------------------------

Var Tape::constant(Tensor value) {
  nodes_.push_back({std::move(value), {}, false, {}, {}});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::variable(Tensor value) {
  nodes_.push_back({std::move(value), {}, true, {}, {}});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::vector<int> inputs, BackwardFn backward, const char* op) {
  if (!value.data().allFinite()) throw NumericalError(std::string(op) + ": non-finite value produced");
  bool rg = false;
  for (int i : inputs) rg = rg || nodes_.at(static_cast<std::size_t>(i)).requires_grad;
  Node n;
  n.value = std::move(value);
  n.requires_grad = rg;
  if (rg) {
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Vector& Tape::grad_buffer(int id) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad.data();
}

void Tape::accumulate(int id, const Vector& g) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  grad_buffer(id) += g;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw UsageError("backward: loss belongs to another tape");
  const auto& lv = value(loss.id());
  if (lv.size() != 1) throw UsageError("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[static_cast<std::size_t>(loss.id())].requires_grad) return;
  grad_buffer(loss.id()).setOnes();
  for (int id = loss.id(); id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.backward && !n.grad.empty()) n.backward(*this, id);
  }
  for (const auto& n : nodes_)
    if (!n.grad.empty() && !n.grad.data().allFinite()) throw NumericalError("backward: non-finite gradient");
}

// ---------------------------------------------------------------------------
// Elementwise and linear

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  expect_rank("matmul", av, 2, "lhs");
  expect_rank("matmul", bv, 2, "rhs");
  if (av.dim(1) != bv.dim(0)) shape_fail("matmul", "inner dims differ: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  Tensor out({av.dim(0), bv.dim(1)});
  out.matrix().noalias() = av.matrix() * bv.matrix();
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    if (t.requires_grad(ia)) {
      RowMatrix ga = g.matrix() * B.matrix().transpose();
      t.accumulate(ia, Eigen::Map<const Vector>(ga.data(), ga.size()));
    }
    if (t.requires_grad(ib)) {
      RowMatrix gb = A.matrix().transpose() * g.matrix();
      t.accumulate(ib, Eigen::Map<const Vector>(gb.data(), gb.size()));
    }
  }, "matmul");
}

Var matmul(const SparseMatrix& a, Var b) {
  const Tensor& bv = b.value();
  expect_rank("matmul", bv, 2, "rhs");
  if (a.cols() != bv.dim(0)) shape_fail("matmul", "inner dims differ: [" + std::to_string(a.rows()) + ", " + std::to_string(a.cols()) + "] x " + shape_str(bv.shape()));
  Tensor out({a.rows(), bv.dim(1)});
  out.matrix().noalias() = a * bv.matrix();
  auto at = std::make_shared<const SparseMatrix>(a.transpose());
  const int ib = b.id();
  return b.tape()->record(std::move(out), {ib}, [ib, at](Tape& t, int self) {
    if (!t.requires_grad(ib)) return;
    RowMatrix gb = *at * t.grad_of(self).matrix();
    t.accumulate(ib, Eigen::Map<const Vector>(gb.data(), gb.size()));
  }, "matmul");
}

namespace {

void expect_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(op, "shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Var add(Var a, Var b) {
  expect_same("add", a.value(), b.value());
  Tensor out(a.shape(), a.value().data() + b.value().data());
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.grad_of(self).data());
    t.accumulate(ib, t.grad_of(self).data());
  }, "add");
}

Var sub(Var a, Var b) {
  expect_same("sub", a.value(), b.value());
  Tensor out(a.shape(), a.value().data() - b.value().data());
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.grad_of(self).data());
    t.accumulate(ib, -t.grad_of(self).data());
  }, "sub");
}

Var mul(Var a, Var b) {
  expect_same("mul", a.value(), b.value());
  Tensor out(a.shape(), a.value().data().cwiseProduct(b.value().data()));
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Vector& g = t.grad_of(self).data();
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib).data()));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia).data()));
  }, "mul");
}

Var scale(Var a, Scalar s) {
  Tensor out(a.shape(), a.value().data() * s);
  const int ia = a.id();
  return a.tape()->record(std::move(out), {ia}, [ia, s](Tape& t, int self) {
    t.accumulate(ia, t.grad_of(self).data() * s);
  }, "scale");
}

Var add_row_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  expect_rank("add_row_bias", xv, 2, "input");
  if (bias.value().size() != xv.dim(1))
    shape_fail("add_row_bias", "bias length " + std::to_string(bias.value().size()) + " != columns " +
                                   std::to_string(xv.dim(1)));
  Tensor out = xv;
  out.matrix().rowwise() += bias.value().data().transpose();
  const int ix = x.id(), ib = bias.id();
  return x.tape()->record(std::move(out), {ix, ib}, [ix, ib](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    t.accumulate(ix, g.data());
    if (t.requires_grad(ib)) t.accumulate(ib, g.matrix().colwise().sum().transpose());
  }, "add_row_bias");
}

Var relu(Var x) {
  Tensor out(x.shape(), x.value().data().cwiseMax(0.0));
  const int ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix](Tape& t, int self) {
    const Vector& xv = t.value(ix).data();
    t.accumulate(ix, (xv.array() > 0.0).select(t.grad_of(self).data(), 0.0));
  }, "relu");
}

// ---------------------------------------------------------------------------
// Reductions / reshaping

Var sum(Var x) {
  const int ix = x.id();
  return x.tape()->record(Tensor::scalar(x.value().data().sum()), {ix}, [ix](Tape& t, int self) {
    t.accumulate(ix, Vector::Constant(t.value(ix).size(), t.grad_of(self).data()[0]));
  }, "sum");
}

Var global_mean(Var x) {
  const Index n = x.value().size();
  if (n == 0) shape_fail("global_mean", "empty input");
  const int ix = x.id();
  return x.tape()->record(Tensor::scalar(x.value().data().mean()), {ix}, [ix, n](Tape& t, int self) {
    t.accumulate(ix, Vector::Constant(n, t.grad_of(self).data()[0] / static_cast<Scalar>(n)));
  }, "global_mean");
}

Var mean_rows(Var x) {
  const Tensor& xv = x.value();
  expect_rank("mean_rows", xv, 2, "input");
  const Index m = xv.dim(0);
  if (m == 0) shape_fail("mean_rows", "no rows");
  Tensor out({1, xv.dim(1)});
  out.matrix() = xv.matrix().colwise().mean();
  const int ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix, m](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    RowMatrix gx = g.matrix().replicate(m, 1) / static_cast<Scalar>(m);
    t.accumulate(ix, Eigen::Map<const Vector>(gx.data(), gx.size()));
  }, "mean_rows");
}

Var reshape(Var x, Shape shape) {
  if (element_count(shape) != x.value().size())
    shape_fail("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor out(std::move(shape), x.value().data());
  const int ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix](Tape& t, int self) {
    t.accumulate(ix, t.grad_of(self).data());
  }, "reshape");
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  if (axis != 0 && axis != 1) shape_fail("concat", "axis must be 0 or 1");
  Index rows = 0, cols = 0;
  for (const auto& p : parts) {
    expect_rank("concat", p.value(), 2, "input");
    const Index r = p.value().dim(0), c = p.value().dim(1);
    if (axis == 0) {
      if (cols == 0 && rows == 0) cols = c;
      if (c != cols) shape_fail("concat", "column counts differ: " + std::to_string(c) + " vs " + std::to_string(cols));
      rows += r;
    } else {
      if (cols == 0 && rows == 0) rows = r;
      if (r != rows) shape_fail("concat", "row counts differ: " + std::to_string(r) + " vs " + std::to_string(rows));
      cols += c;
    }
  }
  Tensor out({rows, cols});
  std::vector<int> ids;
  std::vector<std::pair<Index, Index>> extents;
  Index off = 0;
  for (const auto& p : parts) {
    const auto m = p.value().matrix();
    if (axis == 0)
      out.matrix().middleRows(off, m.rows()) = m;
    else
      out.matrix().middleCols(off, m.cols()) = m;
    extents.emplace_back(off, axis == 0 ? m.rows() : m.cols());
    off += axis == 0 ? m.rows() : m.cols();
    ids.push_back(p.id());
  }
  return parts.front().tape()->record(std::move(out), ids, [ids, extents, axis](Tape& t, int self) {
    const auto g = t.grad_of(self).matrix();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!t.requires_grad(ids[i])) continue;
      RowMatrix gi = axis == 0 ? RowMatrix(g.middleRows(extents[i].first, extents[i].second))
                               : RowMatrix(g.middleCols(extents[i].first, extents[i].second));
      t.accumulate(ids[i], Eigen::Map<const Vector>(gi.data(), gi.size()));
    }
  }, "concat");
}

Var take_rows(Var x, const std::vector<Index>& rows) {
  const Tensor& xv = x.value();
  expect_rank("take_rows", xv, 2, "input");
  Tensor out({static_cast<Index>(rows.size()), xv.dim(1)});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= xv.dim(0)) shape_fail("take_rows", "row index out of range");
    out.matrix().row(static_cast<Index>(i)) = xv.matrix().row(rows[i]);
  }
  const int ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix, rows](Tape& t, int self) {
    const Tensor& xv = t.value(ix);
    RowMatrix gx = RowMatrix::Zero(xv.dim(0), xv.dim(1));
    const auto g = t.grad_of(self).matrix();
    for (std::size_t i = 0; i < rows.size(); ++i) gx.row(rows[i]) += g.row(static_cast<Index>(i));
    t.accumulate(ix, Eigen::Map<const Vector>(gx.data(), gx.size()));
  }, "take_rows");
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeom {
  Index n, c, h, w, o, kh, kw, ho, wo;
  int stride, pad;
  Index patch() const { return c * kh * kw; }
  Index pixels() const { return ho * wo; }
};

void im2col(const Scalar* x, const ConvGeom& g, RowMatrix& col) {
  col.setZero(g.patch(), g.pixels());
  for (Index ci = 0; ci < g.c; ++ci)
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Index row = (ci * g.kh + ki) * g.kw + kj;
        for (Index oi = 0; oi < g.ho; ++oi) {
          const Index ii = oi * g.stride - g.pad + ki;
          if (ii < 0 || ii >= g.h) continue;
          for (Index oj = 0; oj < g.wo; ++oj) {
            const Index jj = oj * g.stride - g.pad + kj;
            if (jj < 0 || jj >= g.w) continue;
            col(row, oi * g.wo + oj) = x[(ci * g.h + ii) * g.w + jj];
          }
        }
      }
}

void col2im(const RowMatrix& col, const ConvGeom& g, Scalar* x) {
  for (Index ci = 0; ci < g.c; ++ci)
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Index row = (ci * g.kh + ki) * g.kw + kj;
        for (Index oi = 0; oi < g.ho; ++oi) {
          const Index ii = oi * g.stride - g.pad + ki;
          if (ii < 0 || ii >= g.h) continue;
          for (Index oj = 0; oj < g.wo; ++oj) {
            const Index jj = oj * g.stride - g.pad + kj;
            if (jj < 0 || jj >= g.w) continue;
            x[(ci * g.h + ii) * g.w + jj] += col(row, oi * g.wo + oj);
          }
        }
      }
}

}  // namespace

Var conv2d(Var x, Var w, Var bias, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  expect_rank("conv2d", xv, 4, "input");
  expect_rank("conv2d", wv, 4, "weight");
  if (stride < 1 || pad < 0) shape_fail("conv2d", "stride must be >= 1 and pad >= 0");
  if (wv.dim(1) != xv.dim(1))
    shape_fail("conv2d", "input channels " + std::to_string(xv.dim(1)) + " != weight channels " + std::to_string(wv.dim(1)));
  ConvGeom g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), wv.dim(3), 0, 0, stride, pad};
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw)
    shape_fail("conv2d", "kernel " + shape_str(wv.shape()) + " larger than padded input " + shape_str(xv.shape()));
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  const bool has_bias = bias.valid();
  if (has_bias && bias.value().size() != g.o)
    shape_fail("conv2d", "bias length " + std::to_string(bias.value().size()) + " != output channels " + std::to_string(g.o));

  Eigen::Map<const RowMatrix> wm(wv.ptr(), g.o, g.patch());
  Tensor out({g.n, g.o, g.ho, g.wo});
  auto cols = std::make_shared<std::vector<RowMatrix>>(static_cast<std::size_t>(g.n));
  for (Index n = 0; n < g.n; ++n) {
    RowMatrix& col = (*cols)[static_cast<std::size_t>(n)];
    im2col(xv.ptr() + n * g.c * g.h * g.w, g, col);
    Eigen::Map<RowMatrix> om(out.ptr() + n * g.o * g.pixels(), g.o, g.pixels());
    om.noalias() = wm * col;
    if (has_bias) om.colwise() += bias.value().data();
  }
  std::vector<int> ins = {x.id(), w.id()};
  if (has_bias) ins.push_back(bias.id());
  const int ix = x.id(), iw = w.id(), ib = has_bias ? bias.id() : -1;
  return x.tape()->record(std::move(out), ins, [g, cols, ix, iw, ib](Tape& t, int self) {
    const Tensor& go = t.grad_of(self);
    const Tensor& wv = t.value(iw);
    Eigen::Map<const RowMatrix> wm(wv.ptr(), g.o, g.patch());
    const bool gx = t.requires_grad(ix);
    const bool gw = t.requires_grad(iw);
    RowMatrix dw = RowMatrix::Zero(g.o, g.patch());
    Vector db = Vector::Zero(g.o);
    Vector dx;
    if (gx) dx = Vector::Zero(g.n * g.c * g.h * g.w);
    for (Index n = 0; n < g.n; ++n) {
      Eigen::Map<const RowMatrix> gm(go.ptr() + n * g.o * g.pixels(), g.o, g.pixels());
      if (gw) dw.noalias() += gm * (*cols)[static_cast<std::size_t>(n)].transpose();
      if (ib >= 0) db += gm.rowwise().sum();
      if (gx) {
        RowMatrix dcol = wm.transpose() * gm;
        col2im(dcol, g, dx.data() + n * g.c * g.h * g.w);
      }
    }
    if (gw) t.accumulate(iw, Eigen::Map<const Vector>(dw.data(), dw.size()));
    if (ib >= 0) t.accumulate(ib, db);
    if (gx) t.accumulate(ix, dx);
  }, "conv2d");
}

// ---------------------------------------------------------------------------
// Pooling

std::vector<Window> sliding_windows(Index size, Index window, Index stride) {
  if (window < 1 || stride < 1 || window > size)
    throw ShapeError("sliding_windows: invalid window " + std::to_string(window) + "/stride " + std::to_string(stride) +
                     " for size " + std::to_string(size));
  std::vector<Window> out;
  for (Index b = 0; b + window <= size; b += stride) out.push_back({b, b + window});
  return out;
}

namespace {

void check_windows(const char* op, const std::vector<Window>& ws, Index size) {
  if (ws.empty()) shape_fail(op, "no windows");
  for (const auto& w : ws)
    if (w.begin < 0 || w.end > size || w.begin >= w.end)
      shape_fail(op, "window [" + std::to_string(w.begin) + ", " + std::to_string(w.end) + ") outside axis of size " +
                         std::to_string(size));
}

}  // namespace

Var window_max_pool(Var x, const std::vector<Window>& rows, const std::vector<Window>& cols) {
  const Tensor& xv = x.value();
  expect_rank("window_max_pool", xv, 4, "input");
  const Index n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  check_windows("window_max_pool", rows, h);
  check_windows("window_max_pool", cols, w);
  const Index nr = static_cast<Index>(rows.size()), nc = static_cast<Index>(cols.size());
  Tensor out({n, c, nr, nc});
  auto arg = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out.size()));
  Index o = 0;
  for (Index p = 0; p < n * c; ++p) {
    const Scalar* plane = xv.ptr() + p * h * w;
    for (Index i = 0; i < nr; ++i)
      for (Index j = 0; j < nc; ++j, ++o) {
        Index best = rows[i].begin * w + cols[j].begin;
        for (Index r = rows[i].begin; r < rows[i].end; ++r)
          for (Index s = cols[j].begin; s < cols[j].end; ++s)
            if (plane[r * w + s] > plane[best]) best = r * w + s;
        out.data()[o] = plane[best];
        (*arg)[static_cast<std::size_t>(o)] = p * h * w + best;
      }
  }
  const int ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix, arg](Tape& t, int self) {
    if (!t.requires_grad(ix)) return;
    const Vector& g = t.grad_of(self).data();
    Vector& dx = t.grad_buffer(ix);
    for (Index o = 0; o < g.size(); ++o) dx[(*arg)[static_cast<std::size_t>(o)]] += g[o];
  }, "window_max_pool");
}

Var window_mean_pool(Var x, const std::vector<Window>& rows, const std::vector<Window>& cols) {
  const Tensor& xv = x.value();
  expect_rank("window_mean_pool", xv, 4, "input");
  const Index n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  check_windows("window_mean_pool", rows, h);
  check_windows("window_mean_pool", cols, w);
  const Index nr = static_cast<Index>(rows.size()), nc = static_cast<Index>(cols.size());
  Tensor out({n, c, nr, nc});
  Index o = 0;
  for (Index p = 0; p < n * c; ++p) {
    const Scalar* plane = xv.ptr() + p * h * w;
    for (Index i = 0; i < nr; ++i)
      for (Index j = 0; j < nc; ++j, ++o) {
        Scalar acc = 0.0;
        for (Index r = rows[i].begin; r < rows[i].end; ++r)
          for (Index s = cols[j].begin; s < cols[j].end; ++s) acc += plane[r * w + s];
        out.data()[o] = acc / static_cast<Scalar>((rows[i].end - rows[i].begin) * (cols[j].end - cols[j].begin));
      }
  }
  const int ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix, rows, cols, n, c, h, w](Tape& t, int self) {
    if (!t.requires_grad(ix)) return;
    const Vector& g = t.grad_of(self).data();
    Vector& dx = t.grad_buffer(ix);
    const Index nr = static_cast<Index>(rows.size()), nc = static_cast<Index>(cols.size());
    Index o = 0;
    for (Index p = 0; p < n * c; ++p)
      for (Index i = 0; i < nr; ++i)
        for (Index j = 0; j < nc; ++j, ++o) {
          const Scalar share =
              g[o] / static_cast<Scalar>((rows[i].end - rows[i].begin) * (cols[j].end - cols[j].begin));
          for (Index r = rows[i].begin; r < rows[i].end; ++r)
            for (Index s = cols[j].begin; s < cols[j].end; ++s) dx[p * h * w + r * w + s] += share;
        }
  }, "window_mean_pool");
}

// ---------------------------------------------------------------------------
// Batch normalisation

Var batchnorm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var, const BatchNormOptions& opt) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 && xv.rank() != 4)
    shape_fail("batchnorm", "input must be [N, F] or [N, C, H, W], got " + shape_str(xv.shape()));
  const Index outer = xv.dim(0);
  const Index feat = xv.dim(1);
  const Index inner = xv.rank() == 4 ? xv.dim(2) * xv.dim(3) : 1;
  if (gamma.value().size() != feat || beta.value().size() != feat || running_mean.size() != feat ||
      running_var.size() != feat)
    shape_fail("batchnorm", "parameter length mismatch for " + std::to_string(feat) + " features");
  const Index count = outer * inner;
  if (count == 0) shape_fail("batchnorm", "empty batch");

  auto at = [feat, inner](Index o, Index f, Index s) { return (o * feat + f) * inner + s; };
  Vector mean(feat), var(feat);
  if (opt.mode == Mode::Train) {
    for (Index f = 0; f < feat; ++f) {
      Scalar m = 0.0;
      for (Index o = 0; o < outer; ++o)
        for (Index s = 0; s < inner; ++s) m += xv.data()[at(o, f, s)];
      m /= static_cast<Scalar>(count);
      Scalar v = 0.0;
      for (Index o = 0; o < outer; ++o)
        for (Index s = 0; s < inner; ++s) {
          const Scalar d = xv.data()[at(o, f, s)] - m;
          v += d * d;
        }
      mean[f] = m;
      var[f] = v / static_cast<Scalar>(count);
    }
    if (opt.update_running) {
      running_mean.data() = (1.0 - opt.momentum) * running_mean.data() + opt.momentum * mean;
      running_var.data() = (1.0 - opt.momentum) * running_var.data() + opt.momentum * var;
    }
  } else {
    mean = running_mean.data();
    var = running_var.data();
  }
  const Vector inv_std = (var.array() + opt.eps).rsqrt().matrix();
  auto xhat = std::make_shared<Vector>(xv.size());
  Tensor out(xv.shape());
  const Vector& gm = gamma.value().data();
  const Vector& bt = beta.value().data();
  for (Index o = 0; o < outer; ++o)
    for (Index f = 0; f < feat; ++f)
      for (Index s = 0; s < inner; ++s) {
        const Index i = at(o, f, s);
        (*xhat)[i] = (xv.data()[i] - mean[f]) * inv_std[f];
        out.data()[i] = gm[f] * (*xhat)[i] + bt[f];
      }
  const int ix = x.id(), ig = gamma.id(), ibt = beta.id();
  const bool train = opt.mode == Mode::Train;
  return x.tape()->record(std::move(out), {ix, ig, ibt},
                          [=](Tape& t, int self) {
                            const Vector& g = t.grad_of(self).data();
                            const Vector& gm = t.value(ig).data();
                            Vector dgamma = Vector::Zero(feat), dbeta = Vector::Zero(feat);
                            for (Index o = 0; o < outer; ++o)
                              for (Index f = 0; f < feat; ++f)
                                for (Index s = 0; s < inner; ++s) {
                                  const Index i = at(o, f, s);
                                  dbeta[f] += g[i];
                                  dgamma[f] += g[i] * (*xhat)[i];
                                }
                            t.accumulate(ig, dgamma);
                            t.accumulate(ibt, dbeta);
                            if (!t.requires_grad(ix)) return;
                            Vector dx(g.size());
                            const Scalar m = static_cast<Scalar>(count);
                            for (Index o = 0; o < outer; ++o)
                              for (Index f = 0; f < feat; ++f)
                                for (Index s = 0; s < inner; ++s) {
                                  const Index i = at(o, f, s);
                                  dx[i] = train ? gm[f] * inv_std[f] / m * (m * g[i] - dbeta[f] - (*xhat)[i] * dgamma[f])
                                                : gm[f] * inv_std[f] * g[i];
                                }
                            t.accumulate(ix, dx);
                          },
                          "batchnorm");
}

// ---------------------------------------------------------------------------
// Losses

Var mse_loss(Var pred, const Tensor& target, Reduction reduction) {
  const Tensor& pv = pred.value();
  expect_rank("mse_loss", pv, 2, "prediction");
  if (target.shape() != pv.shape())
    shape_fail("mse_loss", "prediction " + shape_str(pv.shape()) + " vs target " + shape_str(target.shape()));
  const Vector diff = pv.data() - target.data();
  const Scalar norm = reduction == Reduction::Mean ? 1.0 / static_cast<Scalar>(pv.dim(0)) : 1.0;
  const int ip = pred.id();
  return pred.tape()->record(Tensor::scalar(diff.squaredNorm() * norm), {ip}, [ip, diff, norm](Tape& t, int self) {
    t.accumulate(ip, 2.0 * norm * t.grad_of(self).data()[0] * diff);
  }, "mse_loss");
}

Var mean_squared_error(Var pred, const Tensor& target) {
  const Tensor& pv = pred.value();
  if (target.shape() != pv.shape())
    shape_fail("mean_squared_error", "prediction " + shape_str(pv.shape()) + " vs target " + shape_str(target.shape()));
  const Vector diff = pv.data() - target.data();
  const Scalar n = static_cast<Scalar>(diff.size());
  const int ip = pred.id();
  return pred.tape()->record(Tensor::scalar(diff.squaredNorm() / n), {ip}, [ip, diff, n](Tape& t, int self) {
    t.accumulate(ip, 2.0 / n * t.grad_of(self).data()[0] * diff);
  }, "mean_squared_error");
}

}  // namespace csiloc::ad
