#pragma once

#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "csiloc/common.hpp"

// Minimal dense reverse-mode engine. A Tape records primitive applications in
// execution order, so reverse iteration is a valid reverse topological order.
// Gradients are first order only.
namespace csiloc::ad {

using Shape = std::vector<Index>;

std::string shape_str(const Shape& s);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = 0.0);
  Tensor(Shape shape, Vector data);

  static Tensor scalar(Scalar v) { return Tensor({1}, v); }
  static Tensor from_matrix(const RowMatrix& m);

  const Shape& shape() const { return shape_; }
  Index dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index size() const { return data_.size(); }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }
  Scalar* ptr() { return data_.data(); }
  const Scalar* ptr() const { return data_.data(); }

  // Row-major view of a rank-2 tensor.
  Eigen::Map<RowMatrix> matrix();
  Eigen::Map<const RowMatrix> matrix() const;

  Scalar item() const;
  bool empty() const { return data_.size() == 0; }

 private:
  Shape shape_;
  Vector data_;
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Var constant(Tensor value);
  Var variable(Tensor value);

  // Records an op result. backward is dropped when no input needs gradients.
  Var record(Tensor value, std::vector<int> inputs, BackwardFn backward, const char* op);

  const Tensor& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  bool requires_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }

  // Gradient buffer of a node; empty until backward() reaches it.
  const Tensor& grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id())).grad; }
  const Tensor& grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  // Adds `g` (same element count as node `id`) into its gradient buffer.
  void accumulate(int id, const Vector& g);
  Vector& grad_buffer(int id);

  // Loss must hold exactly one element.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

// Elementwise / linear algebra ------------------------------------------------

Var matmul(Var a, Var b);
// Constant sparse lhs times a [k, n] tensor.
Var matmul(const SparseMatrix& a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Scalar s);
// x [m, n] + bias [n] broadcast over rows.
Var add_row_bias(Var x, Var bias);
Var relu(Var x);

// Reductions and reshaping ----------------------------------------------------

Var sum(Var x);
Var global_mean(Var x);
// [m, n] -> [1, n]
Var mean_rows(Var x);
Var reshape(Var x, Shape shape);
// Concatenation of rank-2 tensors along axis 0 or 1.
Var concat(const std::vector<Var>& parts, int axis);
Var take_rows(Var x, const std::vector<Index>& rows);

// Convolution and pooling -----------------------------------------------------

// x [N, C, H, W], w [O, C, kh, kw], bias [O] (optional: pass invalid Var).
Var conv2d(Var x, Var w, Var bias, int stride, int pad);

// Half-open index range [begin, end) along one spatial axis.
struct Window {
  Index begin = 0;
  Index end = 0;
};

// Uniform window/stride cells: floor((size - window) / stride) + 1 of them.
std::vector<Window> sliding_windows(Index size, Index window, Index stride);

// x [N, C, H, W] -> [N, C, rows.size(), cols.size()]; cell (i, j) pools
// the rectangle rows[i] x cols[j]. Ties resolve to the first maximum.
Var window_max_pool(Var x, const std::vector<Window>& rows, const std::vector<Window>& cols);
Var window_mean_pool(Var x, const std::vector<Window>& rows, const std::vector<Window>& cols);

// Normalisation ---------------------------------------------------------------

enum class Mode { Train, Eval };

struct BatchNormOptions {
  Mode mode = Mode::Train;
  Scalar momentum = 0.1;
  Scalar eps = 1e-5;
  // In train mode, fold batch statistics into the running buffers.
  bool update_running = true;
};

// Per-feature normalisation. x [N, F] normalises each column; x [N, C, H, W]
// each channel. Running buffers have shape [F] / [C] and are updated in place.
Var batchnorm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var, const BatchNormOptions& opt);

// Losses ----------------------------------------------------------------------

enum class Reduction { Sum, Mean };

// pred, target [B, D]: sum (or mean) over rows of squared Euclidean distance.
Var mse_loss(Var pred, const Tensor& target, Reduction reduction = Reduction::Sum);

// Mean squared error over all elements (reconstruction loss).
Var mean_squared_error(Var pred, const Tensor& target);

}  // namespace csiloc::ad
