#pragma once

#include <vector>

#include "csiloc/common.hpp"

namespace csiloc {

// Mean Gaussian kernel value exp(-|x - y|^2 / (2 sigma^2)) over all row pairs.
template <typename DX, typename DY>
typename DX::Scalar mean_kernel(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DY>& y, typename DX::Scalar sigma) {
  using T = typename DX::Scalar;
  const T inv = T(1) / (T(2) * sigma * sigma);
  T s = T(0);
  for (Index i = 0; i < x.rows(); ++i)
    for (Index j = 0; j < y.rows(); ++j) s += std::exp(-(x.row(i) - y.row(j)).squaredNorm() * inv);
  return s / static_cast<T>(x.rows() * y.rows());
}

// Biased squared MMD between the row sets of x and y.
template <typename DX, typename DY>
typename DX::Scalar mmd2(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DY>& y, typename DX::Scalar sigma) {
  if (x.rows() == 0 || y.rows() == 0) throw UsageError("mmd2: empty sample set");
  if (x.cols() != y.cols()) throw ShapeError("mmd2: embedding widths differ");
  if (!(sigma > 0)) throw UsageError("mmd2: kernel width must be positive");
  return mean_kernel(x, x, sigma) + mean_kernel(y, y, sigma) - 2 * mean_kernel(x, y, sigma);
}

// Median of pairwise Euclidean distances over the union of the sets.
Scalar median_heuristic(const std::vector<const RowMatrix*>& sets);

struct Selection {
  int index = -1;
  std::vector<Scalar> mmd2;
  Scalar sigma = 0.0;
};

// argmin over scenarios of mmd2(bank[p], candidate); lowest index wins ties.
// sigma <= 0 selects the median heuristic over all sets.
Selection select_scenario(const std::vector<RowMatrix>& bank, const RowMatrix& candidate, Scalar sigma = 0.0);

}  // namespace csiloc
