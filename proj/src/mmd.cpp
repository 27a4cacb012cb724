#include "csiloc/mmd.hpp"

#include <algorithm>

namespace csiloc {

Scalar median_heuristic(const std::vector<const RowMatrix*>& sets) {
  std::vector<const RowMatrix*> nonempty;
  Index total = 0;
  for (const RowMatrix* s : sets)
    if (s->rows() > 0) {
      nonempty.push_back(s);
      total += s->rows();
    }
  if (total < 2) throw UsageError("median_heuristic: need at least two points");
  RowMatrix all(total, nonempty.front()->cols());
  Index off = 0;
  for (const RowMatrix* s : nonempty) {
    if (s->cols() != all.cols()) throw ShapeError("median_heuristic: embedding widths differ");
    all.middleRows(off, s->rows()) = *s;
    off += s->rows();
  }
  std::vector<Scalar> d;
  d.reserve(static_cast<std::size_t>(total * (total - 1) / 2));
  for (Index i = 0; i < total; ++i)
    for (Index j = i + 1; j < total; ++j) d.push_back((all.row(i) - all.row(j)).norm());
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  Scalar m = *mid;
  if (d.size() % 2 == 0) m = 0.5 * (m + *std::max_element(d.begin(), mid));
  if (!(m > 0.0)) m = 1.0;
  return m;
}

Selection select_scenario(const std::vector<RowMatrix>& bank, const RowMatrix& candidate, Scalar sigma) {
  if (bank.empty()) throw UsageError("select_scenario: empty scenario bank");
  Selection s;
  if (sigma > 0.0) {
    s.sigma = sigma;
  } else {
    std::vector<const RowMatrix*> sets{&candidate};
    for (const auto& b : bank) sets.push_back(&b);
    s.sigma = median_heuristic(sets);
  }
  for (std::size_t p = 0; p < bank.size(); ++p) {
    s.mmd2.push_back(mmd2(bank[p], candidate, s.sigma));
    if (s.index < 0 || s.mmd2.back() < s.mmd2[static_cast<std::size_t>(s.index)]) s.index = static_cast<int>(p);
  }
  return s;
}

}  // namespace csiloc
