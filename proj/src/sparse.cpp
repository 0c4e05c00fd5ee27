#include "microface/sparse.hpp"

#include <algorithm>
#include <tuple>

#include "microface/tensor.hpp"

namespace microface {

double CsrMatrix::coeff(std::size_t r, std::size_t c) const {
  for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) {
    if (col_idx[k] == c) return values[k];
  }
  return 0.0;
}

std::vector<double> CsrMatrix::multiply(const std::vector<double>& x) const {
  if (x.size() != cols) throw ShapeError("sparse multiply: vector length mismatch");
  std::vector<double> y(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) acc += values[k] * x[col_idx[k]];
    y[r] = acc;
  }
  return y;
}

CsrMatrix CsrMatrix::from_triplets(std::size_t rows, std::size_t cols,
                                   std::vector<std::tuple<std::size_t, std::size_t, double>> triplets) {
  std::sort(triplets.begin(), triplets.end(), [](const auto& a, const auto& b) {
    return std::tie(std::get<0>(a), std::get<1>(a)) < std::tie(std::get<0>(b), std::get<1>(b));
  });
  CsrMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.row_ptr.assign(rows + 1, 0);
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    const auto [r, c, v] = triplets[i];
    if (r >= rows || c >= cols) throw ShapeError("sparse triplet out of range");
    if (!m.col_idx.empty() && i > 0 && std::get<0>(triplets[i - 1]) == r && m.col_idx.back() == c) {
      m.values.back() += v;
      continue;
    }
    m.col_idx.push_back(c);
    m.values.push_back(v);
    ++m.row_ptr[r + 1];
  }
  for (std::size_t r = 0; r < rows; ++r) m.row_ptr[r + 1] += m.row_ptr[r];
  return m;
}

}  // namespace microface
