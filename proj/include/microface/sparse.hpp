#pragma once

#include <cstddef>
#include <tuple>
#include <vector>

namespace microface {

/// Compressed sparse row matrix used for the fixed mesh operators (adjacency, propagation, Laplacian).
struct CsrMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> row_ptr{0};
  std::vector<std::size_t> col_idx;
  std::vector<double> values;

  std::size_t nnz() const { return values.size(); }
  double coeff(std::size_t r, std::size_t c) const;
  std::vector<double> multiply(const std::vector<double>& x) const;
  /// Builds from (row, col, value) triplets; duplicates are summed.
  static CsrMatrix from_triplets(std::size_t rows, std::size_t cols,
                                 std::vector<std::tuple<std::size_t, std::size_t, double>> triplets);
};

}  // namespace microface
