#pragma once

#include <Eigen/Dense>

#include "microface/tensor.hpp"

namespace microface {

/// Dense Eigen matrix -> rank-2 tensor (row-major copy).
template <typename Real, typename Derived>
Tensor<Real> matrix_to_tensor(const Eigen::MatrixBase<Derived>& m) {
  Tensor<Real> t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = static_cast<Real>(m(r, c));
  return t;
}

/// Rank-1 or rank-2 tensor -> Eigen matrix (rank 1 becomes a column).
template <typename Real>
Eigen::MatrixXd tensor_to_matrix(const Tensor<Real>& t) {
  if (t.rank() == 1) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(t.size()), 1);
    for (std::size_t i = 0; i < t.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = t[i];
    return m;
  }
  if (t.rank() != 2) throw ShapeError("tensor_to_matrix: expected rank 1 or 2, got " + shape_string(t.shape()));
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
  for (std::size_t r = 0; r < t.dim(0); ++r)
    for (std::size_t c = 0; c < t.dim(1); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = t.at(r, c);
  return m;
}

}  // namespace microface
