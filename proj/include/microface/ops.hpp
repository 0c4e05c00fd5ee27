#pragma once

// Differentiable primitives. Every network and loss in the library is composed from this fixed set.

#include <array>
#include <vector>

#include "microface/autodiff.hpp"
#include "microface/sparse.hpp"

namespace microface {

// Elementwise, identical shapes.
template <typename Real> Var<Real> add(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> sub(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> mul(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> div(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> scale(Var<Real> a, Real factor);
template <typename Real> Var<Real> add_scalar(Var<Real> a, Real offset);

template <typename Real> Var<Real> relu(Var<Real> x);
template <typename Real> Var<Real> sigmoid(Var<Real> x);
template <typename Real> Var<Real> tanh(Var<Real> x);
template <typename Real> Var<Real> square(Var<Real> x);
/// sqrt(x + eps); the offset keeps the derivative finite at zero.
template <typename Real> Var<Real> sqrt_eps(Var<Real> x, Real eps);

// Reductions.
template <typename Real> Var<Real> sum(Var<Real> x);
template <typename Real> Var<Real> mean(Var<Real> x);
/// [n, d] -> [n]
template <typename Real> Var<Real> row_sum(Var<Real> x);

// Linear algebra.
/// [m, k] x [k, n] -> [m, n]
template <typename Real> Var<Real> matmul(Var<Real> a, Var<Real> b);
/// Constant sparse [n, n'] times dense [n', d].
template <typename Real> Var<Real> spmm(const CsrMatrix& m, Var<Real> x);
/// [n, d] + [d] broadcast over rows.
template <typename Real> Var<Real> add_bias(Var<Real> x, Var<Real> bias);
/// Row i of [n, d] multiplied by s[i], s of shape [n].
template <typename Real> Var<Real> scale_rows(Var<Real> x, Var<Real> s);
/// Row-wise 3D cross product of two [n, 3] tensors.
template <typename Real> Var<Real> cross_rows(Var<Real> a, Var<Real> b);
template <typename Real> Var<Real> transpose(Var<Real> x);

// Structural.
template <typename Real> Var<Real> reshape(Var<Real> x, Shape shape);
/// Concatenate 2D tensors along columns.
template <typename Real> Var<Real> concat_cols(const std::vector<Var<Real>>& parts);
/// Concatenate 2D tensors along rows.
template <typename Real> Var<Real> concat_rows(const std::vector<Var<Real>>& parts);
template <typename Real> Var<Real> slice_rows(Var<Real> x, std::size_t begin, std::size_t end);
template <typename Real> Var<Real> slice_cols(Var<Real> x, std::size_t begin, std::size_t end);
/// out[i] = x[index[i]] for 2D x; backward scatters (adds) into the source rows.
template <typename Real> Var<Real> gather_rows(Var<Real> x, const std::vector<std::size_t>& index);

// Convolutions (direct im2col lowering onto a dense product).
/// x [C, H, W], w [O, C, k, k], b [O] -> [O, Ho, Wo]
template <typename Real> Var<Real> conv2d(Var<Real> x, Var<Real> w, Var<Real> b, std::size_t stride, std::size_t pad);
/// x [C, D, H, W], w [O, C, kd, kh, kw], b [O] -> [O, Do, Ho, Wo]
template <typename Real>
Var<Real> conv3d(Var<Real> x, Var<Real> w, Var<Real> b, std::array<std::size_t, 3> stride,
                 std::array<std::size_t, 3> pad);
/// Average pooling of [C, D, H, W] onto a fixed gh x gw spatial grid (bins may be uneven).
template <typename Real> Var<Real> pool_grid(Var<Real> x, std::size_t gh, std::size_t gw);
/// x [C, H, W] times a single-channel map a [1, H, W] broadcast over channels.
template <typename Real> Var<Real> mul_channels(Var<Real> x, Var<Real> a);
/// Mean over pixel sets of a [C, H, W] map: patches[p] holds flat pixel indices (h * W + w). -> [P, C]
template <typename Real>
Var<Real> patch_mean(Var<Real> map, const std::vector<std::vector<std::size_t>>& patches);

/// Axis-angle [3] -> rotation matrix [3, 3].
template <typename Real> Var<Real> rodrigues(Var<Real> axis_angle);

template <typename Real> Var<Real> operator+(Var<Real> a, Var<Real> b) { return add(a, b); }
template <typename Real> Var<Real> operator-(Var<Real> a, Var<Real> b) { return sub(a, b); }
template <typename Real> Var<Real> operator*(Var<Real> a, Var<Real> b) { return mul(a, b); }

/// Output extent of a convolution along one axis.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad);

}  // namespace microface
