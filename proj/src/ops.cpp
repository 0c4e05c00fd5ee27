#include "microface/ops.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace microface {

namespace {

template <typename Real>
using MatR = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MapC = Eigen::Map<const MatR<Real>>;
template <typename Real>
using MapM = Eigen::Map<MatR<Real>>;

template <typename Real>
Graph<Real>& graph_of(Var<Real> a) {
  if (!a.valid()) throw Error("operation on an empty Var");
  return *a.graph();
}

template <typename Real>
Graph<Real>& same_graph(Var<Real> a, Var<Real> b) {
  if (a.graph() != b.graph()) throw Error("operands belong to different graphs");
  return graph_of(a);
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  require(s.size() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
}

/// Runs `fn(accumulator)` only when node `id` takes part in differentiation.
template <typename Real, typename Fn>
void accumulate(Graph<Real>& g, int id, Fn&& fn) {
  if (!g.requires_grad(id)) return;
  fn(g.grad_accumulator(id));
}

template <typename Real, typename Fn>
Var<Real> unary(const char* op, Var<Real> x, Fn&& forward, Real (*deriv)(Real in)) {
  auto& g = graph_of(x);
  const auto& in = x.value();
  Tensor<Real> out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  const int xi = x.id();
  return g.record(op, std::move(out), {xi}, [xi, deriv](Graph<Real>& gr, const Tensor<Real>& go) {
    const auto& v = gr.value(xi);
    accumulate(gr, xi, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < v.size(); ++i) acc[i] += go[i] * deriv(v[i]);
    });
  });
}

template <typename Real>
Real relu_d(Real v) {
  return v > Real(0) ? Real(1) : Real(0);
}
template <typename Real>
Real sigmoid_f(Real v) {
  return Real(1) / (Real(1) + std::exp(-v));
}
template <typename Real>
Real sigmoid_d(Real v) {
  const Real s = sigmoid_f(v);
  return s * (Real(1) - s);
}
template <typename Real>
Real tanh_d(Real v) {
  const Real t = std::tanh(v);
  return Real(1) - t * t;
}
template <typename Real>
Real square_d(Real v) {
  return Real(2) * v;
}

struct ConvGeometry {
  std::size_t c, d, h, w;           // input
  std::size_t o, kd, kh, kw;        // kernel
  std::array<std::size_t, 3> stride, pad;
  std::size_t od, oh, ow;           // output

  std::size_t k_rows() const { return c * kd * kh * kw; }
  std::size_t out_cols() const { return od * oh * ow; }
};

// Lowers the input volume to a [C*kd*kh*kw, Do*Ho*Wo] matrix; out-of-range taps read zero.
template <typename Real>
void im2col(const Real* x, const ConvGeometry& gm, Real* cols) {
  const std::size_t L = gm.out_cols();
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < gm.c; ++ci)
    for (std::size_t a = 0; a < gm.kd; ++a)
      for (std::size_t b = 0; b < gm.kh; ++b)
        for (std::size_t e = 0; e < gm.kw; ++e, ++row) {
          Real* dst = cols + row * L;
          std::size_t col = 0;
          for (std::size_t z = 0; z < gm.od; ++z) {
            const long iz = static_cast<long>(z * gm.stride[0] + a) - static_cast<long>(gm.pad[0]);
            const bool zin = iz >= 0 && iz < static_cast<long>(gm.d);
            for (std::size_t y = 0; y < gm.oh; ++y) {
              const long iy = static_cast<long>(y * gm.stride[1] + b) - static_cast<long>(gm.pad[1]);
              const bool yin = zin && iy >= 0 && iy < static_cast<long>(gm.h);
              const Real* src = yin ? x + ((ci * gm.d + static_cast<std::size_t>(iz)) * gm.h + static_cast<std::size_t>(iy)) * gm.w
                                    : nullptr;
              for (std::size_t q = 0; q < gm.ow; ++q, ++col) {
                const long ix = static_cast<long>(q * gm.stride[2] + e) - static_cast<long>(gm.pad[2]);
                dst[col] = (yin && ix >= 0 && ix < static_cast<long>(gm.w)) ? src[ix] : Real(0);
              }
            }
          }
        }
}

template <typename Real>
void col2im_add(const Real* cols, const ConvGeometry& gm, Real* dx) {
  const std::size_t L = gm.out_cols();
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < gm.c; ++ci)
    for (std::size_t a = 0; a < gm.kd; ++a)
      for (std::size_t b = 0; b < gm.kh; ++b)
        for (std::size_t e = 0; e < gm.kw; ++e, ++row) {
          const Real* src = cols + row * L;
          std::size_t col = 0;
          for (std::size_t z = 0; z < gm.od; ++z) {
            const long iz = static_cast<long>(z * gm.stride[0] + a) - static_cast<long>(gm.pad[0]);
            const bool zin = iz >= 0 && iz < static_cast<long>(gm.d);
            for (std::size_t y = 0; y < gm.oh; ++y) {
              const long iy = static_cast<long>(y * gm.stride[1] + b) - static_cast<long>(gm.pad[1]);
              if (!(zin && iy >= 0 && iy < static_cast<long>(gm.h))) {
                col += gm.ow;
                continue;
              }
              Real* dst = dx + ((ci * gm.d + static_cast<std::size_t>(iz)) * gm.h + static_cast<std::size_t>(iy)) * gm.w;
              for (std::size_t q = 0; q < gm.ow; ++q, ++col) {
                const long ix = static_cast<long>(q * gm.stride[2] + e) - static_cast<long>(gm.pad[2]);
                if (ix >= 0 && ix < static_cast<long>(gm.w)) dst[ix] += src[col];
              }
            }
          }
        }
}

template <typename Real>
Var<Real> conv_impl(const char* op, Var<Real> x, Var<Real> w, Var<Real> b, const ConvGeometry& gm, Shape out_shape) {
  auto& g = same_graph(x, w);
  same_graph(x, b);
  require(b.value().size() == gm.o, std::string(op) + ": bias length mismatch");
  const std::size_t K = gm.k_rows(), L = gm.out_cols();
  std::vector<Real> cols(K * L);
  im2col(x.value().data(), gm, cols.data());
  Tensor<Real> out(std::move(out_shape));
  MapM<Real> om(out.data(), static_cast<Eigen::Index>(gm.o), static_cast<Eigen::Index>(L));
  om.noalias() = MapC<Real>(w.value().data(), gm.o, K) * MapC<Real>(cols.data(), K, L);
  for (std::size_t oc = 0; oc < gm.o; ++oc) om.row(static_cast<Eigen::Index>(oc)).array() += b.value()[oc];
  const int xi = x.id(), wi = w.id(), bi = b.id();
  return g.record(op, std::move(out), {xi, wi, bi}, [=](Graph<Real>& gr, const Tensor<Real>& go) {
    MapC<Real> gom(go.data(), gm.o, L);
    accumulate(gr, bi, [&](Tensor<Real>& acc) {
      for (std::size_t oc = 0; oc < gm.o; ++oc) acc[oc] += gom.row(static_cast<Eigen::Index>(oc)).sum();
    });
    const bool need_w = gr.requires_grad(wi), need_x = gr.requires_grad(xi);
    if (!need_w && !need_x) return;
    std::vector<Real> c(K * L);
    if (need_w) {
      im2col(gr.value(xi).data(), gm, c.data());
      accumulate(gr, wi, [&](Tensor<Real>& acc) {
        MapM<Real>(acc.data(), gm.o, K).noalias() += gom * MapC<Real>(c.data(), K, L).transpose();
      });
    }
    if (need_x) {
      MapM<Real>(c.data(), K, L).noalias() = MapC<Real>(gr.value(wi).data(), gm.o, K).transpose() * gom;
      accumulate(gr, xi, [&](Tensor<Real>& acc) { col2im_add(c.data(), gm, acc.data()); });
    }
  });
}

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  require(stride > 0, "convolution stride must be positive");
  require(in + 2 * pad >= kernel, "convolution kernel larger than padded input");
  return (in + 2 * pad - kernel) / stride + 1;
}

template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  auto& g = same_graph(a, b);
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<Real> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const int ai = a.id(), bi = b.id();
  return g.record("add", std::move(out), {ai, bi}, [ai, bi](Graph<Real>& gr, const Tensor<Real>& go) {
    for (int id : {ai, bi})
      accumulate(gr, id, [&](Tensor<Real>& acc) {
        for (std::size_t i = 0; i < go.size(); ++i) acc[i] += go[i];
      });
  });
}

template <typename Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
  auto& g = same_graph(a, b);
  require(a.shape() == b.shape(), "sub: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<Real> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const int ai = a.id(), bi = b.id();
  return g.record("sub", std::move(out), {ai, bi}, [ai, bi](Graph<Real>& gr, const Tensor<Real>& go) {
    accumulate(gr, ai, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < go.size(); ++i) acc[i] += go[i];
    });
    accumulate(gr, bi, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < go.size(); ++i) acc[i] -= go[i];
    });
  });
}

template <typename Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
  auto& g = same_graph(a, b);
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<Real> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const int ai = a.id(), bi = b.id();
  return g.record("mul", std::move(out), {ai, bi}, [ai, bi](Graph<Real>& gr, const Tensor<Real>& go) {
    const auto& av = gr.value(ai);
    const auto& bv = gr.value(bi);
    accumulate(gr, ai, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < go.size(); ++i) acc[i] += go[i] * bv[i];
    });
    accumulate(gr, bi, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < go.size(); ++i) acc[i] += go[i] * av[i];
    });
  });
}

template <typename Real>
Var<Real> div(Var<Real> a, Var<Real> b) {
  auto& g = same_graph(a, b);
  require(a.shape() == b.shape(), "div: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<Real> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  const int ai = a.id(), bi = b.id();
  return g.record("div", std::move(out), {ai, bi}, [ai, bi](Graph<Real>& gr, const Tensor<Real>& go) {
    const auto& av = gr.value(ai);
    const auto& bv = gr.value(bi);
    accumulate(gr, ai, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < go.size(); ++i) acc[i] += go[i] / bv[i];
    });
    accumulate(gr, bi, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < go.size(); ++i) acc[i] -= go[i] * av[i] / (bv[i] * bv[i]);
    });
  });
}

template <typename Real>
Var<Real> scale(Var<Real> a, Real factor) {
  auto& g = graph_of(a);
  Tensor<Real> out = a.value();
  for (auto& v : out.values()) v *= factor;
  const int ai = a.id();
  return g.record("scale", std::move(out), {ai}, [ai, factor](Graph<Real>& gr, const Tensor<Real>& go) {
    accumulate(gr, ai, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < go.size(); ++i) acc[i] += go[i] * factor;
    });
  });
}

template <typename Real>
Var<Real> add_scalar(Var<Real> a, Real offset) {
  auto& g = graph_of(a);
  Tensor<Real> out = a.value();
  for (auto& v : out.values()) v += offset;
  const int ai = a.id();
  return g.record("add_scalar", std::move(out), {ai}, [ai](Graph<Real>& gr, const Tensor<Real>& go) {
    accumulate(gr, ai, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < go.size(); ++i) acc[i] += go[i];
    });
  });
}

template <typename Real>
Var<Real> relu(Var<Real> x) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Real v : x.value().values()) h = (h ^ static_cast<std::uint64_t>(v > Real(0))) * 0x100000001b3ULL;
  graph_of(x).note_branch(h);
  return unary<Real>("relu", x, [](Real v) { return v > Real(0) ? v : Real(0); }, &relu_d<Real>);
}

template <typename Real>
Var<Real> sigmoid(Var<Real> x) {
  return unary<Real>("sigmoid", x, [](Real v) { return sigmoid_f(v); }, &sigmoid_d<Real>);
}

template <typename Real>
Var<Real> tanh(Var<Real> x) {
  return unary<Real>("tanh", x, [](Real v) { return std::tanh(v); }, &tanh_d<Real>);
}

template <typename Real>
Var<Real> square(Var<Real> x) {
  return unary<Real>("square", x, [](Real v) { return v * v; }, &square_d<Real>);
}

template <typename Real>
Var<Real> sqrt_eps(Var<Real> x, Real eps) {
  auto& g = graph_of(x);
  const auto& in = x.value();
  Tensor<Real> out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::sqrt(in[i] + eps);
  const int xi = x.id();
  return g.record("sqrt_eps", std::move(out), {xi}, [xi, eps](Graph<Real>& gr, const Tensor<Real>& go) {
    const auto& v = gr.value(xi);
    accumulate(gr, xi, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < v.size(); ++i) acc[i] += go[i] / (Real(2) * std::sqrt(v[i] + eps));
    });
  });
}

template <typename Real>
Var<Real> sum(Var<Real> x) {
  auto& g = graph_of(x);
  Real s = 0;
  for (auto v : x.value().values()) s += v;
  const int xi = x.id();
  return g.record("sum", Tensor<Real>::scalar(s), {xi}, [xi](Graph<Real>& gr, const Tensor<Real>& go) {
    accumulate(gr, xi, [&](Tensor<Real>& acc) {
      for (auto& v : acc.values()) v += go[0];
    });
  });
}

template <typename Real>
Var<Real> mean(Var<Real> x) {
  auto& g = graph_of(x);
  const auto n = static_cast<Real>(x.value().size());
  Real s = 0;
  for (auto v : x.value().values()) s += v;
  const int xi = x.id();
  return g.record("mean", Tensor<Real>::scalar(s / n), {xi}, [xi, n](Graph<Real>& gr, const Tensor<Real>& go) {
    accumulate(gr, xi, [&](Tensor<Real>& acc) {
      for (auto& v : acc.values()) v += go[0] / n;
    });
  });
}

template <typename Real>
Var<Real> row_sum(Var<Real> x) {
  auto& g = graph_of(x);
  require_rank(x.shape(), 2, "row_sum");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  Tensor<Real> out(Shape{n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i] += x.value()[i * d + j];
  const int xi = x.id();
  return g.record("row_sum", std::move(out), {xi}, [xi, n, d](Graph<Real>& gr, const Tensor<Real>& go) {
    accumulate(gr, xi, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) acc[i * d + j] += go[i];
    });
  });
}

template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
  auto& g = same_graph(a, b);
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  require(b.shape()[0] == k, "matmul: inner extents differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor<Real> out(Shape{m, n});
  MapM<Real>(out.data(), m, n).noalias() = MapC<Real>(a.value().data(), m, k) * MapC<Real>(b.value().data(), k, n);
  const int ai = a.id(), bi = b.id();
  return g.record("matmul", std::move(out), {ai, bi}, [=](Graph<Real>& gr, const Tensor<Real>& go) {
    MapC<Real> gm(go.data(), m, n);
    accumulate(gr, ai, [&](Tensor<Real>& acc) {
      MapM<Real>(acc.data(), m, k).noalias() += gm * MapC<Real>(gr.value(bi).data(), k, n).transpose();
    });
    accumulate(gr, bi, [&](Tensor<Real>& acc) {
      MapM<Real>(acc.data(), k, n).noalias() += MapC<Real>(gr.value(ai).data(), m, k).transpose() * gm;
    });
  });
}

template <typename Real>
Var<Real> spmm(const CsrMatrix& m, Var<Real> x) {
  auto& g = graph_of(x);
  require_rank(x.shape(), 2, "spmm");
  require(m.cols == x.shape()[0], "spmm: sparse operator has " + std::to_string(m.cols) + " columns, input has " +
                                      std::to_string(x.shape()[0]) + " rows");
  const std::size_t d = x.shape()[1];
  Tensor<Real> out(Shape{m.rows, d});
  const auto& xv = x.value();
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t k = m.row_ptr[r]; k < m.row_ptr[r + 1]; ++k) {
      const Real w = static_cast<Real>(m.values[k]);
      const Real* src = xv.data() + m.col_idx[k] * d;
      Real* dst = out.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += w * src[j];
    }
  const int xi = x.id();
  const CsrMatrix* mp = &m;
  return g.record("spmm", std::move(out), {xi}, [xi, mp, d](Graph<Real>& gr, const Tensor<Real>& go) {
    accumulate(gr, xi, [&](Tensor<Real>& acc) {
      for (std::size_t r = 0; r < mp->rows; ++r)
        for (std::size_t k = mp->row_ptr[r]; k < mp->row_ptr[r + 1]; ++k) {
          const Real w = static_cast<Real>(mp->values[k]);
          const Real* src = go.data() + r * d;
          Real* dst = acc.data() + mp->col_idx[k] * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += w * src[j];
        }
    });
  });
}

template <typename Real>
Var<Real> add_bias(Var<Real> x, Var<Real> bias) {
  auto& g = same_graph(x, bias);
  require_rank(x.shape(), 2, "add_bias");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  require(bias.value().size() == d, "add_bias: bias length " + std::to_string(bias.value().size()) + " vs width " +
                                        std::to_string(d));
  Tensor<Real> out = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bias.value()[j];
  const int xi = x.id(), bi = bias.id();
  return g.record("add_bias", std::move(out), {xi, bi}, [=](Graph<Real>& gr, const Tensor<Real>& go) {
    accumulate(gr, xi, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < go.size(); ++i) acc[i] += go[i];
    });
    accumulate(gr, bi, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) acc[j] += go[i * d + j];
    });
  });
}

template <typename Real>
Var<Real> scale_rows(Var<Real> x, Var<Real> s) {
  auto& g = same_graph(x, s);
  require_rank(x.shape(), 2, "scale_rows");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  require(s.value().size() == n, "scale_rows: expected " + std::to_string(n) + " row factors");
  Tensor<Real> out = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] *= s.value()[i];
  const int xi = x.id(), si = s.id();
  return g.record("scale_rows", std::move(out), {xi, si}, [=](Graph<Real>& gr, const Tensor<Real>& go) {
    const auto& xv = gr.value(xi);
    const auto& sv = gr.value(si);
    accumulate(gr, xi, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) acc[i * d + j] += go[i * d + j] * sv[i];
    });
    accumulate(gr, si, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) acc[i] += go[i * d + j] * xv[i * d + j];
    });
  });
}

template <typename Real>
Var<Real> cross_rows(Var<Real> a, Var<Real> b) {
  auto& g = same_graph(a, b);
  require(a.shape().size() == 2 && a.shape()[1] == 3 && a.shape() == b.shape(), "cross_rows: expects two [n, 3]");
  const std::size_t n = a.shape()[0];
  auto cross = [](const Real* u, const Real* v, Real* w) {
    w[0] = u[1] * v[2] - u[2] * v[1];
    w[1] = u[2] * v[0] - u[0] * v[2];
    w[2] = u[0] * v[1] - u[1] * v[0];
  };
  Tensor<Real> out(Shape{n, 3});
  for (std::size_t i = 0; i < n; ++i) cross(a.value().data() + 3 * i, b.value().data() + 3 * i, out.data() + 3 * i);
  const int ai = a.id(), bi = b.id();
  return g.record("cross_rows", std::move(out), {ai, bi}, [=](Graph<Real>& gr, const Tensor<Real>& go) {
    const auto& av = gr.value(ai);
    const auto& bv = gr.value(bi);
    Real t[3];
    accumulate(gr, ai, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < n; ++i) {
        cross(bv.data() + 3 * i, go.data() + 3 * i, t);
        for (int c = 0; c < 3; ++c) acc[3 * i + c] += t[c];
      }
    });
    accumulate(gr, bi, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < n; ++i) {
        cross(go.data() + 3 * i, av.data() + 3 * i, t);
        for (int c = 0; c < 3; ++c) acc[3 * i + c] += t[c];
      }
    });
  });
}

template <typename Real>
Var<Real> transpose(Var<Real> x) {
  auto& g = graph_of(x);
  require_rank(x.shape(), 2, "transpose");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  Tensor<Real> out(Shape{c, r});
  MapM<Real>(out.data(), c, r) = MapC<Real>(x.value().data(), r, c).transpose();
  const int xi = x.id();
  return g.record("transpose", std::move(out), {xi}, [=](Graph<Real>& gr, const Tensor<Real>& go) {
    accumulate(gr, xi, [&](Tensor<Real>& acc) {
      MapM<Real>(acc.data(), r, c) += MapC<Real>(go.data(), c, r).transpose();
    });
  });
}

template <typename Real>
Var<Real> reshape(Var<Real> x, Shape shape) {
  auto& g = graph_of(x);
  Tensor<Real> out = x.value().reshaped(std::move(shape));
  const int xi = x.id();
  return g.record("reshape", std::move(out), {xi}, [xi](Graph<Real>& gr, const Tensor<Real>& go) {
    accumulate(gr, xi, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < go.size(); ++i) acc[i] += go[i];
    });
  });
}

template <typename Real>
Var<Real> concat_cols(const std::vector<Var<Real>>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  auto& g = graph_of(parts[0]);
  const std::size_t n = parts[0].shape().at(0);
  std::vector<std::size_t> widths;
  std::vector<int> ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p.shape(), 2, "concat_cols");
    require(p.graph() == &g, "concat_cols: operands belong to different graphs");
    require(p.shape()[0] == n, "concat_cols: row count mismatch " + shape_string(p.shape()));
    widths.push_back(p.shape()[1]);
    ids.push_back(p.id());
    total += p.shape()[1];
  }
  Tensor<Real> out(Shape{n, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = v[i * widths[k] + j];
    off += widths[k];
  }
  return g.record("concat_cols", std::move(out), ids, [=](Graph<Real>& gr, const Tensor<Real>& go) {
    std::size_t o = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      accumulate(gr, ids[k], [&](Tensor<Real>& acc) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) acc[i * widths[k] + j] += go[i * total + o + j];
      });
      o += widths[k];
    }
  });
}

template <typename Real>
Var<Real> concat_rows(const std::vector<Var<Real>>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  auto& g = graph_of(parts[0]);
  const std::size_t d = parts[0].shape().at(1);
  std::vector<std::size_t> counts;
  std::vector<int> ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p.shape(), 2, "concat_rows");
    require(p.graph() == &g, "concat_rows: operands belong to different graphs");
    require(p.shape()[1] == d, "concat_rows: column count mismatch " + shape_string(p.shape()));
    counts.push_back(p.shape()[0]);
    ids.push_back(p.id());
    total += p.shape()[0];
  }
  Tensor<Real> out(Shape{total, d});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off);
    off += p.value().size();
  }
  return g.record("concat_rows", std::move(out), ids, [=](Graph<Real>& gr, const Tensor<Real>& go) {
    std::size_t o = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t len = counts[k] * d;
      accumulate(gr, ids[k], [&](Tensor<Real>& acc) {
        for (std::size_t i = 0; i < len; ++i) acc[i] += go[o + i];
      });
      o += len;
    }
  });
}

template <typename Real>
Var<Real> slice_rows(Var<Real> x, std::size_t begin, std::size_t end) {
  auto& g = graph_of(x);
  require_rank(x.shape(), 2, "slice_rows");
  require(begin <= end && end <= x.shape()[0], "slice_rows: range out of bounds");
  const std::size_t d = x.shape()[1];
  std::vector<Real> data(x.value().data() + begin * d, x.value().data() + end * d);
  const int xi = x.id();
  return g.record("slice_rows", Tensor<Real>(Shape{end - begin, d}, std::move(data)), {xi},
                  [=](Graph<Real>& gr, const Tensor<Real>& go) {
                    accumulate(gr, xi, [&](Tensor<Real>& acc) {
                      for (std::size_t i = 0; i < go.size(); ++i) acc[begin * d + i] += go[i];
                    });
                  });
}

template <typename Real>
Var<Real> slice_cols(Var<Real> x, std::size_t begin, std::size_t end) {
  auto& g = graph_of(x);
  require_rank(x.shape(), 2, "slice_cols");
  require(begin <= end && end <= x.shape()[1], "slice_cols: range out of bounds");
  const std::size_t n = x.shape()[0], d = x.shape()[1], w = end - begin;
  Tensor<Real> out(Shape{n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x.value()[i * d + begin + j];
  const int xi = x.id();
  return g.record("slice_cols", std::move(out), {xi}, [=](Graph<Real>& gr, const Tensor<Real>& go) {
    accumulate(gr, xi, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) acc[i * d + begin + j] += go[i * w + j];
    });
  });
}

template <typename Real>
Var<Real> gather_rows(Var<Real> x, const std::vector<std::size_t>& index) {
  auto& g = graph_of(x);
  require_rank(x.shape(), 2, "gather_rows");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  Tensor<Real> out(Shape{index.size(), d});
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < n, "gather_rows: index " + std::to_string(index[i]) + " out of range " + std::to_string(n));
    std::copy_n(x.value().data() + index[i] * d, d, out.data() + i * d);
  }
  const int xi = x.id();
  return g.record("gather_rows", std::move(out), {xi}, [xi, index, d](Graph<Real>& gr, const Tensor<Real>& go) {
    accumulate(gr, xi, [&](Tensor<Real>& acc) {
      for (std::size_t i = 0; i < index.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) acc[index[i] * d + j] += go[i * d + j];
    });
  });
}

template <typename Real>
Var<Real> conv2d(Var<Real> x, Var<Real> w, Var<Real> b, std::size_t stride, std::size_t pad) {
  require_rank(x.shape(), 3, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  require(ws[1] == xs[0], "conv2d: weight expects " + std::to_string(ws[1]) + " input channels, got " +
                              std::to_string(xs[0]));
  ConvGeometry gm{xs[0], 1, xs[1], xs[2], ws[0], 1, ws[2], ws[3], {1, stride, stride}, {0, pad, pad}, 1, 0, 0};
  gm.oh = conv_out_extent(gm.h, gm.kh, stride, pad);
  gm.ow = conv_out_extent(gm.w, gm.kw, stride, pad);
  return conv_impl<Real>("conv2d", x, w, b, gm, Shape{gm.o, gm.oh, gm.ow});
}

template <typename Real>
Var<Real> conv3d(Var<Real> x, Var<Real> w, Var<Real> b, std::array<std::size_t, 3> stride,
                 std::array<std::size_t, 3> pad) {
  require_rank(x.shape(), 4, "conv3d input");
  require_rank(w.shape(), 5, "conv3d weight");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  require(ws[1] == xs[0], "conv3d: weight expects " + std::to_string(ws[1]) + " input channels, got " +
                              std::to_string(xs[0]));
  ConvGeometry gm{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], ws[4], stride, pad, 0, 0, 0};
  gm.od = conv_out_extent(gm.d, gm.kd, stride[0], pad[0]);
  gm.oh = conv_out_extent(gm.h, gm.kh, stride[1], pad[1]);
  gm.ow = conv_out_extent(gm.w, gm.kw, stride[2], pad[2]);
  return conv_impl<Real>("conv3d", x, w, b, gm, Shape{gm.o, gm.od, gm.oh, gm.ow});
}

template <typename Real>
Var<Real> pool_grid(Var<Real> x, std::size_t gh, std::size_t gw) {
  auto& g = graph_of(x);
  require_rank(x.shape(), 4, "pool_grid");
  const std::size_t C = x.shape()[0], D = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  require(gh >= 1 && gw >= 1 && gh <= H && gw <= W, "pool_grid: grid larger than input");
  auto lo = [](std::size_t i, std::size_t in, std::size_t out) { return i * in / out; };
  auto hi = [](std::size_t i, std::size_t in, std::size_t out) { return ((i + 1) * in + out - 1) / out; };
  Tensor<Real> out(Shape{C, D, gh, gw});
  const auto& xv = x.value();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t i = 0; i < gh; ++i)
        for (std::size_t j = 0; j < gw; ++j) {
          Real s = 0;
          const std::size_t h0 = lo(i, H, gh), h1 = hi(i, H, gh), w0 = lo(j, W, gw), w1 = hi(j, W, gw);
          for (std::size_t y = h0; y < h1; ++y)
            for (std::size_t q = w0; q < w1; ++q) s += xv[((c * D + z) * H + y) * W + q];
          out[((c * D + z) * gh + i) * gw + j] = s / static_cast<Real>((h1 - h0) * (w1 - w0));
        }
  const int xi = x.id();
  return g.record("pool_grid", std::move(out), {xi}, [=](Graph<Real>& gr, const Tensor<Real>& go) {
    accumulate(gr, xi, [&](Tensor<Real>& acc) {
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t z = 0; z < D; ++z)
          for (std::size_t i = 0; i < gh; ++i)
            for (std::size_t j = 0; j < gw; ++j) {
              const std::size_t h0 = lo(i, H, gh), h1 = hi(i, H, gh), w0 = lo(j, W, gw), w1 = hi(j, W, gw);
              const Real share = go[((c * D + z) * gh + i) * gw + j] / static_cast<Real>((h1 - h0) * (w1 - w0));
              for (std::size_t y = h0; y < h1; ++y)
                for (std::size_t q = w0; q < w1; ++q) acc[((c * D + z) * H + y) * W + q] += share;
            }
    });
  });
}

template <typename Real>
Var<Real> mul_channels(Var<Real> x, Var<Real> a) {
  auto& g = same_graph(x, a);
  require_rank(x.shape(), 3, "mul_channels");
  const std::size_t C = x.shape()[0], P = x.shape()[1] * x.shape()[2];
  require(a.shape() == Shape{1, x.shape()[1], x.shape()[2]}, "mul_channels: map must be [1, H, W]");
  Tensor<Real> out = x.value();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < P; ++p) out[c * P + p] *= a.value()[p];
  const int xi = x.id(), ai = a.id();
  return g.record("mul_channels", std::move(out), {xi, ai}, [=](Graph<Real>& gr, const Tensor<Real>& go) {
    const auto& xv = gr.value(xi);
    const auto& av = gr.value(ai);
    accumulate(gr, xi, [&](Tensor<Real>& acc) {
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) acc[c * P + p] += go[c * P + p] * av[p];
    });
    accumulate(gr, ai, [&](Tensor<Real>& acc) {
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) acc[p] += go[c * P + p] * xv[c * P + p];
    });
  });
}

template <typename Real>
Var<Real> patch_mean(Var<Real> map, const std::vector<std::vector<std::size_t>>& patches) {
  auto& g = graph_of(map);
  require_rank(map.shape(), 3, "patch_mean");
  const std::size_t C = map.shape()[0], P = map.shape()[1] * map.shape()[2];
  Tensor<Real> out(Shape{patches.size(), C});
  const auto& mv = map.value();
  for (std::size_t r = 0; r < patches.size(); ++r) {
    require(!patches[r].empty(), "patch_mean: empty patch");
    const Real inv = Real(1) / static_cast<Real>(patches[r].size());
    for (std::size_t pix : patches[r]) {
      require(pix < P, "patch_mean: pixel index out of range");
      for (std::size_t c = 0; c < C; ++c) out[r * C + c] += mv[c * P + pix] * inv;
    }
  }
  const int mi = map.id();
  return g.record("patch_mean", std::move(out), {mi}, [=](Graph<Real>& gr, const Tensor<Real>& go) {
    accumulate(gr, mi, [&](Tensor<Real>& acc) {
      for (std::size_t r = 0; r < patches.size(); ++r) {
        const Real inv = Real(1) / static_cast<Real>(patches[r].size());
        for (std::size_t pix : patches[r])
          for (std::size_t c = 0; c < C; ++c) acc[c * P + pix] += go[r * C + c] * inv;
      }
    });
  });
}

template <typename Real>
Var<Real> rodrigues(Var<Real> axis_angle) {
  auto& g = graph_of(axis_angle);
  require(axis_angle.value().size() == 3, "rodrigues: expects 3 axis-angle components");
  using M3 = Eigen::Matrix<Real, 3, 3>;
  using V3 = Eigen::Matrix<Real, 3, 1>;
  auto hat = [](const V3& v) {
    M3 k;
    k << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return k;
  };
  auto rotation = [&](const V3& w) {
    const Real th = w.norm();
    const M3 K = hat(w);
    if (th < Real(1e-12)) return M3(M3::Identity() + K);
    return M3(M3::Identity() + (std::sin(th) / th) * K + ((Real(1) - std::cos(th)) / (th * th)) * K * K);
  };
  const V3 w(axis_angle.value()[0], axis_angle.value()[1], axis_angle.value()[2]);
  const M3 R = rotation(w);
  Tensor<Real> out(Shape{3, 3});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out[static_cast<std::size_t>(r * 3 + c)] = R(r, c);
  const int ai = axis_angle.id();
  return g.record("rodrigues", std::move(out), {ai}, [=](Graph<Real>& gr, const Tensor<Real>& go) {
    // dR/dw_i = (w_i [w]x + [w x (I - R) e_i]x) R / |w|^2, and [e_i]x at the origin.
    const Real th2 = w.squaredNorm();
    M3 G;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) G(r, c) = go[static_cast<std::size_t>(r * 3 + c)];
    accumulate(gr, ai, [&](Tensor<Real>& acc) {
      for (int i = 0; i < 3; ++i) {
        const V3 e = V3::Unit(i);
        M3 dR;
        if (th2 < Real(1e-20)) {
          dR = hat(e);
        } else {
          dR = (w[i] * hat(w) + hat(w.cross((M3::Identity() - R) * e))) * R / th2;
        }
        acc[static_cast<std::size_t>(i)] += (G.array() * dR.array()).sum();
      }
    });
  });
}

#define MICROFACE_INSTANTIATE(Real)                                                                                \
  template Var<Real> add(Var<Real>, Var<Real>);                                                                    \
  template Var<Real> sub(Var<Real>, Var<Real>);                                                                    \
  template Var<Real> mul(Var<Real>, Var<Real>);                                                                    \
  template Var<Real> div(Var<Real>, Var<Real>);                                                                    \
  template Var<Real> scale(Var<Real>, Real);                                                                       \
  template Var<Real> add_scalar(Var<Real>, Real);                                                                  \
  template Var<Real> relu(Var<Real>);                                                                              \
  template Var<Real> sigmoid(Var<Real>);                                                                           \
  template Var<Real> tanh(Var<Real>);                                                                              \
  template Var<Real> square(Var<Real>);                                                                            \
  template Var<Real> sqrt_eps(Var<Real>, Real);                                                                    \
  template Var<Real> sum(Var<Real>);                                                                               \
  template Var<Real> mean(Var<Real>);                                                                              \
  template Var<Real> row_sum(Var<Real>);                                                                           \
  template Var<Real> matmul(Var<Real>, Var<Real>);                                                                 \
  template Var<Real> spmm(const CsrMatrix&, Var<Real>);                                                            \
  template Var<Real> add_bias(Var<Real>, Var<Real>);                                                               \
  template Var<Real> scale_rows(Var<Real>, Var<Real>);                                                             \
  template Var<Real> cross_rows(Var<Real>, Var<Real>);                                                             \
  template Var<Real> transpose(Var<Real>);                                                                         \
  template Var<Real> reshape(Var<Real>, Shape);                                                                    \
  template Var<Real> concat_cols(const std::vector<Var<Real>>&);                                                   \
  template Var<Real> concat_rows(const std::vector<Var<Real>>&);                                                   \
  template Var<Real> slice_rows(Var<Real>, std::size_t, std::size_t);                                              \
  template Var<Real> slice_cols(Var<Real>, std::size_t, std::size_t);                                              \
  template Var<Real> gather_rows(Var<Real>, const std::vector<std::size_t>&);                                      \
  template Var<Real> conv2d(Var<Real>, Var<Real>, Var<Real>, std::size_t, std::size_t);                            \
  template Var<Real> conv3d(Var<Real>, Var<Real>, Var<Real>, std::array<std::size_t, 3>, std::array<std::size_t, 3>); \
  template Var<Real> pool_grid(Var<Real>, std::size_t, std::size_t);                                               \
  template Var<Real> mul_channels(Var<Real>, Var<Real>);                                                           \
  template Var<Real> patch_mean(Var<Real>, const std::vector<std::vector<std::size_t>>&);                          \
  template Var<Real> rodrigues(Var<Real>);

MICROFACE_INSTANTIATE(float)
MICROFACE_INSTANTIATE(double)

#undef MICROFACE_INSTANTIATE

}  // namespace microface
