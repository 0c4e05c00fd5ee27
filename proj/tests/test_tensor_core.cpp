#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "microface/gradcheck.hpp"
#include "microface/nn.hpp"
#include "microface/ops.hpp"
#include "microface/optim.hpp"

using namespace microface;

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = d(rng);
  return t;
}

// Direct-loop 3D convolution used as an independent oracle for the im2col path.
Tensor<double> naive_conv3d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                            std::array<std::size_t, 3> s, std::array<std::size_t, 3> p) {
  const auto C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto O = w.dim(0), KD = w.dim(2), KH = w.dim(3), KW = w.dim(4);
  const auto od = (D + 2 * p[0] - KD) / s[0] + 1, oh = (H + 2 * p[1] - KH) / s[1] + 1,
             ow = (W + 2 * p[2] - KW) / s[2] + 1;
  Tensor<double> out(Shape{O, od, oh, ow});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t q = 0; q < ow; ++q) {
          double acc = b[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t a = 0; a < KD; ++a)
              for (std::size_t e = 0; e < KH; ++e)
                for (std::size_t f = 0; f < KW; ++f) {
                  const long iz = long(z * s[0] + a) - long(p[0]);
                  const long iy = long(y * s[1] + e) - long(p[1]);
                  const long ix = long(q * s[2] + f) - long(p[2]);
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= long(D) || iy >= long(H) || ix >= long(W)) continue;
                  acc += w[(((o * C + c) * KD + a) * KH + e) * KW + f] * x[((c * D + iz) * H + iy) * W + ix];
                }
          out[((o * od + z) * oh + y) * ow + q] = acc;
        }
  return out;
}

// Weighted sum so every output entry gets a distinct upstream gradient.
Var<double> weighted_sum(Graph<double>& g, Var<double> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto w = g.constant(random_tensor(y.shape(), rng));
  return sum(mul(y, w));
}

}  // namespace

TEST_CASE("grad of linear and quadratic losses") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>(Shape{3}, {0.5, -1.0, 2.0}));
  g.backward(sum(x));
  auto gx = g.grad(x);
  for (std::size_t i = 0; i < 3; ++i) CHECK(gx[i] == 1.0);

  Graph<double> h;
  auto y = h.leaf(Tensor<double>(Shape{2}, {1.0, 2.0}));
  h.backward(sum(mul(y, y)));
  CHECK(h.grad(y)[0] == doctest::Approx(2.0));
  CHECK(h.grad(y)[1] == doctest::Approx(4.0));
}

TEST_CASE("sigmoid derivative at zero is one quarter") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>::scalar(0.0));
  auto s = sigmoid(x);
  CHECK(s.value().item() == doctest::Approx(0.5));
  g.backward(s);
  CHECK(g.grad(x).item() == doctest::Approx(0.25));
}

TEST_CASE("non-scalar loss is rejected") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>(Shape{2}, {1.0, 2.0}));
  CHECK_THROWS_AS(g.backward(x), ShapeError);
}

TEST_CASE("non-finite values are reported with the offending op") {
  Graph<double> g;
  auto x = g.leaf(Tensor<double>(Shape{1}, {-4.0}));
  try {
    sqrt_eps(x, 0.0);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("sqrt_eps") != std::string::npos);
  }

  Graph<double> h;
  auto z = h.leaf(Tensor<double>(Shape{1}, {0.0}));
  auto r = sqrt_eps(z, 0.0);  // forward is 0, derivative is infinite
  try {
    h.backward(sum(r));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("gradient") != std::string::npos);
  }
}

TEST_CASE("unreached parameters get zero gradients") {
  ParameterSet<double> params;
  params.add("used", Tensor<double>(Shape{2}, {1.0, 2.0}));
  params.add("unused", Tensor<double>(Shape{3}, 1.0));
  Graph<double> g(&params);
  auto grads = gradients(g, sum(square(g.param("used"))));
  CHECK(grads.at("used")[1] == doctest::Approx(4.0));
  for (auto v : grads.at("unused").values()) CHECK(v == 0.0);
}

TEST_CASE("parameter leaves are shared within a graph") {
  ParameterSet<double> params;
  params.add("w", Tensor<double>::scalar(3.0));
  Graph<double> g(&params);
  auto a = g.param("w");
  auto b = g.param("w");
  CHECK(a.id() == b.id());
  auto grads = gradients(g, mul(a, b));
  CHECK(grads.at("w").item() == doctest::Approx(6.0));
}

TEST_CASE("adam: zero gradient leaves parameters untouched") {
  ParameterSet<double> params;
  params.add("p", Tensor<double>(Shape{3}, {0.1, -0.2, 0.3}));
  AdamState<double> st;
  GradientMap<double> grads{{"p", Tensor<double>(Shape{3})}};
  adam_update(params, grads, st);
  CHECK(st.step == 1);
  CHECK(std::abs(params.get("p")[0] - 0.1) < 1e-12);
  CHECK(std::abs(params.get("p")[1] + 0.2) < 1e-12);
}

TEST_CASE("adam: first step moves by learning rate times sign, second step no larger") {
  ParameterSet<double> params;
  params.add("p", Tensor<double>(Shape{3}, {0.0, 0.0, 0.0}));
  AdamState<double> st;
  st.hyper.learning_rate = 1e-4;
  GradientMap<double> grads{{"p", Tensor<double>(Shape{3}, {0.5, -3.0, 1e-3})}};
  adam_update(params, grads, st);
  const auto first = params.get("p");
  CHECK(first[0] == doctest::Approx(-1e-4).epsilon(1e-6));
  CHECK(first[1] == doctest::Approx(1e-4).epsilon(1e-6));
  CHECK(first[2] == doctest::Approx(-1e-4).epsilon(1e-4));
  adam_update(params, grads, st);
  CHECK(st.step == 2);
  for (std::size_t i = 0; i < 3; ++i) {
    const double second = std::abs(params.get("p")[i] - first[i]);
    CHECK(second <= std::abs(first[i]) * 1.01);
  }
}

TEST_CASE("adam: shape mismatch is an error") {
  ParameterSet<double> params;
  params.add("p", Tensor<double>(Shape{3}));
  AdamState<double> st;
  GradientMap<double> grads{{"p", Tensor<double>(Shape{2})}};
  CHECK_THROWS_AS(adam_update(params, grads, st), ShapeError);
  CHECK(st.step == 0);
}

TEST_CASE("gradcheck examples") {
  std::mt19937_64 rng(7);
  auto x = random_tensor(Shape{5}, rng);
  CHECK(finite_diff_gradcheck([](Graph<double>&, Var<double> v) { return sum(mul(v, v)); }, x, 1e-5) < 1e-8);
  CHECK(finite_diff_gradcheck(
            [](Graph<double>& g, Var<double>) { return g.constant(Tensor<double>::scalar(3.0)); }, x, 1e-5) == 0.0);
  CHECK_THROWS_AS(finite_diff_gradcheck(
                      [](Graph<double>& g, Var<double> v) {
                        // NaN only at the +eps probe of the first coordinate
                        auto t = g.constant(Tensor<double>(v.shape(), 1.0));
                        return v.value()[0] > 0.2 ? sqrt_eps(scale(sum(t), -1.0), 0.0) : sum(v);
                      },
                      Tensor<double>(Shape{2}, {0.2, 0.0}), 1e-3),
                  NumericError);
}

TEST_CASE("every primitive passes a finite-difference check in 64-bit mode") {
  std::mt19937_64 rng(1234);
  const double eps = 1e-4;
  const double tol = 1e-6;
  auto check = [&](const char* name, Shape shape, auto&& body, double lo = -1.0, double hi = 1.0) {
    const std::uint64_t seed = rng();
    auto x = random_tensor(shape, rng, lo, hi);
    const double err = finite_diff_gradcheck(
        [&](Graph<double>& g, Var<double> v) { return weighted_sum(g, body(g, v), seed); }, x, eps);
    INFO(std::string(name));
    CHECK(err < tol);
  };
  auto c34 = random_tensor(Shape{3, 4}, rng);
  auto c4 = random_tensor(Shape{4}, rng);
  auto c3 = random_tensor(Shape{3}, rng);
  auto c33 = random_tensor(Shape{3, 3}, rng);
  auto pos34 = random_tensor(Shape{3, 4}, rng, 0.5, 2.0);
  check("add", {3, 4}, [&](Graph<double>& g, Var<double> v) { return add(v, g.constant(c34)); });
  check("sub", {3, 4}, [&](Graph<double>& g, Var<double> v) { return sub(g.constant(c34), v); });
  check("mul", {3, 4}, [&](Graph<double>& g, Var<double> v) { return mul(v, add(v, g.constant(c34))); });
  check("div numerator", {3, 4}, [&](Graph<double>& g, Var<double> v) { return div(v, g.constant(pos34)); });
  check("div denominator", {3, 4}, [&](Graph<double>& g, Var<double> v) { return div(g.constant(c34), v); }, 0.5, 2.0);
  check("scale", {3, 4}, [](Graph<double>&, Var<double> v) { return scale(v, -2.5); });
  check("add_scalar", {3, 4}, [](Graph<double>&, Var<double> v) { return add_scalar(v, 0.7); });
  check("relu", {3, 4}, [](Graph<double>&, Var<double> v) { return relu(v); });
  check("sigmoid", {3, 4}, [](Graph<double>&, Var<double> v) { return sigmoid(v); });
  check("tanh", {3, 4}, [](Graph<double>&, Var<double> v) { return tanh(v); });
  check("square", {3, 4}, [](Graph<double>&, Var<double> v) { return square(v); });
  check("sqrt_eps", {3, 4}, [](Graph<double>&, Var<double> v) { return sqrt_eps(v, 1e-12); }, 0.1, 2.0);
  check("sum", {3, 4}, [](Graph<double>&, Var<double> v) { return reshape(sum(v), Shape{1}); });
  check("mean", {3, 4}, [](Graph<double>&, Var<double> v) { return reshape(mean(v), Shape{1}); });
  check("row_sum", {3, 4}, [](Graph<double>&, Var<double> v) { return row_sum(v); });
  check("matmul left", {2, 3}, [&](Graph<double>& g, Var<double> v) { return matmul(v, g.constant(c34)); });
  check("matmul right", {3, 4}, [&](Graph<double>& g, Var<double> v) { return matmul(g.constant(c33), v); });
  check("add_bias", {4}, [&](Graph<double>& g, Var<double> v) { return add_bias(g.constant(c34), v); });
  check("scale_rows x", {3, 4}, [&](Graph<double>& g, Var<double> v) { return scale_rows(v, g.constant(c3)); });
  check("scale_rows s", {3}, [&](Graph<double>& g, Var<double> v) { return scale_rows(g.constant(c34), v); });
  check("cross_rows", {3, 3}, [&](Graph<double>& g, Var<double> v) { return cross_rows(v, add(v, g.constant(c33))); });
  check("transpose", {3, 4}, [](Graph<double>&, Var<double> v) { return transpose(v); });
  check("reshape", {3, 4}, [](Graph<double>&, Var<double> v) { return reshape(v, Shape{2, 6}); });
  check("concat_cols", {3, 4}, [&](Graph<double>& g, Var<double> v) {
    return concat_cols<double>({v, g.constant(c33), v});
  });
  check("concat_rows", {3, 4}, [&](Graph<double>& g, Var<double> v) { return concat_rows<double>({g.constant(c34), v}); });
  check("slice_rows", {3, 4}, [](Graph<double>&, Var<double> v) { return slice_rows(v, 1, 3); });
  check("slice_cols", {3, 4}, [](Graph<double>&, Var<double> v) { return slice_cols(v, 1, 3); });
  check("gather_rows", {3, 4}, [](Graph<double>&, Var<double> v) {
    return gather_rows(v, std::vector<std::size_t>{2, 0, 2, 1});
  });
  check("spmm", {3, 2}, [](Graph<double>&, Var<double> v) {
    static const CsrMatrix m = CsrMatrix::from_triplets(4, 3, {{0, 0, 1.0}, {0, 2, -0.5}, {1, 1, 2.0}, {3, 2, 0.3}});
    return spmm(m, v);
  });
  auto w2 = random_tensor(Shape{3, 2, 3, 3}, rng);
  auto b3 = random_tensor(Shape{3}, rng);
  check("conv2d input", {2, 6, 5}, [&](Graph<double>& g, Var<double> v) {
    return conv2d(v, g.constant(w2), g.constant(b3), 2, 1);
  });
  auto x2 = random_tensor(Shape{2, 6, 5}, rng);
  check("conv2d weight", {3, 2, 3, 3}, [&](Graph<double>& g, Var<double> v) {
    return conv2d(g.constant(x2), v, g.constant(b3), 1, 1);
  });
  check("conv2d bias", {3}, [&](Graph<double>& g, Var<double> v) {
    return conv2d(g.constant(x2), g.constant(w2), v, 1, 0);
  });
  auto w3 = random_tensor(Shape{2, 2, 3, 3, 3}, rng);
  auto b2 = random_tensor(Shape{2}, rng);
  auto x3 = random_tensor(Shape{2, 3, 5, 4}, rng);
  check("conv3d input", {2, 3, 5, 4}, [&](Graph<double>& g, Var<double> v) {
    return conv3d(v, g.constant(w3), g.constant(b2), {1, 2, 2}, {1, 1, 1});
  });
  check("conv3d weight", {2, 2, 3, 3, 3}, [&](Graph<double>& g, Var<double> v) {
    return conv3d(g.constant(x3), v, g.constant(b2), {1, 1, 1}, {1, 1, 1});
  });
  check("pool_grid", {2, 2, 5, 4}, [](Graph<double>&, Var<double> v) { return pool_grid(v, 2, 3); });
  auto a1 = random_tensor(Shape{1, 4, 3}, rng);
  check("mul_channels x", {2, 4, 3}, [&](Graph<double>& g, Var<double> v) { return mul_channels(v, g.constant(a1)); });
  auto x243 = random_tensor(Shape{2, 4, 3}, rng);
  check("mul_channels map", {1, 4, 3}, [&](Graph<double>& g, Var<double> v) {
    return mul_channels(g.constant(x243), v);
  });
  check("patch_mean", {2, 4, 3}, [](Graph<double>&, Var<double> v) {
    return patch_mean(v, std::vector<std::vector<std::size_t>>{{0, 1, 4}, {11}, {3, 4, 5, 6}});
  });
  check("rodrigues", {3}, [](Graph<double>&, Var<double> v) { return rodrigues(v); });
  check("rodrigues near zero", {3}, [](Graph<double>&, Var<double> v) { return rodrigues(scale(v, 1e-3)); });
}

TEST_CASE("concat backward splits gradients with the forward shapes") {
  Graph<double> g;
  auto a = g.leaf(Tensor<double>(Shape{2, 1}, 1.0));
  auto b = g.leaf(Tensor<double>(Shape{2, 3}, 2.0));
  auto c = concat_cols<double>({a, b});
  CHECK(c.shape() == Shape{2, 4});
  g.backward(sum(c));
  CHECK(g.grad(a).shape() == a.shape());
  CHECK(g.grad(b).shape() == b.shape());
}

TEST_CASE("3D convolution extents follow the floor formula") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<std::size_t> ext(3, 9), k(1, 3), s(1, 3), p(0, 1);
    const std::array<std::size_t, 3> in{ext(rng), ext(rng), ext(rng)};
    const std::array<std::size_t, 3> ks{k(rng), k(rng), k(rng)}, st{s(rng), s(rng), s(rng)}, pd{p(rng), p(rng), p(rng)};
    Graph<double> g;
    auto x = g.constant(random_tensor(Shape{2, in[0], in[1], in[2]}, rng));
    auto w = g.constant(random_tensor(Shape{3, 2, ks[0], ks[1], ks[2]}, rng));
    auto b = g.constant(random_tensor(Shape{3}, rng));
    auto y = conv3d(x, w, b, st, pd);
    for (int a = 0; a < 3; ++a) CHECK(y.shape()[1 + a] == (in[a] + 2 * pd[a] - ks[a]) / st[a] + 1);
    auto ref = naive_conv3d(x.value(), w.value(), b.value(), st, pd);
    REQUIRE(ref.shape() == y.shape());
    double worst = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(ref[i] - y.value()[i]));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("identical seeds give bit-identical forward and backward passes") {
  auto run = [] {
    Rng rng(42);
    ParameterSet<float> params;
    init_mlp(params, "net", {5, 16, 3}, rng);
    Graph<float> g(&params);
    std::uniform_real_distribution<float> d(-1, 1);
    Tensor<float> x(Shape{7, 5});
    for (auto& v : x.values()) v = d(rng);
    auto loss = mean(square(mlp(g, g.constant(x), "net", 2)));
    auto grads = gradients(g, loss);
    return std::make_pair(loss.value().item(), grads);
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  for (const auto& [name, t] : g1) CHECK(t.storage() == g2.at(name).storage());
}

TEST_CASE("MXT1 round-trips random tensors bit-exactly") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> rank_d(0, 4), ext_d(1, 5);
  std::normal_distribution<float> val(0.f, 10.f);
  for (int trial = 0; trial < 25; ++trial) {
    Shape shape(rank_d(rng));
    for (auto& e : shape) e = ext_d(rng);
    Tensor<float> t(shape);
    for (auto& v : t.values()) v = val(rng);
    std::stringstream ss;
    write_mxt(ss, t);
    CHECK(ss.str().size() == 8 + 4 * shape.size() + 4 * t.size());
    CHECK(ss.str().substr(0, 4) == "MXT1");
    auto back = read_mxt(ss, "mem");
    CHECK(back.shape() == t.shape());
    CHECK(back.storage() == t.storage());
  }
}

TEST_CASE("truncated MXT1 names expected and actual byte counts") {
  Tensor<float> t(Shape{2, 3}, 1.5f);
  std::stringstream ss;
  write_mxt(ss, t);
  std::string bytes = ss.str();
  bytes.resize(bytes.size() - 5);
  std::stringstream cut(bytes);
  try {
    read_mxt(cut, "flow_1.mxt");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("flow_1.mxt") != std::string::npos);
    CHECK(msg.find("expected 24") != std::string::npos);
    CHECK(msg.find("got 19") != std::string::npos);
  }
  std::stringstream bad("XXXX");
  CHECK_THROWS_AS(read_mxt(bad, "x"), IoError);
}
