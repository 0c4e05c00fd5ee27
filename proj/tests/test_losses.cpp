#include <cmath>
#include <random>

#include "doctest.h"
#include "microface/gradcheck.hpp"
#include "microface/losses.hpp"
#include "microface/mesh_ops.hpp"
#include "microface/ops.hpp"

using namespace microface;

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = d(rng);
  return t;
}

// 3 x 3 grid in the z = 4 plane, 8 triangles.
Mesh small_grid() {
  Mesh m;
  m.vertices.resize(9, 3);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m.vertices.row(r * 3 + c) << 0.3 * (c - 1), 0.3 * (r - 1), 4.0;
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      const int a = r * 3 + c;
      m.faces.push_back({a, a + 4, a + 1});
      m.faces.push_back({a, a + 3, a + 4});
    }
  return m;
}

Tensor<double> to_tensor(const Vertices& v) {
  Tensor<double> t(Shape{static_cast<std::size_t>(v.rows()), 3});
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (int k = 0; k < 3; ++k) t.at(static_cast<std::size_t>(i), static_cast<std::size_t>(k)) = v(i, k);
  return t;
}

AttentionField uniform_attention(std::size_t n, double w) {
  AttentionField a;
  a.weight.assign(n, w);
  a.low.assign(n, w < 0.5);
  return a;
}

double scalar(Var<double> v) { return v.value().item(); }

}  // namespace

TEST_CASE("laplacian loss vanishes for constant and zero displacement") {
  const Mesh m = small_grid();
  const auto L = uniform_laplacian(build_adjacency(m));
  Graph<double> g;
  Tensor<double> c(Shape{9, 3});
  for (std::size_t i = 0; i < 9; ++i) c.at(i, 0) = 0.7, c.at(i, 1) = -1.3, c.at(i, 2) = 2.1;
  CHECK(std::abs(scalar(laplacian_loss(L, g.constant(c)))) < 1e-24);
  CHECK(scalar(laplacian_loss(L, g.constant(Tensor<double>(Shape{9, 3})))) == 0.0);

  // 32-bit: zero up to float rounding of the constant rows.
  Graph<float> gf;
  auto lf = laplacian_loss(L, gf.constant(c.cast<float>()));
  CHECK(std::abs(lf.value().item()) < 1e-10f);
}

TEST_CASE("laplacian loss on a single edge matches hand evaluation") {
  const auto L = uniform_laplacian(CsrMatrix::from_triplets(2, 2, {{0, 1, 1.0}, {1, 0, 1.0}}));
  Graph<double> g;
  // One scalar channel: ΔV = (0, 2) -> LΔV = (-2, 2) (up to sign convention), mean of squares = 4.
  auto d = g.constant(Tensor<double>(Shape{2, 1}, {0.0, 2.0}));
  CHECK(scalar(laplacian_loss(L, d)) == doctest::Approx(4.0));
}

TEST_CASE("laplacian loss is invariant to adding a constant row") {
  const Mesh m = small_grid();
  const auto L = uniform_laplacian(build_adjacency(m));
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto d = random_tensor(Shape{9, 3}, rng);
    auto shifted = d;
    const double s[3] = {std::uniform_real_distribution<double>(-5, 5)(rng), 1.5, -0.25};
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t k = 0; k < 3; ++k) shifted.at(i, k) += s[k];
    Graph<double> g;
    const double a = scalar(laplacian_loss(L, g.constant(d)));
    const double b = scalar(laplacian_loss(L, g.constant(shifted)));
    CHECK(b == doctest::Approx(a).epsilon(1e-12));
  }
}

TEST_CASE("normal loss: identical meshes give 0, a flipped single face gives 2") {
  const Mesh m = small_grid();
  Graph<double> g;
  auto v = g.constant(to_tensor(m.vertices));
  CHECK(std::abs(scalar(normal_loss(v, v, m.faces))) < 1e-9);

  Faces one{{0, 1, 2}};
  Tensor<double> a(Shape{3, 3}, {0, 0, 4, 1, 0, 4, 0, 1, 4});
  // Reflect vertex 2 through the line of the opposite edge: the triangle's winding reverses.
  Tensor<double> b(Shape{3, 3}, {0, 0, 4, 1, 0, 4, 0, -1, 4});
  CHECK(scalar(normal_loss(g.constant(b), g.constant(a), one)) == doctest::Approx(2.0));
}

TEST_CASE("normal loss stays in [0, 2] for random perturbations") {
  const Mesh m = small_grid();
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    Graph<double> g;
    auto base = to_tensor(m.vertices);
    auto pert = base;
    const auto noise = random_tensor(Shape{9, 3}, rng, -0.4, 0.4);
    for (std::size_t i = 0; i < pert.size(); ++i) pert[i] += noise[i];
    const double l = scalar(normal_loss(g.constant(pert), g.constant(base), m.faces));
    CHECK(l >= -1e-12);
    CHECK(l <= 2.0 + 1e-12);
  }
}

TEST_CASE("flow guide loss matches hand-evaluated values") {
  const std::size_t n = 6;
  const double c = 0.37;
  Tensor<double> d(Shape{n, 3});
  // Rows of norm c in varying directions.
  for (std::size_t i = 0; i < n; ++i) {
    const double a = 0.9 * static_cast<double>(i);
    d.at(i, 0) = c * std::cos(a) * 0.6;
    d.at(i, 1) = c * std::sin(a) * 0.6;
    d.at(i, 2) = c * 0.8;
  }
  Graph<double> g;
  // Zero displacement: only the smoothing term sqrt(1e-12) survives.
  CHECK(std::abs(scalar(flow_guide_loss(g.constant(Tensor<double>(Shape{n, 3})), uniform_attention(n, 0.9)))) < 1e-6);
  CHECK(std::abs(scalar(flow_guide_loss(g.constant(d), uniform_attention(n, 0.9))) - (-0.09 * c)) < 1e-6);
  CHECK(std::abs(scalar(flow_guide_loss(g.constant(d), uniform_attention(n, 0.4))) - 0.96 * c) < 1e-6);
}

TEST_CASE("flow guide loss is bounded below by -0.1 mean |dV|") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(1e-3, 1.0 - 1e-3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 7;
    auto d = random_tensor(Shape{n, 3}, rng);
    AttentionField a;
    for (std::size_t i = 0; i < n; ++i) {
      a.weight.push_back(u(rng));
      a.low.push_back(a.weight.back() < 0.5);
    }
    double mean_norm = 0;
    for (std::size_t i = 0; i < n; ++i)
      mean_norm += std::sqrt(d.at(i, 0) * d.at(i, 0) + d.at(i, 1) * d.at(i, 1) + d.at(i, 2) * d.at(i, 2)) / n;
    Graph<double> g;
    CHECK(scalar(flow_guide_loss(g.constant(d), a)) >= -0.1 * mean_norm - 1e-12);
  }
}

TEST_CASE("surrogate: perfect prediction leaves only the expression prior") {
  const Mesh m = small_grid();
  const Camera cam = Camera::for_image(64, 64);
  const std::vector<int> idx{0, 4, 8};
  Landmarks2d tgt(3, 2);
  for (int i = 0; i < 3; ++i) tgt.row(i) = project(m.vertices.row(idx[i]).transpose(), cam).transpose();
  LossWeights w;
  w.lmk = 1.0;
  w.reg = 0.01;
  w.vtx = 10.0;
  Graph<double> g;
  auto v = g.constant(to_tensor(m.vertices));
  auto psi = g.constant(Tensor<double>(Shape{3}, {0.5, -1.0, 2.0}));
  auto s = reconstruction_surrogate(v, idx, tgt, cam, psi, &m.vertices, w);
  CHECK(scalar(s.landmark) < 1e-5);  // smoothed norm contributes sqrt(1e-12)
  CHECK(scalar(s.vertex) == 0.0);
  CHECK(scalar(s.total) == doctest::Approx(0.01 * 5.25).epsilon(1e-4));

  auto zero_psi = g.constant(Tensor<double>(Shape{3}));
  CHECK(scalar(reconstruction_surrogate(v, idx, tgt, cam, zero_psi, &m.vertices, w).total) < 1e-5);
}

TEST_CASE("surrogate landmark term for a uniform 2 px error") {
  const Mesh m = small_grid();
  const Camera cam = Camera::for_image(64, 64);
  const std::vector<int> idx{0, 2, 4, 6, 8};
  Landmarks2d tgt(5, 2);
  for (int i = 0; i < 5; ++i) {
    const Vec2 p = project(m.vertices.row(idx[i]).transpose(), cam);
    const double a = 1.1 * i;
    tgt.row(i) << p.x() + 2.0 * std::cos(a), p.y() + 2.0 * std::sin(a);
  }
  LossWeights w;
  w.lmk = 0.75;
  w.reg = 0;
  w.vtx = 0;
  Graph<double> g;
  auto s = reconstruction_surrogate(g.constant(to_tensor(m.vertices)), idx, tgt, cam, g.constant(Tensor<double>(Shape{2})),
                                    nullptr, w);
  CHECK(scalar(s.landmark) == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(scalar(s.total) == doctest::Approx(2.0 * 0.75).epsilon(1e-9));
}

TEST_CASE("surrogate rejects a landmark count mismatch") {
  const Mesh m = small_grid();
  Graph<double> g;
  LossWeights w;
  CHECK_THROWS_AS(reconstruction_surrogate(g.constant(to_tensor(m.vertices)), {0, 1}, Landmarks2d(3, 2),
                                           Camera::for_image(64, 64), g.constant(Tensor<double>(Shape{1})), nullptr, w),
                  ShapeError);
}

TEST_CASE("total loss follows the weighted sum") {
  Graph<double> g;
  auto one = [&] { return g.constant(Tensor<double>::scalar(1.0)); };
  LossWeights w;
  w.geo = 1;
  w.lap = 10;
  w.normal = 1;
  w.flow_guide = 0.5;
  CHECK(scalar(total_loss<double>({one(), one(), one(), one()}, w)) == doctest::Approx(12.5));

  auto zero = [&] { return g.constant(Tensor<double>::scalar(0.0)); };
  CHECK(scalar(total_loss<double>({zero(), zero(), zero(), zero()}, w)) == 0.0);

  w.geo = 0;
  auto rec = g.constant(Tensor<double>::scalar(3.25));
  CHECK(scalar(total_loss<double>({rec, one(), one(), one()}, w)) == 3.25);
}

TEST_CASE("total loss is linear in each part") {
  LossWeights w;
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int trial = 0; trial < 20; ++trial) {
    double p[4] = {u(rng), u(rng), u(rng), u(rng)};
    Graph<double> g;
    auto eval = [&](const double* q) {
      return scalar(total_loss<double>({g.constant(Tensor<double>::scalar(q[0])), g.constant(Tensor<double>::scalar(q[1])),
                                        g.constant(Tensor<double>::scalar(q[2])), g.constant(Tensor<double>::scalar(q[3]))},
                                       w));
    };
    const double base = eval(p);
    const double coef[4] = {1.0, w.geo * w.lap, w.geo * w.normal, w.geo * w.flow_guide};
    for (int k = 0; k < 4; ++k) {
      double q[4] = {p[0], p[1], p[2], p[3]};
      q[k] += 1.5;
      CHECK(eval(q) - base == doctest::Approx(1.5 * coef[k]).epsilon(1e-12));
    }
  }
}

TEST_CASE("total loss names a malformed part and the graph refuses non-finite values") {
  Graph<double> g;
  auto ok = g.constant(Tensor<double>::scalar(1.0));
  auto vec = g.constant(Tensor<double>(Shape{2}, {1.0, 2.0}));
  try {
    total_loss<double>({ok, ok, vec, ok}, LossWeights{});
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("normal") != std::string::npos);
  }
  CHECK_THROWS_AS(g.constant(Tensor<double>::scalar(std::nan(""))), NumericError);
}

TEST_CASE("loss gradients match central differences") {
  const Mesh m = small_grid();
  const auto L = uniform_laplacian(build_adjacency(m));
  std::mt19937_64 rng(5);
  const auto x0 = random_tensor(Shape{9, 3}, rng, -0.05, 0.05);

  auto lap = [&](Graph<double>& g, Var<double> x) { return laplacian_loss(L, x); };
  CHECK(finite_diff_gradcheck(lap, x0, 1e-4) < 1e-5);

  AttentionField attn;
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (int i = 0; i < 9; ++i) {
    attn.weight.push_back(u(rng));
    attn.low.push_back(attn.weight.back() < 0.5);
  }
  auto fg = [&](Graph<double>& g, Var<double> x) { return flow_guide_loss(x, attn); };
  CHECK(finite_diff_gradcheck(fg, x0, 1e-4) < 1e-5);

  const auto base = to_tensor(m.vertices);
  auto nl = [&](Graph<double>& g, Var<double> x) { return normal_loss(add(g.constant(base), x), g.constant(base), m.faces); };
  auto x1 = random_tensor(Shape{9, 3}, rng, -0.1, 0.1);
  CHECK(finite_diff_gradcheck(nl, x1, 1e-4) < 1e-5);

  const Camera cam = Camera::for_image(64, 64);
  const std::vector<int> idx{1, 3, 5, 7};
  Landmarks2d tgt(4, 2);
  for (int i = 0; i < 4; ++i) tgt.row(i) << 20 + 5 * i, 30 - 3 * i;
  LossWeights w;
  w.vtx = 2.0;
  const Vertices gt = m.vertices.array() + 0.01;
  auto sur = [&](Graph<double>& g, Var<double> x) {
    auto v = add(g.constant(base), x);
    auto psi = slice_rows(reshape(x, Shape{27, 1}), 0, 4);
    return reconstruction_surrogate(v, idx, tgt, cam, psi, &gt, w).total;
  };
  CHECK(finite_diff_gradcheck(sur, x1, 1e-4) < 1e-5);
}
