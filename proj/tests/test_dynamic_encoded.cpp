#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "microface/dynamic_encoded.hpp"
#include "microface/gradcheck_suite.hpp"
#include "microface/ops.hpp"

using namespace microface;

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = d(rng);
  return t;
}

DynamicConfig small_config(std::size_t n_expr = 3) {
  DynamicConfig c;
  c.n_expression = n_expr;
  c.encoder_channels = {3, 4};
  c.pool_grid = 2;
  c.flow_scale = 1.0;
  c.latent_dim = 4;
  c.ode_hidden = 6;
  c.steps_per_interval = 8;
  return c;
}

ParameterSet<double> dem_params(const DynamicConfig& cfg, std::uint64_t seed, bool random_last_layer = true) {
  ParameterSet<double> p;
  Rng rng(seed);
  init_dynamic_encoded(p, cfg, rng);
  if (random_last_layer) {
    std::mt19937_64 r(seed + 100);
    p.get_mut("dem.ode.l2.w") = random_tensor(p.get("dem.ode.l2.w").shape(), r, -0.5, 0.5);
  }
  return p;
}

std::vector<FlowField> random_flows(std::size_t n, std::size_t H, std::size_t W, std::mt19937_64& rng, double lo = -1,
                                    double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<FlowField> out;
  for (std::size_t i = 0; i < n; ++i) {
    FlowField f(Shape{H, W, 2});
    for (auto& v : f.values()) v = static_cast<float>(d(rng));
    out.push_back(std::move(f));
  }
  return out;
}

Eigen::MatrixXd rows(const Tensor<double>& t) {
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m(i, j) = t.at(i, j);
  return m;
}

}  // namespace

TEST_CASE("motion_encode: zero flow gives the zero head bias") {
  const auto cfg = small_config();
  auto params = dem_params(cfg, 1);
  Graph<double> g(&params);
  std::vector<FlowField> flows(4, FlowField(Shape{16, 16, 2}));
  auto out = motion_encode(g, g.constant(flow_volume<double>(flows)), cfg);
  CHECK(out.shape() == Shape{4, 3});
  for (double v : out.value().values()) CHECK(v == 0.0);
}

TEST_CASE("motion_encode is equivariant to the order of sequences") {
  const auto cfg = small_config();
  auto params = dem_params(cfg, 2);
  std::mt19937_64 rng(3);
  const auto a = random_flows(3, 16, 16, rng), b = random_flows(3, 16, 16, rng);
  Graph<double> g(&params);
  const std::vector<std::vector<FlowField>> ab{a, b}, ba{b, a};
  std::vector<Tensor<double>> first, second;
  for (const auto& s : ab) first.push_back(motion_encode(g, g.constant(flow_volume<double>(s)), cfg).value());
  for (const auto& s : ba) second.push_back(motion_encode(g, g.constant(flow_volume<double>(s)), cfg).value());
  CHECK(std::ranges::equal(first[0].values(), second[1].values()));
  CHECK(std::ranges::equal(first[1].values(), second[0].values()));
}

TEST_CASE("motion features are positively homogeneous when every gate stays open") {
  const auto cfg = small_config();
  auto params = dem_params(cfg, 4);
  std::mt19937_64 rng(5);
  for (const auto& name : params.names())
    if (name.rfind("dem.enc.conv", 0) == 0)
      params.get_mut(name) = name.back() == 'b' ? Tensor<double>(params.get(name).shape())
                                                : random_tensor(params.get(name).shape(), rng, 0.01, 0.3);
  const auto flows = random_flows(4, 16, 16, rng, 0.1, 1.0);
  auto doubled = flows;
  for (auto& f : doubled)
    for (auto& v : f.values()) v *= 2.0f;
  Graph<double> g(&params);
  const auto a = motion_features(g, g.constant(flow_volume<double>(flows)), cfg).value();
  const auto b = motion_features(g, g.constant(flow_volume<double>(doubled)), cfg).value();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(2.0 * a[i]).epsilon(1e-12));
  for (double v : a.values()) CHECK(v > 0.0);
}

TEST_CASE("motion features shift with the flow volume on interior frames") {
  auto cfg = small_config();
  auto params = dem_params(cfg, 6);
  std::mt19937_64 rng(7);
  for (const auto& name : params.names())
    if (name.rfind("dem.enc.conv", 0) == 0 && name.back() == 'b') params.get_mut(name) = random_tensor(params.get(name).shape(), rng, -0.2, 0.2);
  const std::size_t D = 10;
  const auto content = random_flows(4, 16, 16, rng);
  std::vector<FlowField> a(D, FlowField(Shape{16, 16, 2})), b = a;
  for (std::size_t i = 0; i < 4; ++i) {
    a[3 + i] = content[i];
    b[4 + i] = content[i];
  }
  Graph<double> g(&params);
  const auto fa = motion_features(g, g.constant(flow_volume<double>(a)), cfg).value();
  const auto fb = motion_features(g, g.constant(flow_volume<double>(b)), cfg).value();
  const std::size_t F = fa.dim(1);
  // Two temporal 3-taps reach 2 frames; frames 2..7 of `a` never see padding in either volume.
  for (std::size_t k = 2; k + 2 < D - 1; ++k)
    for (std::size_t j = 0; j < F; ++j) CHECK(fb.at(k + 1, j) == doctest::Approx(fa.at(k, j)).epsilon(1e-12));
}

TEST_CASE("flow_volume rejects mismatched extents") {
  std::vector<FlowField> flows{FlowField(Shape{8, 8, 2}), FlowField(Shape{8, 9, 2})};
  CHECK_THROWS_AS(flow_volume<double>(flows), ShapeError);
  CHECK_THROWS_AS(flow_volume<double>({}), ShapeError);
}

TEST_CASE("ode_fuse at t = 0 is D(E(psi1))") {
  const auto cfg = small_config();
  auto params = dem_params(cfg, 8);
  std::mt19937_64 rng(9);
  params.get_mut("dem.latent_enc.b") = random_tensor(Shape{4}, rng);
  params.get_mut("dem.latent_dec.b") = random_tensor(Shape{3}, rng);
  const auto psi1 = random_tensor(Shape{3}, rng);
  Graph<double> g(&params);
  auto out = ode_fuse(g, g.constant(psi1), g.constant(random_tensor(Shape{5, 3}, rng)), {0.0}, cfg);
  // Oracle: the two affine maps evaluated directly.
  const Eigen::MatrixXd E = rows(params.get("dem.latent_enc.w")), D = rows(params.get("dem.latent_dec.w"));
  Eigen::RowVectorXd p(3), be(4), bd(3);
  for (int i = 0; i < 3; ++i) p[i] = psi1[i], bd[i] = params.get("dem.latent_dec.b")[i];
  for (int i = 0; i < 4; ++i) be[i] = params.get("dem.latent_enc.b")[i];
  const Eigen::RowVectorXd expect = (p * E + be) * D + bd;
  for (int i = 0; i < 3; ++i) CHECK(out.value()[i] == doctest::Approx(expect[i]).epsilon(1e-13));
}

TEST_CASE("ode_fuse with zero dynamics is constant in time") {
  const auto cfg = small_config();
  auto params = dem_params(cfg, 10, false);  // last layer zero, zero bias
  std::mt19937_64 rng(11);
  const auto psi1 = random_tensor(Shape{3}, rng);
  Graph<double> g(&params);
  auto out = ode_fuse(g, g.constant(psi1), g.constant(random_tensor(Shape{7, 3}, rng)), frame_times(8), cfg);
  for (std::size_t t = 1; t < 8; ++t)
    for (std::size_t j = 0; j < 3; ++j) CHECK(out.value().at(t, j) == out.value().at(0, j));
  // The untrained decoder is the pseudo-inverse of the encoder: the onset expression comes back.
  for (std::size_t j = 0; j < 3; ++j) CHECK(out.value().at(0, j) == doctest::Approx(psi1[j]).epsilon(1e-10));
}

TEST_CASE("constant dynamics integrate exactly") {
  auto cfg = small_config(4);
  cfg.latent_dim = 4;
  auto params = dem_params(cfg, 12);
  Tensor<double> eye(Shape{4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  params.get_mut("dem.latent_enc.w") = eye;
  params.get_mut("dem.latent_dec.w") = eye;
  const std::vector<double> c{0.3, -1.7, 2.25, 0.05};
  OdeDynamics<double> constant = [&](Graph<double>& g, Var<double> ctx, Var<double>, Var<double>) {
    Tensor<double> t(Shape{ctx.shape()[0], 4});
    for (std::size_t i = 0; i < t.dim(0); ++i)
      for (std::size_t j = 0; j < 4; ++j) t.at(i, j) = c[j];
    return g.constant(t);
  };
  std::mt19937_64 rng(13);
  const auto psi1 = random_tensor(Shape{4}, rng);
  const std::vector<double> times{0.0, 0.1, 1.0 / 7.0, 0.5, 0.731, 1.0};
  Graph<double> g(&params);
  auto out = ode_fuse(g, g.constant(psi1), g.constant(random_tensor(Shape{7, 4}, rng)), times, cfg, constant);
  for (std::size_t q = 0; q < times.size(); ++q)
    for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(out.value().at(q, j) - (psi1[j] + c[j] * times[q])) < 1e-9);
}

TEST_CASE("halving the RK4 step barely changes the trajectory") {
  auto cfg = small_config();
  auto params = dem_params(cfg, 14);
  std::mt19937_64 rng(15);
  const auto psi1 = random_tensor(Shape{3}, rng);
  const auto res = random_tensor(Shape{7, 3}, rng);
  auto run = [&](std::size_t steps) {
    auto c = cfg;
    c.steps_per_interval = steps;
    Graph<double> g(&params);
    return ode_fuse(g, g.constant(psi1), g.constant(res), frame_times(8), c).value();
  };
  const auto a = run(8), b = run(16);
  double diff = 0, norm = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    norm = std::max(norm, std::abs(a[i]));
  }
  CHECK(diff / norm < 1e-4);
}

TEST_CASE("ode_fuse rejects query times outside [0, 1]") {
  const auto cfg = small_config();
  auto params = dem_params(cfg, 16);
  Graph<double> g(&params);
  auto psi1 = g.constant(Tensor<double>(Shape{3}));
  auto res = g.constant(Tensor<double>(Shape{3, 3}));
  CHECK_THROWS_AS(ode_fuse(g, psi1, res, {1.01}, cfg), Error);
  CHECK_THROWS_AS(ode_fuse(g, psi1, res, {-0.1}, cfg), Error);
}

TEST_CASE("frame times and the solver schedule") {
  const auto t = frame_times(5);
  REQUIRE(t.size() == 5);
  CHECK(t[0] == 0.0);
  CHECK(t[2] == 0.5);
  CHECK(t[4] == 1.0);
  const auto s = make_ode_schedule(5, {1.0}, 8);
  // 32 steps over [0, 1]: Simpson weights sum to the interval length.
  CHECK(s.weights.row(0).sum() == doctest::Approx(1.0).epsilon(1e-14));
  for (Eigen::Index j = 0; j < s.interp.rows(); ++j) CHECK(s.interp.row(j).sum() == doctest::Approx(1.0));
}

TEST_CASE("init meshes: zero flow and zero dynamics repeat the onset mesh") {
  const FaceModel model = tiny_face_model();
  DynamicConfig cfg = small_config(model.expression_count());
  cfg.pool_grid = 2;
  auto params = dem_params(cfg, 17, false);
  const auto seq = tiny_sequence(model, 3);
  auto onset = onset_from_sequence(seq);
  onset.expression = Eigen::VectorXd::LinSpaced(static_cast<Eigen::Index>(model.expression_count()), -0.2, 0.3);
  std::vector<FlowField> zero(seq.flows.size(), FlowField(seq.flows[0].shape()));
  Graph<double> g(&params);
  Tensor<double> p1(Shape{model.expression_count()});
  for (std::size_t j = 0; j < p1.size(); ++j) p1[j] = onset.expression[static_cast<Eigen::Index>(j)];
  auto res = motion_encode(g, g.constant(flow_volume<double>(zero)), cfg);
  auto psi = ode_fuse(g, g.constant(p1), res, frame_times(seq.frames()), cfg);
  const auto meshes = init_meshes(g, model, onset, psi);
  REQUIRE(meshes.size() == seq.frames());
  const Mesh ref = blendshape_forward(model, onset);
  for (const auto& m : meshes)
    for (std::size_t i = 0; i < m.value().size(); ++i)
      CHECK(m.value()[i] == doctest::Approx(ref.vertices(static_cast<Eigen::Index>(i / 3), static_cast<Eigen::Index>(i % 3))).epsilon(1e-9));
}

TEST_CASE("init meshes for a two-frame clip") {
  const FaceModel model = tiny_face_model();
  DynamicConfig cfg = small_config(model.expression_count());
  auto params = dem_params(cfg, 18);
  std::mt19937_64 rng(19);
  const auto flows = random_flows(1, 24, 24, rng);
  const auto onset = onset_from_sequence(tiny_sequence(model, 4));
  Graph<double> g(&params);
  Tensor<double> p1(Shape{model.expression_count()});
  auto res = motion_encode(g, g.constant(flow_volume<double>(flows)), cfg);
  CHECK(res.shape() == Shape{1, model.expression_count()});
  auto psi = ode_fuse(g, g.constant(p1), res, frame_times(2), cfg);
  const auto meshes = init_meshes(g, model, onset, psi);
  REQUIRE(meshes.size() == 2);
  double moved = 0;
  for (std::size_t i = 0; i < meshes[0].value().size(); ++i)
    moved = std::max(moved, std::abs(meshes[1].value()[i] - meshes[0].value()[i]));
  CHECK(moved > 0.0);  // the one interval was integrated
}

TEST_CASE("dynamic-encoded gradients match central differences") {
  for (const auto& r : run_gradcheck_suite("dynamic_encoded")) {
    INFO(r.name << " worst " << r.worst);
    CHECK(r.max_rel_error < 1e-5);
  }
}
