#include <cmath>
#include <random>

#include "doctest.h"
#include "microface/gradcheck_suite.hpp"
#include "microface/local_features.hpp"
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

Tensor<double> to_tensor(const Vertices& v) {
  Tensor<double> t(Shape{static_cast<std::size_t>(v.rows()), 3});
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (int k = 0; k < 3; ++k) t.at(static_cast<std::size_t>(i), static_cast<std::size_t>(k)) = v(i, k);
  return t;
}

Mesh six_vertex_mesh() {
  Mesh m;
  m.vertices.resize(6, 3);
  m.vertices << 0, 0, 4, 0.3, 0, 4, 0.2, 0.25, 4, -0.2, 0.25, 4, -0.3, 0, 4, 0.5, 0.3, 4.1;
  m.faces = {{0, 1, 2}, {0, 2, 3}, {0, 3, 4}, {1, 5, 2}};
  return m;
}

ParameterSet<double> local_params(const LocalFeatureConfig& cfg, std::uint64_t seed) {
  ParameterSet<double> p;
  Rng rng(seed);
  init_local_features(p, cfg, rng);
  return p;
}

const FaceModel& template_model() {
  static const FaceModel m = build_template_model();
  return m;
}

Mesh posed_template() {
  const auto& m = template_model();
  auto p = ParamState::zeros(m.shape_count(), m.expression_count());
  p.translation = Vec3(0, 0, 4);
  return blendshape_forward(m, p);
}

}  // namespace

TEST_CASE("geo features: zero weights give zero, a lone vertex is a two-layer ReLU map") {
  LocalFeatureConfig cfg;
  cfg.d_geo = 5;
  auto params = local_params(cfg, 1);
  const Mesh m = six_vertex_mesh();
  const auto P = normalized_propagation(build_adjacency(m));
  {
    auto zp = params;
    zp.get_mut("lf.geo.l0.w").fill(0.0);
    zp.get_mut("lf.geo.l1.w").fill(0.0);
    Graph<double> g(&zp);
    auto f = geo_features(g, g.constant(to_tensor(m.vertices)), P);
    for (double v : f.value().values()) CHECK(v == 0.0);
  }
  Graph<double> g(&params);
  const auto one = CsrMatrix::from_triplets(1, 1, {{0, 0, 1.0}});
  const Tensor<double> v(Shape{1, 3}, {0.3, -0.2, 4.0});
  auto f = geo_features(g, g.constant(v), one);
  const auto& w0 = params.get("lf.geo.l0.w");
  const auto& w1 = params.get("lf.geo.l1.w");
  std::vector<double> h(5, 0.0);
  for (std::size_t j = 0; j < 5; ++j) {
    for (std::size_t k = 0; k < 3; ++k) h[j] += v[k] * w0.at(k, j);
    h[j] = std::max(0.0, h[j]);
  }
  for (std::size_t j = 0; j < 5; ++j) {
    double o = 0;
    for (std::size_t k = 0; k < 5; ++k) o += h[k] * w1.at(k, j);
    CHECK(f.value()[j] == doctest::Approx(std::max(0.0, o)).epsilon(1e-12));
  }
}

TEST_CASE("geo features are equivariant under vertex relabelling") {
  LocalFeatureConfig cfg;
  cfg.d_geo = 6;
  auto params = local_params(cfg, 2);
  const Mesh m = six_vertex_mesh();
  const std::vector<int> perm{4, 2, 5, 0, 3, 1};
  std::vector<int> inv(6);
  for (int i = 0; i < 6; ++i) inv[perm[i]] = i;
  Mesh pm;
  pm.vertices.resize(6, 3);
  for (int i = 0; i < 6; ++i) pm.vertices.row(i) = m.vertices.row(perm[i]);
  for (const auto& f : m.faces) pm.faces.push_back({inv[f[0]], inv[f[1]], inv[f[2]]});
  Graph<double> g(&params);
  auto a = geo_features(g, g.constant(to_tensor(m.vertices)), normalized_propagation(build_adjacency(m)));
  auto b = geo_features(g, g.constant(to_tensor(pm.vertices)), normalized_propagation(build_adjacency(pm)));
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t k = 0; k < 6; ++k)
      CHECK(b.value().at(i, k) == doctest::Approx(a.value().at(static_cast<std::size_t>(perm[i]), k)).epsilon(1e-12));
}

TEST_CASE("landmark features vanish at landmark vertices when landmarks are exact") {
  const auto& model = template_model();
  const Mesh mesh = posed_template();
  const Camera cam = Camera::for_image(96, 96);
  auto project_set = [&](const std::vector<int>& idx) {
    Landmarks2d out(static_cast<Eigen::Index>(idx.size()), 2);
    for (std::size_t i = 0; i < idx.size(); ++i)
      out.row(static_cast<Eigen::Index>(i)) = project(mesh.vertices.row(idx[i]).transpose(), cam).transpose();
    return out;
  };
  const auto lifted = lift_landmarks(project_set(model.fan_landmarks), project_set(model.mp_landmarks), cam, mesh);
  CHECK(lifted.fallbacks == 0);
  const auto assign = nearest_landmarks(mesh.vertices, lifted.points);
  Graph<double> g;
  auto f = landmark_features(g, g.constant(to_tensor(mesh.vertices)), lifted.points, assign);
  for (int v : model.all_landmarks()) {
    const auto i = static_cast<std::size_t>(v);
    for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(f.value().at(i, k)) < 1e-5);
  }
}

TEST_CASE("landmark features: a single landmark is every vertex's target") {
  const Mesh m = six_vertex_mesh();
  const std::vector<Vec3> lifted{Vec3(0.1, 0.1, 4.0)};
  const auto assign = nearest_landmarks(m.vertices, lifted);
  for (auto a : assign) CHECK(a == 0);
  Graph<double> g;
  auto f = landmark_features(g, g.constant(to_tensor(m.vertices)), lifted, assign);
  for (std::size_t i = 0; i < 6; ++i) {
    const Vec3 d = lifted[0] - m.vertices.row(static_cast<Eigen::Index>(i)).transpose();
    for (int k = 0; k < 3; ++k) CHECK(f.value().at(i, static_cast<std::size_t>(k)) == doctest::Approx(d[k]).epsilon(1e-12));
    CHECK(f.value().at(i, 3) == doctest::Approx(d.norm()).epsilon(1e-9));
  }
}

TEST_CASE("landmark features change continuously when all landmarks shift right") {
  const auto& model = template_model();
  const Mesh mesh = posed_template();
  const Camera cam = Camera::for_image(96, 96);
  auto shifted = [&](const std::vector<int>& idx, double dx) {
    Landmarks2d out(static_cast<Eigen::Index>(idx.size()), 2);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const Vec2 p = project(mesh.vertices.row(idx[i]).transpose(), cam);
      out.row(static_cast<Eigen::Index>(i)) << p.x() + dx, p.y();
    }
    return out;
  };
  auto features = [&](double dx, std::vector<std::size_t>* assign_out, const std::vector<std::size_t>* held = nullptr) {
    const auto lifted = lift_landmarks(shifted(model.fan_landmarks, dx), shifted(model.mp_landmarks, dx), cam, mesh);
    const auto assign = held ? *held : nearest_landmarks(mesh.vertices, lifted.points);
    if (assign_out) *assign_out = assign;
    Graph<double> g;
    return landmark_features(g, g.constant(to_tensor(mesh.vertices)), lifted.points, assign).value();
  };
  std::vector<std::size_t> a0, a1;
  const auto f0 = features(2.0, &a0);
  const auto f1 = features(2.0 + 1e-3, &a1);
  const auto f2 = features(2.0 + 2e-3, nullptr);
  std::size_t same = 0;
  for (std::size_t i = 0; i < a0.size(); ++i) same += a0[i] == a1[i];
  CHECK(same == a0.size());
  // Offsets move by O(step): first differences agree to first order.
  double max_step = 0, max_curv = 0;
  for (std::size_t i = 0; i < f0.size(); ++i) {
    max_step = std::max(max_step, std::abs(f1[i] - f0[i]));
    max_curv = std::max(max_curv, std::abs(f2[i] - 2 * f1[i] + f0[i]));
  }
  CHECK(max_step < 1e-3);
  CHECK(max_curv < 0.05 * max_step + 1e-9);
  // The lifted points moved in +x of the image; with the assignment at dx = 0 held, x offsets grow.
  std::vector<std::size_t> ar;
  const auto fr = features(0.0, &ar);
  const auto fh = features(2.0, nullptr, &ar);
  for (int v : model.fan_landmarks) CHECK(fh.at(static_cast<std::size_t>(v), 0) > fr.at(static_cast<std::size_t>(v), 0));
}

TEST_CASE("motion pixel features: zero flow with zero biases is zero, attention in (0, 1)") {
  LocalFeatureConfig cfg;
  cfg.cnn_channels = {3, 4};
  auto params = local_params(cfg, 3);
  Graph<double> g(&params);
  auto out = motion_pixel_features(g, g.constant(Tensor<double>(Shape{2, 12, 10})), cfg);
  CHECK(out.features.shape() == Shape{4, 6, 5});
  for (double v : out.features.value().values()) CHECK(v == 0.0);

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto params2 = params;
    params2.get_mut("lf.cnn.attn.b") = random_tensor(Shape{1}, rng, -3, 3);
    Graph<double> h(&params2);
    auto o = motion_pixel_features(h, h.constant(random_tensor(Shape{2, 12, 10}, rng, -5, 5)), cfg);
    for (double a : o.attention.value().values()) {
      CHECK(a > 0.0);
      CHECK(a < 1.0);
    }
  }
}

TEST_CASE("motion pixel features grow when a localized flow blob doubles") {
  LocalFeatureConfig cfg;
  cfg.cnn_channels = {3, 4};
  auto params = local_params(cfg, 5);
  // Positive weights keep every pre-activation positive for a positive input.
  std::mt19937_64 rng(6);
  for (const auto& name : params.names())
    if (name.rfind("lf.cnn", 0) == 0) params.get_mut(name) = random_tensor(params.get(name).shape(), rng, 0.05, 0.5);
  Tensor<double> blob(Shape{2, 16, 16});
  for (std::size_t y = 6; y < 9; ++y)
    for (std::size_t x = 6; x < 9; ++x) blob[y * 16 + x] = 0.8, blob[256 + y * 16 + x] = 0.3;
  auto doubled = blob;
  for (auto& v : doubled.values()) v *= 2;
  auto energy = [&](const Tensor<double>& flow) {
    Graph<double> g(&params);
    const auto& f = motion_pixel_features(g, g.constant(flow), cfg).features.value();
    double e = 0;
    // Receptive field of the blob on the 8 x 8 map.
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t y = 1; y < 7; ++y)
        for (std::size_t x = 1; x < 7; ++x) e += f[(c * 8 + y) * 8 + x] * f[(c * 8 + y) * 8 + x];
    return e;
  };
  CHECK(energy(doubled) > energy(blob));
  CHECK(energy(blob) > 0.0);
}

TEST_CASE("region motion features: constant map and a hand-built indicator map") {
  const std::size_t C = 3, H = 20, W = 30;
  Graph<double> g;
  auto constant = g.constant(Tensor<double>(Shape{C, H, W}, 0.625));
  RegionPatches rp;
  for (int r = 0; r < kRegionCount; ++r) {
    const Vec2 c(3.0 + 7.0 * (r % 4), 4.0 + 10.0 * (r / 4));
    rp.centroids.push_back(c);
    rp.patches.push_back(patch_pixels(c, W, H, 5));
  }
  std::vector<Region> labels;
  for (int i = 0; i < 40; ++i) labels.push_back(static_cast<Region>((i * 3) % kRegionCount));
  auto f = region_motion_features(constant, rp, labels);
  CHECK(f.shape() == Shape{40, C});
  for (double v : f.value().values()) CHECK(v == doctest::Approx(0.625));

  Tensor<double> ind(Shape{C, H, W});
  for (std::size_t c = 0; c < C; ++c)
    for (auto p : rp.patches[5]) ind[c * H * W + p] = 1.0;
  auto h = region_motion_features(g.constant(ind), rp, labels);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t c = 0; c < C; ++c) CHECK(h.value().at(i, c) == doctest::Approx(labels[i] == Region::kRightCheek ? 1.0 : 0.0).epsilon(1e-12));
}

TEST_CASE("patches near the border are clamped flush to the edge") {
  const auto p = patch_pixels(Vec2(0.2, 18.9), 10, 20, 5);
  REQUIRE(p.size() == 25);
  for (auto idx : p) {
    CHECK(idx % 10 < 5);
    CHECK(idx / 10 >= 15);
  }
  CHECK(p.front() == 15 * 10 + 0);
}

TEST_CASE("region lookup equals the per-vertex oracle with 25 x 8 reads for 642 vertices") {
  // Eight tight clusters: every vertex of a cluster rounds to the same map cell as its centroid.
  const Camera cam = Camera::for_image(96, 96);
  const std::size_t n = 642, map = 48;
  Vertices v(n, 3);
  std::vector<Region> labels(n);
  std::vector<std::vector<std::size_t>> regions(kRegionCount);
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> jitter(-0.3, 0.3);  // pixels; 0.15 map cells
  for (std::size_t i = 0; i < n; ++i) {
    const int r = static_cast<int>(i % kRegionCount);
    // Cluster centres at even map cells so rounding is never ambiguous.
    const double px = 2.0 * (6 + 8 * (r % 4)), py = 2.0 * (10 + 20 * (r / 4));
    const double u = px + jitter(rng), w = py + jitter(rng), z = 4.0 + 0.01 * jitter(rng);
    v.row(static_cast<Eigen::Index>(i)) << (u - cam.cx) * z / cam.fx, (w - cam.cy) * z / cam.fy, z;
    labels[i] = static_cast<Region>(r);
    regions[static_cast<std::size_t>(r)].push_back(i);
  }
  const auto rp = region_patches(regions, v, cam, map, map, 5);
  Graph<double> g;
  auto fmap = g.constant(random_tensor(Shape{4, map, map}, rng));
  ReadCounter region_reads, vertex_reads;
  auto a = region_motion_features(fmap, rp, labels, &region_reads);
  auto b = per_vertex_motion_features(fmap, v, cam, 5, &vertex_reads);
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.value().size(); ++i) CHECK(a.value()[i] == b.value()[i]);
  CHECK(region_reads.rows == 25 * 8);
  CHECK(vertex_reads.rows == 25 * n);
  CHECK(static_cast<double>(vertex_reads.rows) / static_cast<double>(region_reads.rows) >= n / 16.0);
}

TEST_CASE("fuse features: zero weights, row permutation and output width") {
  LocalFeatureConfig cfg;
  cfg.d_geo = 3;
  cfg.cnn_channels = {2, 3};
  cfg.d_local = 5;
  cfg.fuse_hidden = 6;
  auto params = local_params(cfg, 8);
  std::mt19937_64 rng(9);
  for (const std::size_t n : {1, 4, 9}) {
    Graph<double> g(&params);
    auto f = fuse_features(g, g.constant(random_tensor(Shape{n, 3}, rng)), g.constant(random_tensor(Shape{n, 4}, rng)),
                           g.constant(random_tensor(Shape{n, 3}, rng)));
    CHECK(f.shape() == Shape{n, 5});
  }
  const auto geo = random_tensor(Shape{5, 3}, rng), ldm = random_tensor(Shape{5, 4}, rng),
             mot = random_tensor(Shape{5, 3}, rng);
  const std::vector<std::size_t> perm{2, 0, 4, 1, 3};
  Graph<double> g(&params);
  auto a = fuse_features(g, g.constant(geo), g.constant(ldm), g.constant(mot));
  auto b = fuse_features(g, gather_rows(g.constant(geo), perm), gather_rows(g.constant(ldm), perm),
                         gather_rows(g.constant(mot), perm));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 5; ++k) CHECK(b.value().at(i, k) == doctest::Approx(a.value().at(perm[i], k)).epsilon(1e-12));

  auto zp = params;
  for (const auto& name : zp.names())
    if (name.rfind("lf.fuse", 0) == 0) zp.get_mut(name).fill(0.0);
  Graph<double> z(&zp);
  for (double v : fuse_features(z, z.constant(geo), z.constant(ldm), z.constant(mot)).value().values()) CHECK(v == 0.0);

  Graph<double> bad(&params);
  CHECK_THROWS_AS(fuse_features(bad, bad.constant(geo), bad.constant(random_tensor(Shape{4, 4}, rng)), bad.constant(mot)),
                  ShapeError);
}

TEST_CASE("local feature gradients match central differences") {
  for (const auto& r : run_gradcheck_suite("local_features")) {
    INFO(r.name << " worst " << r.worst);
    CHECK(r.max_rel_error < 1e-5);
  }
}
