#include "microface/local_features.hpp"

#include <cmath>
#include <limits>

#include "microface/eigen_bridge.hpp"

namespace microface {

void LocalFeatureConfig::validate() const {
  if (d_geo == 0 || d_local == 0 || fuse_hidden == 0) throw Error("feature widths must be positive");
  if (cnn_channels.empty()) throw Error("motion CNN needs at least one conv layer");
  if (patch == 0) throw Error("patch size must be positive");
  if (!(flow_scale > 0) || !std::isfinite(flow_scale) || !(landmark_scale > 0) || !std::isfinite(landmark_scale))
    throw Error("feature input scales must be finite and positive");
}

template <typename Real>
void init_local_features(ParameterSet<Real>& params, const LocalFeatureConfig& cfg, Rng& rng) {
  cfg.validate();
  init_uniform(params, "lf.geo.l0.w", Shape{3, cfg.d_geo}, 3, rng);
  init_uniform(params, "lf.geo.l1.w", Shape{cfg.d_geo, cfg.d_geo}, cfg.d_geo, rng);
  std::size_t in = 2;
  for (std::size_t i = 0; i < cfg.cnn_channels.size(); ++i) {
    const std::string name = "lf.cnn.conv" + std::to_string(i);
    init_uniform(params, name + ".w", Shape{cfg.cnn_channels[i], in, 3, 3}, in * 9, rng);
    params.add(name + ".b", Tensor<Real>(Shape{cfg.cnn_channels[i]}));
    in = cfg.cnn_channels[i];
  }
  init_uniform(params, "lf.cnn.attn.w", Shape{1, in, 1, 1}, in, rng);
  params.add("lf.cnn.attn.b", Tensor<Real>(Shape{1}));
  init_mlp(params, "lf.fuse",
           {cfg.d_geo + LocalFeatureConfig::kLandmarkDim + cfg.d_mot(), cfg.fuse_hidden, cfg.fuse_hidden, cfg.d_local},
           rng);
}

template <typename Real>
Var<Real> geo_features(Graph<Real>& g, Var<Real> vertices, const CsrMatrix& p, const std::string& prefix) {
  if (vertices.shape().size() != 2 || vertices.shape()[0] != p.rows)
    throw ShapeError("geo_features: vertices " + shape_string(vertices.shape()) + " do not match propagation size " +
                     std::to_string(p.rows));
  auto x = relu(spmm(p, matmul(vertices, g.param(prefix + ".l0.w"))));
  return relu(spmm(p, matmul(x, g.param(prefix + ".l1.w"))));
}

LiftedLandmarks lift_landmarks(const Landmarks2d& fan, const Landmarks2d& mp, const Camera& cam, const Mesh& mesh) {
  if (mesh.vertex_count() == 0) throw Error("lift_landmarks: empty mesh");
  const MeshRaycaster caster(mesh, cam);
  LiftedLandmarks out;
  for (const auto* set : {&fan, &mp})
    for (Eigen::Index i = 0; i < set->rows(); ++i) {
      const auto hit = caster.cast(set->row(i).transpose());
      out.points.push_back(hit.point);
      if (hit.fallback) ++out.fallbacks;
    }
  return out;
}

std::vector<std::size_t> nearest_landmarks(const Vertices& vertices, const std::vector<Vec3>& lifted) {
  if (lifted.empty()) throw Error("nearest_landmarks: no landmarks");
  std::vector<std::size_t> out(static_cast<std::size_t>(vertices.rows()));
  for (Eigen::Index i = 0; i < vertices.rows(); ++i) {
    const Vec3 v = vertices.row(i).transpose();
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < lifted.size(); ++j) {
      const double d = (lifted[j] - v).squaredNorm();
      if (d < best) {
        best = d;
        out[static_cast<std::size_t>(i)] = j;
      }
    }
  }
  return out;
}

template <typename Real>
Var<Real> landmark_features(Graph<Real>& g, Var<Real> vertices, const std::vector<Vec3>& lifted,
                            const std::vector<std::size_t>& assignment) {
  const std::size_t n = vertices.shape()[0];
  if (assignment.size() != n) throw ShapeError("landmark_features: assignment does not cover every vertex");
  Tensor<Real> target(Shape{n, 3});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < 3; ++k) target.at(i, k) = static_cast<Real>(lifted.at(assignment[i])[static_cast<Eigen::Index>(k)]);
  auto offset = sub(g.constant(std::move(target)), vertices);
  auto dist = reshape(sqrt_eps(row_sum(square(offset)), Real(1e-12)), Shape{n, 1});
  return concat_cols<Real>({offset, dist});
}

template <typename Real>
Tensor<Real> flow_channels(const FlowField& flow) {
  if (flow.rank() != 3 || flow.dim(2) != 2) throw ShapeError("flow must be [H, W, 2], got " + shape_string(flow.shape()));
  const std::size_t H = flow.dim(0), W = flow.dim(1);
  Tensor<Real> out(Shape{2, H, W});
  for (std::size_t p = 0; p < H * W; ++p) {
    out[p] = static_cast<Real>(flow[2 * p]);
    out[H * W + p] = static_cast<Real>(flow[2 * p + 1]);
  }
  return out;
}

template <typename Real>
PixelMotion<Real> motion_pixel_features(Graph<Real>& g, Var<Real> flow, const LocalFeatureConfig& cfg) {
  if (flow.shape().size() != 3 || flow.shape()[0] != 2)
    throw ShapeError("motion_pixel_features: expected flow [2, H, W], got " + shape_string(flow.shape()));
  Var<Real> x = flow;
  for (std::size_t i = 0; i < cfg.cnn_channels.size(); ++i) {
    const std::string name = "lf.cnn.conv" + std::to_string(i);
    x = relu(conv2d(x, g.param(name + ".w"), g.param(name + ".b"), i == 0 ? 2 : 1, 1));
  }
  auto attention = sigmoid(conv2d(x, g.param("lf.cnn.attn.w"), g.param("lf.cnn.attn.b"), 1, 0));
  return {mul_channels(x, attention), attention};
}

RegionPatches region_patches(const std::vector<std::vector<std::size_t>>& regions, const Vertices& vertices,
                             const Camera& cam, std::size_t map_h, std::size_t map_w, std::size_t k) {
  RegionPatches out;
  const double sx = static_cast<double>(map_w) / cam.width, sy = static_cast<double>(map_h) / cam.height;
  for (const auto& r : regions) {
    const Vec2 c = region_centroid(r, vertices, cam);
    out.centroids.push_back(c);
    out.patches.push_back(patch_pixels(Vec2(c.x() * sx, c.y() * sy), map_w, map_h, k));
  }
  return out;
}

template <typename Real>
Var<Real> region_motion_features(Var<Real> map, const RegionPatches& patches, const std::vector<Region>& vertex_region,
                                 ReadCounter* reads) {
  auto region_rows = patch_mean(map, patches.patches);  // [R, C]
  if (reads)
    for (const auto& p : patches.patches) reads->rows += p.size();
  std::vector<std::size_t> index(vertex_region.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    index[i] = static_cast<std::size_t>(vertex_region[i]);
    if (index[i] >= patches.patches.size()) throw ShapeError("region_motion_features: region label without a patch");
  }
  return gather_rows(region_rows, index);
}

template <typename Real>
Var<Real> per_vertex_motion_features(Var<Real> map, const Vertices& vertices, const Camera& cam, std::size_t k,
                                     ReadCounter* reads) {
  const std::size_t h = map.shape()[1], w = map.shape()[2];
  const double sx = static_cast<double>(w) / cam.width, sy = static_cast<double>(h) / cam.height;
  std::vector<std::vector<std::size_t>> patches;
  for (Eigen::Index i = 0; i < vertices.rows(); ++i) {
    Vec2 p = project(vertices.row(i).transpose(), cam);
    p.x() = std::clamp(p.x(), 0.0, cam.width - 1.0);
    p.y() = std::clamp(p.y(), 0.0, cam.height - 1.0);
    patches.push_back(patch_pixels(Vec2(p.x() * sx, p.y() * sy), w, h, k));
    if (reads) reads->rows += patches.back().size();
  }
  return patch_mean(map, patches);
}

template <typename Real>
Var<Real> fuse_features(Graph<Real>& g, Var<Real> geo, Var<Real> landmark, Var<Real> motion) {
  const std::size_t n = geo.shape()[0];
  if (landmark.shape()[0] != n || motion.shape()[0] != n)
    throw ShapeError("fuse_features: row counts differ (" + std::to_string(n) + ", " +
                     std::to_string(landmark.shape()[0]) + ", " + std::to_string(motion.shape()[0]) + ")");
  return mlp(g, concat_cols<Real>({geo, landmark, motion}), "lf.fuse", 3, Activation::kRelu);
}

#define MICROFACE_INSTANTIATE(Real)                                                                                  \
  template void init_local_features(ParameterSet<Real>&, const LocalFeatureConfig&, Rng&);                           \
  template Var<Real> geo_features(Graph<Real>&, Var<Real>, const CsrMatrix&, const std::string&);                    \
  template Var<Real> landmark_features(Graph<Real>&, Var<Real>, const std::vector<Vec3>&,                           \
                                       const std::vector<std::size_t>&);                                             \
  template Tensor<Real> flow_channels<Real>(const FlowField&);                                                      \
  template PixelMotion<Real> motion_pixel_features(Graph<Real>&, Var<Real>, const LocalFeatureConfig&);              \
  template Var<Real> region_motion_features(Var<Real>, const RegionPatches&, const std::vector<Region>&, ReadCounter*); \
  template Var<Real> per_vertex_motion_features(Var<Real>, const Vertices&, const Camera&, std::size_t, ReadCounter*); \
  template Var<Real> fuse_features(Graph<Real>&, Var<Real>, Var<Real>, Var<Real>);
MICROFACE_INSTANTIATE(float)
MICROFACE_INSTANTIATE(double)
#undef MICROFACE_INSTANTIATE

}  // namespace microface
