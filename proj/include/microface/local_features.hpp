#pragma once

#include <vector>

#include "microface/camera.hpp"
#include "microface/nn.hpp"
#include "microface/sparse.hpp"
#include "microface/synth.hpp"

namespace microface {

struct LocalFeatureConfig {
  std::size_t d_geo = 32;
  std::vector<std::size_t> cnn_channels{8, 16};  // last entry is d_mot
  std::size_t d_local = 32;
  std::size_t fuse_hidden = 64;
  std::size_t patch = 5;
  /// Input scales applied by the pipeline: flow before the motion CNN, landmark rows before fusion.
  double flow_scale = 100.0;
  double landmark_scale = 100.0;
  bool use_geo = true;
  bool use_landmark = true;
  bool use_motion = true;

  static constexpr std::size_t kLandmarkDim = 4;
  std::size_t d_mot() const { return cnn_channels.back(); }
  void validate() const;
};

/// Registers `lf.geo.l*.w`, `lf.cnn.conv*`, `lf.cnn.attn` and the fusion MLP `lf.fuse`.
template <typename Real>
void init_local_features(ParameterSet<Real>& params, const LocalFeatureConfig& cfg, Rng& rng);

/// Two bias-free graph convolutions X <- ReLU(P X W) from X = vertices [n, 3].
template <typename Real>
Var<Real> geo_features(Graph<Real>& g, Var<Real> vertices, const CsrMatrix& propagation,
                       const std::string& prefix = "lf.geo");

struct LiftedLandmarks {
  std::vector<Vec3> points;
  std::size_t fallbacks = 0;
};

/// Back-projects every 2D landmark (FAN rows, then MP rows) onto the mesh.
LiftedLandmarks lift_landmarks(const Landmarks2d& fan, const Landmarks2d& mp, const Camera& cam, const Mesh& mesh);

/// Index of the nearest lifted landmark for each vertex (ties go to the lower index).
std::vector<std::size_t> nearest_landmarks(const Vertices& vertices, const std::vector<Vec3>& lifted);

/// Rows (x* - v, |x* - v|) with the assignment held fixed: [n, 4].
template <typename Real>
Var<Real> landmark_features(Graph<Real>& g, Var<Real> vertices, const std::vector<Vec3>& lifted,
                            const std::vector<std::size_t>& assignment);

template <typename Real>
struct PixelMotion {
  Var<Real> features;   // [d_mot, H', W'], attention-modulated
  Var<Real> attention;  // [1, H', W'] in (0, 1)
};

/// Flow [2, H, W] -> conv stack (first conv stride 2) modulated by a sigmoid spatial-attention map.
template <typename Real>
PixelMotion<Real> motion_pixel_features(Graph<Real>& g, Var<Real> flow, const LocalFeatureConfig& cfg);

/// Flow [H, W, 2] -> [2, H, W].
template <typename Real>
Tensor<Real> flow_channels(const FlowField& flow);

/// One k x k patch per region, centred on the region centroid scaled into map coordinates.
struct RegionPatches {
  std::vector<Vec2> centroids;  // image pixels
  std::vector<std::vector<std::size_t>> patches;
};

RegionPatches region_patches(const std::vector<std::vector<std::size_t>>& regions, const Vertices& vertices,
                             const Camera& cam, std::size_t map_h, std::size_t map_w, std::size_t k = 5);

/// Feature-map rows read by the region and per-vertex motion lookups.
struct ReadCounter {
  std::size_t rows = 0;
};

/// Region-level motion features: patch means per region, broadcast to every vertex of the region. [n, C]
template <typename Real>
Var<Real> region_motion_features(Var<Real> feature_map, const RegionPatches& patches,
                                 const std::vector<Region>& vertex_region, ReadCounter* reads = nullptr);

/// Per-vertex variant: a k x k patch at every vertex's own projection. Used as the test oracle. [n, C]
template <typename Real>
Var<Real> per_vertex_motion_features(Var<Real> feature_map, const Vertices& vertices, const Camera& cam,
                                     std::size_t k = 5, ReadCounter* reads = nullptr);

/// Rowwise MLP over concat(geo, landmark, motion): [n, d_local].
template <typename Real>
Var<Real> fuse_features(Graph<Real>& g, Var<Real> geo, Var<Real> landmark, Var<Real> motion);

}  // namespace microface
