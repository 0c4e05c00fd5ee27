#pragma once

#include <optional>
#include <vector>

#include "json.hpp"
#include "microface/dynamic_encoded.hpp"
#include "microface/local_features.hpp"
#include "microface/losses.hpp"
#include "microface/mesh_deform.hpp"

namespace microface {

struct ModelConfig {
  DynamicConfig dem;
  LocalFeatureConfig local;
  DeformConfig deform;
  bool disable_dem = false;   // hold psi_t = psi_1
  bool disable_dgmd = false;  // final mesh = init mesh

  void validate() const;
};

/// Mesh structures derived once from a face model.
struct ModelContext {
  const FaceModel* model = nullptr;
  CsrMatrix adjacency;
  CsrMatrix propagation;
  CsrMatrix laplacian;
  std::vector<std::vector<std::size_t>> regions;
  std::vector<int> landmarks;  // FAN then MP

  explicit ModelContext(const FaceModel& model);
};

template <typename Real>
void init_parameters(ParameterSet<Real>& params, const ModelConfig& cfg, std::uint64_t seed);

/// Everything the pipeline consumes for one clip.
struct SequenceInput {
  Camera camera;
  ParamState onset;
  std::vector<FlowField> flows;  // T - 1 fields [H, W, 2]
  std::vector<Landmarks2d> fan;
  std::vector<Landmarks2d> mp;
  const std::vector<Mesh>* ground_truth = nullptr;

  std::size_t frames() const { return flows.size() + 1; }
};

SequenceInput sequence_input(const SyntheticSequence& seq);

/// Non-differentiable per-frame quantities derived from the init mesh and the flow.
struct FrameGeometry {
  std::vector<Vec3> lifted;
  std::vector<std::size_t> assignment;
  std::size_t landmark_fallbacks = 0;
  RegionPatches image_patches;
  RegionPatches map_patches;
  AttentionField attention;
};

FrameGeometry frame_geometry(const ModelContext& ctx, const ModelConfig& cfg, const Vertices& init_vertices,
                             const Camera& cam, const Landmarks2d& fan, const Landmarks2d& mp, const FlowField& flow);

/// Flow used for frame t (0-based): O_{t-1}, or zeros for the first frame.
FlowField frame_flow(const SequenceInput& in, std::size_t t);

template <typename Real>
struct FrameResult {
  Var<Real> init;
  Var<Real> base;
  Var<Real> delta;
  Var<Real> final;
  LossParts<Real> parts;
  SurrogateParts<Real> surrogate;
  Var<Real> total;
};

template <typename Real>
struct SequenceResult {
  Var<Real> psi;  // [T, n_psi]
  std::vector<FrameResult<Real>> frames;
  std::vector<FrameGeometry> geometry;
  Var<Real> loss;  // mean of the per-frame totals
};

/// Features, deformation, refinement and losses for one frame with fixed geometry.
template <typename Real>
FrameResult<Real> run_frame(Graph<Real>& g, const ModelContext& ctx, const ModelConfig& cfg, const LossWeights& w,
                            Var<Real> init_vertices, Var<Real> psi_row, const FrameGeometry& geo, const Camera& cam,
                            const FlowField& flow, const Landmarks2d& targets, const Vertices* ground_truth);

/// Full clip: DEM -> init meshes -> per-frame pipeline -> losses. Geometry is recomputed from the
/// current init meshes unless `frozen` is given.
template <typename Real>
SequenceResult<Real> run_sequence(Graph<Real>& g, const ModelContext& ctx, const ModelConfig& cfg,
                                  const SequenceInput& in, const LossWeights& w,
                                  const std::vector<FrameGeometry>* frozen = nullptr);

/// Scalar loss components (averaged over frames) pulled out of a graph.
struct LossBreakdown {
  double total = 0, rec = 0, landmark = 0, reg = 0, vertex = 0, lap = 0, normal = 0, flow_guide = 0;

  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown scaled(double s) const;
  nlohmann::json to_json() const;
};

template <typename Real>
LossBreakdown breakdown(const SequenceResult<Real>& r);

/// Vertices of a graph value [n, 3].
template <typename Real>
Vertices to_vertices(const Tensor<Real>& t);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
/// Reads the keys present in `j` over the defaults in `cfg`; unknown keys are errors.
void model_config_from_json(const nlohmann::json& j, ModelConfig& cfg);
nlohmann::json attention_to_json(const AttentionField& a);

}  // namespace microface
