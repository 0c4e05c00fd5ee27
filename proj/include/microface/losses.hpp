#pragma once

#include <optional>

#include "microface/camera.hpp"
#include "microface/mesh_deform.hpp"
#include "microface/sparse.hpp"

namespace microface {

struct LossWeights {
  double geo = 1.0;
  double lap = 10.0;
  double normal = 1.0;
  double flow_guide = 0.5;
  double flow = 0.1;  // reward on attended displacement inside the flow-guide term
  double lmk = 1.0;
  double reg = 1e-3;
  double vtx = 1e4;

  void validate() const;
};

/// mean_v |(L ΔV)_v|^2
template <typename Real>
Var<Real> laplacian_loss(const CsrMatrix& laplacian, Var<Real> delta);

/// mean_f (1 - n_f · n_f0), normals of both meshes computed differentiably.
template <typename Real>
Var<Real> normal_loss(Var<Real> final_vertices, Var<Real> init_vertices, const Faces& faces);

/// mean_v |ΔV_v| M_low(v) - λ_flow mean_v |ΔV_v| W(v), with sqrt(|ΔV|^2 + 1e-12) as the norm.
template <typename Real>
Var<Real> flow_guide_loss(Var<Real> delta, const AttentionField& attn, double lambda_flow = 0.1);

/// Differentiable pinhole projection of vertices [n, 3] -> [n, 2].
template <typename Real>
Var<Real> project_vertices(Var<Real> vertices, const Camera& cam);

template <typename Real>
struct SurrogateParts {
  Var<Real> landmark;  // mean pixel distance
  Var<Real> reg;       // |psi|^2
  Var<Real> vertex;    // mean |v - v_gt|^2 (zero when no ground truth is given)
  Var<Real> total;     // weighted sum
};

/// Landmark, expression-regularization and (synthetic mode) vertex terms. `targets` rows follow `indices`.
template <typename Real>
SurrogateParts<Real> reconstruction_surrogate(Var<Real> vertices, const std::vector<int>& indices,
                                              const Landmarks2d& targets, const Camera& cam, Var<Real> psi,
                                              const Vertices* ground_truth, const LossWeights& w);

template <typename Real>
struct LossParts {
  Var<Real> rec;
  Var<Real> lap;
  Var<Real> normal;
  Var<Real> flow_guide;
};

/// rec + geo (lap L_lap + normal L_normal + flow_guide L_fg). Throws naming any non-finite part.
template <typename Real>
Var<Real> total_loss(const LossParts<Real>& parts, const LossWeights& w);

}  // namespace microface
