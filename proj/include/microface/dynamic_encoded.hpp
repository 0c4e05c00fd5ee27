#pragma once

#include <functional>
#include <vector>

#include "microface/face_model.hpp"
#include "microface/nn.hpp"
#include "microface/synth.hpp"

namespace microface {

struct DynamicConfig {
  std::size_t n_expression = 8;
  std::vector<std::size_t> encoder_channels{8, 16, 32};
  /// Spatial grid of the average pool before the per-frame head; 1 is global pooling. 12 keeps every cell
  /// of the encoder map for 96 x 96 flow.
  std::size_t pool_grid = 12;
  /// Flow is multiplied by this before the first convolution (pixels -> hundredths of a pixel).
  double flow_scale = 100.0;
  std::size_t latent_dim = 16;
  std::size_t ode_hidden = 64;
  std::size_t steps_per_interval = 8;

  void validate() const;
};

/// Registers the motion encoder (`dem.enc.*`), latent encoder/decoder (`dem.latent_enc`, `dem.latent_dec`)
/// and dynamics MLP (`dem.ode`). The decoder starts as the pseudo-inverse of the encoder and the last
/// dynamics layer starts at zero, so an untrained module reproduces the onset expression.
template <typename Real>
void init_dynamic_encoded(ParameterSet<Real>& params, const DynamicConfig& cfg, Rng& rng);

/// Stacks flows [H, W, 2] into the encoder volume [2, T - 1, H, W].
template <typename Real>
Tensor<Real> flow_volume(const std::vector<FlowField>& flows);

/// Volume [2, T - 1, H, W] -> per-interval expression residuals [T - 1, n_expression].
template <typename Real>
Var<Real> motion_encode(Graph<Real>& g, Var<Real> volume, const DynamicConfig& cfg);

/// Pre-head per-frame features [T - 1, C * grid * grid] (exposed for probing).
template <typename Real>
Var<Real> motion_features(Graph<Real>& g, Var<Real> volume, const DynamicConfig& cfg);

/// Fixed-step RK4 schedule for integrating from clip time 0 to each query time.
/// The dynamics do not depend on z, so every stage can be evaluated up front:
/// z(t_q) = z0 + sum_j weights(q, j) f(times[j]).
struct OdeSchedule {
  std::vector<double> times;  // distinct evaluation times
  Eigen::MatrixXd weights;    // [queries, times]
  Eigen::MatrixXd interp;     // [times, T - 1] piecewise-linear lookup of the residuals
};

/// Residual Δψ_k sits at the midpoint of its interval, (k - 0.5) / (T - 1); lookup is flat beyond the
/// first and last midpoints. Each query t uses ceil(t (T - 1) steps) equal steps.
OdeSchedule make_ode_schedule(std::size_t frames, const std::vector<double>& query_times,
                              std::size_t steps_per_interval);

/// Frame k (1-based) sits at clip time (k - 1) / (T - 1).
std::vector<double> frame_times(std::size_t frames);

/// dz/dτ evaluated on stacked rows: context [N, d_z], residual [N, n_ψ], τ [N, 1] -> [N, d_z].
template <typename Real>
using OdeDynamics = std::function<Var<Real>(Graph<Real>&, Var<Real>, Var<Real>, Var<Real>)>;

/// The learned dynamics: a tanh MLP over concat(context, residual, τ).
template <typename Real>
Var<Real> learned_dynamics(Graph<Real>& g, Var<Real> context, Var<Real> residual, Var<Real> tau);

/// ψ at each query time: D(E(ψ1) + ∫ f dτ). `psi1` [n_ψ], `residuals` [T - 1, n_ψ] -> [Q, n_ψ].
template <typename Real>
Var<Real> ode_fuse(Graph<Real>& g, Var<Real> psi1, Var<Real> residuals, const std::vector<double>& query_times,
                   const DynamicConfig& cfg, const OdeDynamics<Real>& dynamics = learned_dynamics<Real>);

/// Blendshape meshes for every row of `psi` [T, n_ψ] with the onset shape and pose held fixed.
template <typename Real>
std::vector<Var<Real>> init_meshes(Graph<Real>& g, const FaceModel& model, const ParamState& onset, Var<Real> psi);

/// Onset parameters (β1, ψ1, θ1) from a sequence's first frame.
ParamState onset_from_sequence(const SyntheticSequence& seq);

}  // namespace microface
