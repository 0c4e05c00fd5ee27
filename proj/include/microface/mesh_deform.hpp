#pragma once

#include <array>
#include <vector>

#include "microface/local_features.hpp"

namespace microface {

struct DeformConfig {
  std::size_t layers = 3;
  std::size_t width = 64;
  std::size_t head_hidden = 64;
  double lambda_attn = 0.02;
  std::size_t patch = 5;

  void validate() const;
};

/// Registers `dg.gcn<l>.w` (bias-free graph convolutions) and the output head `dg.head`.
template <typename Real>
void init_mesh_deform(ParameterSet<Real>& params, std::size_t d_local, const DeformConfig& cfg, Rng& rng);

/// X0 = [V_init, f_local]; X <- ReLU(P X W) for each layer; ΔV_base = head(X). -> [n, 3]
template <typename Real>
Var<Real> gcn_deform(Graph<Real>& g, Var<Real> vertices, Var<Real> local, const CsrMatrix& propagation,
                     const DeformConfig& cfg);

using RegionIntensities = std::array<double, kRegionCount>;

/// Mean flow magnitude over each region's patch (image resolution). Flow is [H, W, 2].
RegionIntensities flow_intensity(const FlowField& flow, const RegionPatches& patches);

struct AttentionField {
  RegionIntensities intensity{};
  double mean = 0;
  double stddev = 0;  // population
  double tau = 0;
  RegionIntensities region_weight{};
  std::vector<double> weight;  // per vertex, in (0, 1)
  std::vector<bool> low;       // weight < 0.5
};

/// τ = μ + 0.5 σ over the regional intensities; w = sigmoid((I - τ) / (τ + 1e-4)).
AttentionField attention_weights(const RegionIntensities& intensities, const std::vector<Region>& vertex_region);

template <typename Real>
struct Refinement {
  Var<Real> delta;     // W ⊙ λ ΔV_base
  Var<Real> vertices;  // V_init + delta
};

/// One attention scalar per vertex, shared by its three coordinates. Attention is a constant.
template <typename Real>
Refinement<Real> refine(Graph<Real>& g, Var<Real> vertices, Var<Real> base, const AttentionField& attn,
                        double lambda_attn = 0.02);

}  // namespace microface
