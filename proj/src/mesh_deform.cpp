#include "microface/mesh_deform.hpp"

#include <cmath>

namespace microface {

void DeformConfig::validate() const {
  if (layers == 0 || width == 0 || head_hidden == 0) throw Error("deformation network widths must be positive");
  if (!(lambda_attn > 0)) throw Error("attention scale must be positive");
  if (patch == 0) throw Error("patch size must be positive");
}

template <typename Real>
void init_mesh_deform(ParameterSet<Real>& params, std::size_t d_local, const DeformConfig& cfg, Rng& rng) {
  cfg.validate();
  std::size_t in = 3 + d_local;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    init_uniform(params, "dg.gcn" + std::to_string(l) + ".w", Shape{in, cfg.width}, in, rng);
    in = cfg.width;
  }
  init_mlp(params, "dg.head", {cfg.width, cfg.head_hidden, 3}, rng);
}

template <typename Real>
Var<Real> gcn_deform(Graph<Real>& g, Var<Real> vertices, Var<Real> local, const CsrMatrix& p, const DeformConfig& cfg) {
  const std::size_t n = vertices.shape()[0];
  if (vertices.shape() != Shape{n, 3} || local.shape().size() != 2 || local.shape()[0] != n || p.rows != n)
    throw ShapeError("gcn_deform: vertices " + shape_string(vertices.shape()) + ", features " +
                     shape_string(local.shape()) + ", propagation " + std::to_string(p.rows));
  auto x = concat_cols<Real>({vertices, local});
  for (std::size_t l = 0; l < cfg.layers; ++l) x = relu(spmm(p, matmul(x, g.param("dg.gcn" + std::to_string(l) + ".w"))));
  return mlp(g, x, "dg.head", 2, Activation::kRelu);
}

RegionIntensities flow_intensity(const FlowField& flow, const RegionPatches& patches) {
  if (flow.rank() != 3 || flow.dim(2) != 2) throw ShapeError("flow_intensity: flow must be [H, W, 2]");
  if (patches.patches.size() != static_cast<std::size_t>(kRegionCount))
    throw ShapeError("flow_intensity: expected one patch per region");
  RegionIntensities out{};
  for (std::size_t r = 0; r < patches.patches.size(); ++r) {
    const auto& patch = patches.patches[r];
    if (patch.empty()) throw Error("flow_intensity: empty patch for region " + std::string(region_name(static_cast<Region>(r))));
    double acc = 0;
    for (auto p : patch) acc += std::hypot(static_cast<double>(flow[2 * p]), static_cast<double>(flow[2 * p + 1]));
    out[r] = acc / static_cast<double>(patch.size());
  }
  return out;
}

AttentionField attention_weights(const RegionIntensities& intensities, const std::vector<Region>& vertex_region) {
  AttentionField a;
  a.intensity = intensities;
  for (double v : intensities) {
    if (!(v >= 0) || !std::isfinite(v)) throw Error("attention_weights: intensities must be finite and non-negative");
    a.mean += v;
  }
  a.mean /= kRegionCount;
  double var = 0;
  for (double v : intensities) var += (v - a.mean) * (v - a.mean);
  a.stddev = std::sqrt(var / kRegionCount);
  a.tau = a.mean + 0.5 * a.stddev;
  for (int r = 0; r < kRegionCount; ++r) {
    const double x = (intensities[static_cast<std::size_t>(r)] - a.tau) / (a.tau + 1e-4);
    a.region_weight[static_cast<std::size_t>(r)] = 1.0 / (1.0 + std::exp(-x));
  }
  a.weight.reserve(vertex_region.size());
  a.low.reserve(vertex_region.size());
  for (auto r : vertex_region) {
    const double w = a.region_weight[static_cast<std::size_t>(r)];
    a.weight.push_back(w);
    a.low.push_back(w < 0.5);
  }
  return a;
}

template <typename Real>
Refinement<Real> refine(Graph<Real>& g, Var<Real> vertices, Var<Real> base, const AttentionField& attn,
                        double lambda_attn) {
  const std::size_t n = vertices.shape()[0];
  if (base.shape() != vertices.shape() || attn.weight.size() != n)
    throw ShapeError("refine: vertices " + shape_string(vertices.shape()) + ", base " + shape_string(base.shape()) +
                     ", attention for " + std::to_string(attn.weight.size()) + " vertices");
  Tensor<Real> scale(Shape{n});
  for (std::size_t i = 0; i < n; ++i) scale[i] = static_cast<Real>(lambda_attn * attn.weight[i]);
  auto delta = scale_rows(base, g.constant(std::move(scale)));
  return {delta, add(vertices, delta)};
}

#define MICROFACE_INSTANTIATE(Real)                                                                       \
  template void init_mesh_deform(ParameterSet<Real>&, std::size_t, const DeformConfig&, Rng&);            \
  template Var<Real> gcn_deform(Graph<Real>&, Var<Real>, Var<Real>, const CsrMatrix&, const DeformConfig&); \
  template Refinement<Real> refine(Graph<Real>&, Var<Real>, Var<Real>, const AttentionField&, double);
MICROFACE_INSTANTIATE(float)
MICROFACE_INSTANTIATE(double)
#undef MICROFACE_INSTANTIATE

}  // namespace microface
