#include "microface/losses.hpp"

#include <cmath>

#include "microface/mesh_ops.hpp"

namespace microface {

void LossWeights::validate() const {
  for (double v : {geo, lap, normal, flow_guide, flow, lmk, reg, vtx})
    if (!(v >= 0) || !std::isfinite(v)) throw Error("loss weights must be finite and non-negative");
}

template <typename Real>
Var<Real> laplacian_loss(const CsrMatrix& laplacian, Var<Real> delta) {
  if (delta.shape().size() != 2 || delta.shape()[0] != laplacian.rows)
    throw ShapeError("laplacian_loss: displacement " + shape_string(delta.shape()) + " vs Laplacian of size " +
                     std::to_string(laplacian.rows));
  return scale(sum(square(spmm(laplacian, delta))), Real(1) / static_cast<Real>(laplacian.rows));
}

template <typename Real>
Var<Real> normal_loss(Var<Real> final_vertices, Var<Real> init_vertices, const Faces& faces) {
  if (final_vertices.shape() != init_vertices.shape()) throw ShapeError("normal_loss: meshes differ in vertex count");
  if (faces.empty()) throw ShapeError("normal_loss: mesh has no faces");
  auto n = face_normals_graph(final_vertices, faces);
  auto n0 = face_normals_graph(init_vertices, faces);
  const auto f = static_cast<Real>(faces.size());
  return add_scalar(scale(sum(mul(n, n0)), Real(-1) / f), Real(1));
}

template <typename Real>
Var<Real> flow_guide_loss(Var<Real> delta, const AttentionField& attn, double lambda_flow) {
  const std::size_t n = delta.shape()[0];
  if (attn.weight.size() != n || attn.low.size() != n)
    throw ShapeError("flow_guide_loss: attention covers " + std::to_string(attn.weight.size()) + " vertices, not " +
                     std::to_string(n));
  Graph<Real>& g = *delta.graph();
  Tensor<Real> coef(Shape{n});
  for (std::size_t i = 0; i < n; ++i)
    coef[i] = static_cast<Real>((attn.low[i] ? 1.0 : 0.0) - lambda_flow * attn.weight[i]);
  auto norm = sqrt_eps(row_sum(square(delta)), Real(1e-12));
  return scale(sum(mul(norm, g.constant(std::move(coef)))), Real(1) / static_cast<Real>(n));
}

template <typename Real>
Var<Real> project_vertices(Var<Real> v, const Camera& cam) {
  if (v.shape().size() != 2 || v.shape()[1] != 3) throw ShapeError("project_vertices: expected [n, 3]");
  for (std::size_t i = 0; i < v.shape()[0]; ++i)
    if (!(v.value().at(i, 2) > Real(1e-6))) throw Error("project_vertices: vertex " + std::to_string(i) + " has z <= 1e-6");
  auto xy = slice_cols(v, 0, 2);
  auto z = slice_cols(v, 2, 3);
  auto zz = concat_cols<Real>({z, z});
  Graph<Real>& g = *v.graph();
  Tensor<Real> f(Shape{v.shape()[0], 2}), c(Shape{v.shape()[0], 2});
  for (std::size_t i = 0; i < v.shape()[0]; ++i) {
    f.at(i, 0) = static_cast<Real>(cam.fx);
    f.at(i, 1) = static_cast<Real>(cam.fy);
    c.at(i, 0) = static_cast<Real>(cam.cx);
    c.at(i, 1) = static_cast<Real>(cam.cy);
  }
  return add(mul(div(xy, zz), g.constant(std::move(f))), g.constant(std::move(c)));
}

template <typename Real>
SurrogateParts<Real> reconstruction_surrogate(Var<Real> vertices, const std::vector<int>& indices,
                                              const Landmarks2d& targets, const Camera& cam, Var<Real> psi,
                                              const Vertices* ground_truth, const LossWeights& w) {
  if (static_cast<std::size_t>(targets.rows()) != indices.size())
    throw ShapeError("reconstruction_surrogate: " + std::to_string(targets.rows()) + " landmarks for " +
                     std::to_string(indices.size()) + " landmark vertices");
  Graph<Real>& g = *vertices.graph();
  const std::size_t L = indices.size(), n = vertices.shape()[0];
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  auto proj = project_vertices(gather_rows(vertices, idx), cam);
  Tensor<Real> tgt(Shape{L, 2});
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t k = 0; k < 2; ++k) tgt.at(i, k) = static_cast<Real>(targets(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)));
  auto diff = sub(proj, g.constant(std::move(tgt)));
  SurrogateParts<Real> s;
  s.landmark = mean(sqrt_eps(row_sum(square(diff)), Real(1e-12)));
  s.reg = sum(square(psi));
  if (ground_truth) {
    if (static_cast<std::size_t>(ground_truth->rows()) != n) throw ShapeError("reconstruction_surrogate: ground truth size mismatch");
    Tensor<Real> gt(Shape{n, 3});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < 3; ++k) gt.at(i, k) = static_cast<Real>((*ground_truth)(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)));
    s.vertex = scale(sum(square(sub(vertices, g.constant(std::move(gt))))), Real(1) / static_cast<Real>(n));
  } else {
    s.vertex = g.constant(Tensor<Real>::scalar(Real(0)));
  }
  s.total = add(add(scale(s.landmark, static_cast<Real>(w.lmk)), scale(s.reg, static_cast<Real>(w.reg))),
                scale(s.vertex, static_cast<Real>(w.vtx)));
  return s;
}

template <typename Real>
Var<Real> total_loss(const LossParts<Real>& parts, const LossWeights& w) {
  const std::pair<const char*, Var<Real>> named[] = {
      {"rec", parts.rec}, {"lap", parts.lap}, {"normal", parts.normal}, {"flow_guide", parts.flow_guide}};
  for (const auto& [name, v] : named) {
    if (v.value().size() != 1) throw ShapeError(std::string("total_loss: part '") + name + "' is not a scalar");
    if (!std::isfinite(static_cast<double>(v.value()[0])))
      throw NumericError(std::string("total_loss: part '") + name + "' is not finite");
  }
  auto geo = add(add(scale(parts.lap, static_cast<Real>(w.lap)), scale(parts.normal, static_cast<Real>(w.normal))),
                 scale(parts.flow_guide, static_cast<Real>(w.flow_guide)));
  return add(parts.rec, scale(geo, static_cast<Real>(w.geo)));
}

#define MICROFACE_INSTANTIATE(Real)                                                                               \
  template Var<Real> laplacian_loss(const CsrMatrix&, Var<Real>);                                                 \
  template Var<Real> normal_loss(Var<Real>, Var<Real>, const Faces&);                                             \
  template Var<Real> flow_guide_loss(Var<Real>, const AttentionField&, double);                                   \
  template Var<Real> project_vertices(Var<Real>, const Camera&);                                                  \
  template SurrogateParts<Real> reconstruction_surrogate(Var<Real>, const std::vector<int>&, const Landmarks2d&,  \
                                                         const Camera&, Var<Real>, const Vertices*, const LossWeights&); \
  template Var<Real> total_loss(const LossParts<Real>&, const LossWeights&);
MICROFACE_INSTANTIATE(float)
MICROFACE_INSTANTIATE(double)
#undef MICROFACE_INSTANTIATE

}  // namespace microface
