#include "microface/dynamic_encoded.hpp"

#include <cmath>
#include <map>

#include "microface/eigen_bridge.hpp"

namespace microface {

void DynamicConfig::validate() const {
  if (n_expression == 0) throw Error("expression dimension must be positive");
  if (encoder_channels.empty()) throw Error("motion encoder needs at least one conv block");
  if (pool_grid == 0) throw Error("pool grid must be at least 1");
  if (!(flow_scale > 0) || !std::isfinite(flow_scale)) throw Error("flow scale must be finite and positive");
  if (latent_dim == 0 || ode_hidden == 0) throw Error("latent and hidden widths must be positive");
  if (steps_per_interval == 0) throw Error("solver needs at least one step per interval");
}

template <typename Real>
void init_dynamic_encoded(ParameterSet<Real>& params, const DynamicConfig& cfg, Rng& rng) {
  cfg.validate();
  std::size_t in = 2;
  for (std::size_t i = 0; i < cfg.encoder_channels.size(); ++i) {
    const std::size_t out = cfg.encoder_channels[i];
    const std::string name = "dem.enc.conv" + std::to_string(i);
    init_uniform(params, name + ".w", Shape{out, in, 3, 3, 3}, in * 27, rng);
    params.add(name + ".b", Tensor<Real>(Shape{out}));
    in = out;
  }
  init_linear(params, "dem.enc.head", in * cfg.pool_grid * cfg.pool_grid, cfg.n_expression, rng);

  init_linear(params, "dem.latent_enc", cfg.n_expression, cfg.latent_dim, rng);
  const Eigen::MatrixXd enc = tensor_to_matrix(params.get("dem.latent_enc.w"));
  const Eigen::MatrixXd dec = enc.completeOrthogonalDecomposition().pseudoInverse();
  params.add("dem.latent_dec.w", matrix_to_tensor<Real>(dec));
  params.add("dem.latent_dec.b", Tensor<Real>(Shape{cfg.n_expression}));

  init_mlp(params, "dem.ode", {cfg.latent_dim + cfg.n_expression + 1, cfg.ode_hidden, cfg.ode_hidden, cfg.latent_dim},
           rng);
  params.get_mut("dem.ode.l2.w").fill(Real(0));
}

template <typename Real>
Tensor<Real> flow_volume(const std::vector<FlowField>& flows) {
  if (flows.empty()) throw ShapeError("flow_volume: need at least one flow field (T >= 2)");
  const Shape first = flows.front().shape();
  if (first.size() != 3 || first[2] != 2) throw ShapeError("flow_volume: flows must be [H, W, 2], got " + shape_string(first));
  const std::size_t D = flows.size(), H = first[0], W = first[1];
  Tensor<Real> out(Shape{2, D, H, W});
  for (std::size_t d = 0; d < D; ++d) {
    if (flows[d].shape() != first)
      throw ShapeError("flow_volume: frame " + std::to_string(d + 1) + " has extent " + shape_string(flows[d].shape()) +
                       ", expected " + shape_string(first));
    for (std::size_t p = 0; p < H * W; ++p) {
      out[(0 * D + d) * H * W + p] = static_cast<Real>(flows[d][2 * p]);
      out[(1 * D + d) * H * W + p] = static_cast<Real>(flows[d][2 * p + 1]);
    }
  }
  return out;
}

template <typename Real>
Var<Real> motion_features(Graph<Real>& g, Var<Real> volume, const DynamicConfig& cfg) {
  if (volume.shape().size() != 4 || volume.shape()[0] != 2)
    throw ShapeError("motion_encode: expected volume [2, T-1, H, W], got " + shape_string(volume.shape()));
  Var<Real> x = cfg.flow_scale == 1.0 ? volume : scale(volume, static_cast<Real>(cfg.flow_scale));
  for (std::size_t i = 0; i < cfg.encoder_channels.size(); ++i) {
    const std::string name = "dem.enc.conv" + std::to_string(i);
    x = relu(conv3d(x, g.param(name + ".w"), g.param(name + ".b"), {1, 2, 2}, {1, 1, 1}));
  }
  const std::size_t C = x.shape()[0], D = x.shape()[1], gg = cfg.pool_grid * cfg.pool_grid;
  auto pooled = pool_grid(x, cfg.pool_grid, cfg.pool_grid);  // [C, D, g, g]
  auto rows = transpose(reshape(pooled, Shape{C, D * gg}));  // [(d, cell), C]
  return reshape(rows, Shape{D, gg * C});
}

template <typename Real>
Var<Real> motion_encode(Graph<Real>& g, Var<Real> volume, const DynamicConfig& cfg) {
  return linear(g, motion_features(g, volume, cfg), "dem.enc.head");
}

std::vector<double> frame_times(std::size_t frames) {
  if (frames < 2) throw Error("need at least 2 frames");
  std::vector<double> t(frames);
  for (std::size_t k = 0; k < frames; ++k) t[k] = static_cast<double>(k) / static_cast<double>(frames - 1);
  return t;
}

OdeSchedule make_ode_schedule(std::size_t frames, const std::vector<double>& query_times,
                              std::size_t steps_per_interval) {
  if (frames < 2) throw Error("ode schedule needs at least 2 frames");
  if (steps_per_interval == 0) throw Error("ode schedule needs at least one step per interval");
  const double h0 = 1.0 / static_cast<double>((frames - 1) * steps_per_interval);
  std::map<long long, std::size_t> index;
  OdeSchedule s;
  std::vector<std::vector<std::pair<std::size_t, double>>> entries(query_times.size());
  auto slot = [&](double tau) {
    const long long key = std::llround(tau * 1e12);
    auto [it, inserted] = index.emplace(key, s.times.size());
    if (inserted) s.times.push_back(tau);
    return it->second;
  };
  for (std::size_t q = 0; q < query_times.size(); ++q) {
    const double t = query_times[q];
    if (!(t >= 0.0 && t <= 1.0)) throw Error("ode_fuse: query time " + std::to_string(t) + " outside [0, 1]");
    if (t == 0.0) continue;
    const auto n = static_cast<std::size_t>(std::ceil(t / h0 - 1e-9));
    const double h = t / static_cast<double>(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double a = static_cast<double>(k) * h;
      // k2 and k3 coincide because the field does not depend on z: h/6 (f(a) + 4 f(a + h/2) + f(a + h)).
      entries[q].emplace_back(slot(a), h / 6.0);
      entries[q].emplace_back(slot(a + 0.5 * h), 4.0 * h / 6.0);
      entries[q].emplace_back(slot(a + h), h / 6.0);
    }
  }
  const auto N = static_cast<Eigen::Index>(s.times.size());
  s.weights = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(query_times.size()), N);
  for (std::size_t q = 0; q < entries.size(); ++q)
    for (const auto& [j, w] : entries[q]) s.weights(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(j)) += w;

  const std::size_t K = frames - 1;
  s.interp = Eigen::MatrixXd::Zero(N, static_cast<Eigen::Index>(K));
  for (Eigen::Index j = 0; j < N; ++j) {
    const double p = s.times[static_cast<std::size_t>(j)] * static_cast<double>(K) - 0.5;
    if (K == 1 || p <= 0.0) {
      s.interp(j, 0) = 1.0;
    } else if (p >= static_cast<double>(K - 1)) {
      s.interp(j, static_cast<Eigen::Index>(K - 1)) = 1.0;
    } else {
      const auto i = static_cast<Eigen::Index>(std::floor(p));
      const double a = p - static_cast<double>(i);
      s.interp(j, i) = 1.0 - a;
      s.interp(j, i + 1) += a;
    }
  }
  return s;
}

template <typename Real>
Var<Real> learned_dynamics(Graph<Real>& g, Var<Real> context, Var<Real> residual, Var<Real> tau) {
  return mlp(g, concat_cols<Real>({context, residual, tau}), "dem.ode", 3, Activation::kTanh);
}

template <typename Real>
Var<Real> ode_fuse(Graph<Real>& g, Var<Real> psi1, Var<Real> residuals, const std::vector<double>& query_times,
                   const DynamicConfig& cfg, const OdeDynamics<Real>& dynamics) {
  const std::size_t n = cfg.n_expression;
  if (psi1.value().size() != n) throw ShapeError("ode_fuse: psi1 must have " + std::to_string(n) + " entries");
  if (residuals.shape().size() != 2 || residuals.shape()[1] != n)
    throw ShapeError("ode_fuse: residuals must be [T-1, " + std::to_string(n) + "], got " +
                     shape_string(residuals.shape()));
  const std::size_t T = residuals.shape()[0] + 1;
  const OdeSchedule s = make_ode_schedule(T, query_times, cfg.steps_per_interval);
  const std::size_t Q = query_times.size(), N = s.times.size();

  auto z0 = linear(g, reshape(psi1, Shape{1, n}), "dem.latent_enc");  // [1, d_z]
  auto z = matmul(g.constant(Tensor<Real>(Shape{Q, 1}, Real(1))), z0);
  if (N > 0) {
    auto context = matmul(g.constant(Tensor<Real>(Shape{N, 1}, Real(1))), z0);
    auto lookup = matmul(g.constant(matrix_to_tensor<Real>(s.interp)), residuals);
    Tensor<Real> tau(Shape{N, 1});
    for (std::size_t j = 0; j < N; ++j) tau[j] = static_cast<Real>(s.times[j]);
    auto field = dynamics(g, context, lookup, g.constant(std::move(tau)));
    if (field.shape() != Shape{N, z0.shape()[1]})
      throw ShapeError("ode_fuse: dynamics returned " + shape_string(field.shape()));
    z = add(z, matmul(g.constant(matrix_to_tensor<Real>(s.weights)), field));
  }
  return linear(g, z, "dem.latent_dec");
}

template <typename Real>
std::vector<Var<Real>> init_meshes(Graph<Real>& g, const FaceModel& model, const ParamState& onset, Var<Real> psi) {
  const std::size_t nv = model.vertex_count(), ne = model.expression_count();
  if (psi.shape().size() != 2 || psi.shape()[1] != ne)
    throw ShapeError("init_meshes: psi must be [T, " + std::to_string(ne) + "], got " + shape_string(psi.shape()));
  if (static_cast<std::size_t>(onset.shape.size()) != model.shape_count())
    throw ShapeError("init_meshes: onset shape coefficients do not match the model");
  const Eigen::Matrix3d R = axis_angle_to_matrix(onset.rotation);
  // Static part: (template + B_shape beta) R^T + t.
  const Eigen::VectorXd shape_offsets = model.shape_basis * onset.shape;
  Eigen::MatrixXd base(static_cast<Eigen::Index>(nv), 3);
  for (Eigen::Index i = 0; i < base.rows(); ++i) {
    const Vec3 local = model.template_vertices.row(i).transpose() + shape_offsets.segment<3>(3 * i);
    base.row(i) = (R * local + onset.translation).transpose();
  }
  auto base_c = g.constant(matrix_to_tensor<Real>(base));
  auto rt = g.constant(matrix_to_tensor<Real>(R.transpose()));
  auto offsets = matmul(psi, g.constant(matrix_to_tensor<Real>(model.expression_basis.transpose())));  // [T, 3 nv]
  std::vector<Var<Real>> out;
  for (std::size_t t = 0; t < psi.shape()[0]; ++t) {
    auto local = reshape(slice_rows(offsets, t, t + 1), Shape{nv, 3});
    out.push_back(add(base_c, matmul(local, rt)));
  }
  return out;
}

ParamState onset_from_sequence(const SyntheticSequence& seq) {
  if (seq.params.empty()) throw Error("sequence has no frames");
  return seq.params.front();
}

#define MICROFACE_INSTANTIATE(Real)                                                                                \
  template void init_dynamic_encoded(ParameterSet<Real>&, const DynamicConfig&, Rng&);                             \
  template Tensor<Real> flow_volume<Real>(const std::vector<FlowField>&);                                         \
  template Var<Real> motion_features(Graph<Real>&, Var<Real>, const DynamicConfig&);                              \
  template Var<Real> motion_encode(Graph<Real>&, Var<Real>, const DynamicConfig&);                                \
  template Var<Real> learned_dynamics(Graph<Real>&, Var<Real>, Var<Real>, Var<Real>);                             \
  template Var<Real> ode_fuse(Graph<Real>&, Var<Real>, Var<Real>, const std::vector<double>&, const DynamicConfig&, \
                              const OdeDynamics<Real>&);                                                           \
  template std::vector<Var<Real>> init_meshes(Graph<Real>&, const FaceModel&, const ParamState&, Var<Real>);
MICROFACE_INSTANTIATE(float)
MICROFACE_INSTANTIATE(double)
#undef MICROFACE_INSTANTIATE

}  // namespace microface
