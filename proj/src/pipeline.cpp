#include "microface/pipeline.hpp"

#include <cmath>

#include "microface/mesh_ops.hpp"
#include "microface/ops.hpp"

namespace microface {

using nlohmann::json;

void ModelConfig::validate() const {
  dem.validate();
  local.validate();
  deform.validate();
}

ModelContext::ModelContext(const FaceModel& m)
    : model(&m),
      adjacency(build_adjacency(m.faces, m.vertex_count())),
      propagation(normalized_propagation(adjacency)),
      laplacian(uniform_laplacian(adjacency)),
      regions(m.region_vertices()),
      landmarks(m.all_landmarks()) {
  for (std::size_t r = 0; r < regions.size(); ++r)
    if (regions[r].empty())
      throw Error(std::string("face model has no vertices in region ") + region_name(static_cast<Region>(r)));
}

template <typename Real>
void init_parameters(ParameterSet<Real>& params, const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  init_dynamic_encoded(params, cfg.dem, rng);
  init_local_features(params, cfg.local, rng);
  init_mesh_deform(params, cfg.local.d_local, cfg.deform, rng);
}

SequenceInput sequence_input(const SyntheticSequence& seq) {
  SequenceInput in;
  in.camera = seq.camera;
  in.onset = onset_from_sequence(seq);
  in.flows = seq.flows;
  in.fan = seq.fan_landmarks;
  in.mp = seq.mp_landmarks;
  in.ground_truth = seq.meshes.empty() ? nullptr : &seq.meshes;
  return in;
}

FlowField frame_flow(const SequenceInput& in, std::size_t t) {
  if (t == 0) return FlowField(Shape{static_cast<std::size_t>(in.camera.height), static_cast<std::size_t>(in.camera.width), 2});
  return in.flows.at(t - 1);
}

namespace {

std::pair<std::size_t, std::size_t> motion_map_extent(const Camera& cam, const LocalFeatureConfig& cfg) {
  std::size_t h = static_cast<std::size_t>(cam.height), w = static_cast<std::size_t>(cam.width);
  for (std::size_t i = 0; i < cfg.cnn_channels.size(); ++i) {
    const std::size_t stride = i == 0 ? 2 : 1;
    h = conv_out_extent(h, 3, stride, 1);
    w = conv_out_extent(w, 3, stride, 1);
  }
  return {h, w};
}

Landmarks2d stack_landmarks(const Landmarks2d& fan, const Landmarks2d& mp) {
  Landmarks2d out(fan.rows() + mp.rows(), 2);
  out.topRows(fan.rows()) = fan;
  out.bottomRows(mp.rows()) = mp;
  return out;
}

template <typename Real>
Var<Real> zeros(Graph<Real>& g, std::size_t rows, std::size_t cols) {
  return g.constant(Tensor<Real>(Shape{rows, cols}));
}

}  // namespace

FrameGeometry frame_geometry(const ModelContext& ctx, const ModelConfig& cfg, const Vertices& v, const Camera& cam,
                             const Landmarks2d& fan, const Landmarks2d& mp, const FlowField& flow) {
  FrameGeometry geo;
  const Mesh mesh{v, ctx.model->faces};
  auto lifted = lift_landmarks(fan, mp, cam, mesh);
  geo.assignment = nearest_landmarks(v, lifted.points);
  geo.lifted = std::move(lifted.points);
  geo.landmark_fallbacks = lifted.fallbacks;
  geo.image_patches = region_patches(ctx.regions, v, cam, static_cast<std::size_t>(cam.height),
                                     static_cast<std::size_t>(cam.width), cfg.deform.patch);
  const auto [mh, mw] = motion_map_extent(cam, cfg.local);
  if (mh < cfg.local.patch || mw < cfg.local.patch)
    throw Error("motion feature map " + std::to_string(mh) + "x" + std::to_string(mw) + " is smaller than the " +
                std::to_string(cfg.local.patch) + "x" + std::to_string(cfg.local.patch) + " region patch");
  geo.map_patches = region_patches(ctx.regions, v, cam, mh, mw, cfg.local.patch);
  geo.attention = attention_weights(flow_intensity(flow, geo.image_patches), ctx.model->vertex_region);
  return geo;
}

template <typename Real>
FrameResult<Real> run_frame(Graph<Real>& g, const ModelContext& ctx, const ModelConfig& cfg, const LossWeights& w,
                            Var<Real> v, Var<Real> psi_row, const FrameGeometry& geo, const Camera& cam,
                            const FlowField& flow, const Landmarks2d& targets, const Vertices* ground_truth) {
  const FaceModel& model = *ctx.model;
  const std::size_t n = model.vertex_count();
  if (v.shape() != Shape{n, 3}) throw ShapeError("run_frame: init vertices " + shape_string(v.shape()));
  FrameResult<Real> r;
  r.init = v;
  if (cfg.disable_dgmd) {
    r.base = zeros(g, n, 3);
    r.delta = r.base;
    r.final = v;
  } else {
    const auto& lc = cfg.local;
    auto geo_f = lc.use_geo ? geo_features(g, v, ctx.propagation) : zeros(g, n, lc.d_geo);
    auto ldm_f = lc.use_landmark
                     ? scale(landmark_features(g, v, geo.lifted, geo.assignment), static_cast<Real>(lc.landmark_scale))
                     : zeros(g, n, LocalFeatureConfig::kLandmarkDim);
    Var<Real> mot_f;
    if (lc.use_motion) {
      auto channels = flow_channels<Real>(flow);
      for (auto& c : channels.values()) c *= static_cast<Real>(lc.flow_scale);
      auto pix = motion_pixel_features(g, g.constant(std::move(channels)), lc);
      mot_f = region_motion_features(pix.features, geo.map_patches, model.vertex_region);
    } else {
      mot_f = zeros(g, n, lc.d_mot());
    }
    auto local = fuse_features(g, geo_f, ldm_f, mot_f);
    r.base = gcn_deform(g, v, local, ctx.propagation, cfg.deform);
    auto ref = refine(g, v, r.base, geo.attention, cfg.deform.lambda_attn);
    r.delta = ref.delta;
    r.final = ref.vertices;
  }
  r.surrogate = reconstruction_surrogate(r.final, ctx.landmarks, targets, cam, psi_row, ground_truth, w);
  r.parts.rec = r.surrogate.total;
  if (cfg.disable_dgmd) {
    r.parts.lap = g.constant(Tensor<Real>::scalar(Real(0)));
    r.parts.normal = r.parts.lap;
    r.parts.flow_guide = r.parts.lap;
  } else {
    r.parts.lap = laplacian_loss(ctx.laplacian, r.delta);
    r.parts.normal = normal_loss(r.final, v, model.faces);
    r.parts.flow_guide = flow_guide_loss(r.delta, geo.attention, w.flow);
  }
  r.total = total_loss(r.parts, w);
  return r;
}

template <typename Real>
SequenceResult<Real> run_sequence(Graph<Real>& g, const ModelContext& ctx, const ModelConfig& cfg,
                                  const SequenceInput& in, const LossWeights& w,
                                  const std::vector<FrameGeometry>* frozen) {
  const FaceModel& model = *ctx.model;
  const std::size_t T = in.frames();
  const std::size_t ne = model.expression_count();
  if (T < 2) throw Error("run_sequence: a clip needs at least two frames");
  if (in.fan.size() != T || in.mp.size() != T)
    throw ShapeError("run_sequence: landmark tracks cover " + std::to_string(in.fan.size()) + " frames, flows imply " +
                     std::to_string(T));
  if (cfg.dem.n_expression != ne)
    throw ShapeError("run_sequence: model has " + std::to_string(ne) + " expression coefficients, config expects " +
                     std::to_string(cfg.dem.n_expression));
  if (in.ground_truth && in.ground_truth->size() != T) throw ShapeError("run_sequence: ground truth frame count");
  if (frozen && frozen->size() != T) throw ShapeError("run_sequence: frozen geometry frame count");
  if (static_cast<std::size_t>(in.onset.expression.size()) != ne) throw ShapeError("run_sequence: onset expression size");

  Tensor<Real> psi1_t(Shape{ne});
  for (std::size_t j = 0; j < ne; ++j) psi1_t[j] = static_cast<Real>(in.onset.expression[static_cast<Eigen::Index>(j)]);
  auto psi1 = g.constant(psi1_t);

  SequenceResult<Real> out;
  if (cfg.disable_dem) {
    Tensor<Real> rows(Shape{T, ne});
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < ne; ++j) rows.at(t, j) = psi1_t[j];
    out.psi = g.constant(std::move(rows));
  } else {
    auto volume = g.constant(flow_volume<Real>(in.flows));
    auto residuals = motion_encode(g, volume, cfg.dem);
    out.psi = ode_fuse(g, psi1, residuals, frame_times(T), cfg.dem);
  }
  auto meshes = init_meshes(g, model, in.onset, out.psi);

  Var<Real> acc;
  for (std::size_t t = 0; t < T; ++t) {
    const FlowField flow = frame_flow(in, t);
    if (frozen) {
      out.geometry.push_back((*frozen)[t]);
    } else {
      out.geometry.push_back(
          frame_geometry(ctx, cfg, to_vertices(meshes[t].value()), in.camera, in.fan[t], in.mp[t], flow));
    }
    const Vertices* gt = in.ground_truth ? &(*in.ground_truth)[t].vertices : nullptr;
    auto fr = run_frame(g, ctx, cfg, w, meshes[t], slice_rows(out.psi, t, t + 1), out.geometry.back(), in.camera,
                        flow, stack_landmarks(in.fan[t], in.mp[t]), gt);
    acc = t == 0 ? fr.total : add(acc, fr.total);
    out.frames.push_back(std::move(fr));
  }
  out.loss = scale(acc, Real(1) / static_cast<Real>(T));
  return out;
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  total += o.total;
  rec += o.rec;
  landmark += o.landmark;
  reg += o.reg;
  vertex += o.vertex;
  lap += o.lap;
  normal += o.normal;
  flow_guide += o.flow_guide;
  return *this;
}

LossBreakdown LossBreakdown::scaled(double s) const {
  LossBreakdown b = *this;
  for (double* v : {&b.total, &b.rec, &b.landmark, &b.reg, &b.vertex, &b.lap, &b.normal, &b.flow_guide}) *v *= s;
  return b;
}

json LossBreakdown::to_json() const {
  return json{{"total", total},   {"rec", rec}, {"landmark", landmark}, {"reg", reg},
              {"vertex", vertex}, {"lap", lap}, {"normal", normal},     {"flow_guide", flow_guide}};
}

template <typename Real>
LossBreakdown breakdown(const SequenceResult<Real>& r) {
  LossBreakdown b;
  auto val = [](Var<Real> v) { return static_cast<double>(v.value().item()); };
  for (const auto& f : r.frames) {
    LossBreakdown x;
    x.total = val(f.total);
    x.rec = val(f.parts.rec);
    x.landmark = val(f.surrogate.landmark);
    x.reg = val(f.surrogate.reg);
    x.vertex = val(f.surrogate.vertex);
    x.lap = val(f.parts.lap);
    x.normal = val(f.parts.normal);
    x.flow_guide = val(f.parts.flow_guide);
    b += x;
  }
  return r.frames.empty() ? b : b.scaled(1.0 / static_cast<double>(r.frames.size()));
}

template <typename Real>
Vertices to_vertices(const Tensor<Real>& t) {
  if (t.rank() != 2 || t.dim(1) != 3) throw ShapeError("to_vertices: expected [n, 3], got " + shape_string(t.shape()));
  Vertices v(static_cast<Eigen::Index>(t.dim(0)), 3);
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t k = 0; k < 3; ++k) v(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = static_cast<double>(t.at(i, k));
  return v;
}

json model_config_to_json(const ModelConfig& c) {
  return json{{"n_expression", c.dem.n_expression},
              {"encoder_channels", c.dem.encoder_channels},
              {"pool_grid", c.dem.pool_grid},
              {"flow_scale", c.dem.flow_scale},
              {"latent_dim", c.dem.latent_dim},
              {"ode_hidden", c.dem.ode_hidden},
              {"solver_steps", c.dem.steps_per_interval},
              {"d_geo", c.local.d_geo},
              {"cnn_channels", c.local.cnn_channels},
              {"d_local", c.local.d_local},
              {"fuse_hidden", c.local.fuse_hidden},
              {"region_patch", c.local.patch},
              {"local_flow_scale", c.local.flow_scale},
              {"landmark_scale", c.local.landmark_scale},
              {"gcn_layers", c.deform.layers},
              {"gcn_width", c.deform.width},
              {"head_hidden", c.deform.head_hidden},
              {"lambda_attn", c.deform.lambda_attn},
              {"attention_patch", c.deform.patch},
              {"use_geo", c.local.use_geo},
              {"use_landmark", c.local.use_landmark},
              {"use_motion", c.local.use_motion},
              {"disable_dem", c.disable_dem},
              {"disable_dgmd", c.disable_dgmd}};
}

void model_config_from_json(const json& j, ModelConfig& c) {
  if (!j.is_object()) throw Error("model config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "n_expression") c.dem.n_expression = v.get<std::size_t>();
      else if (key == "encoder_channels") c.dem.encoder_channels = v.get<std::vector<std::size_t>>();
      else if (key == "pool_grid") c.dem.pool_grid = v.get<std::size_t>();
      else if (key == "flow_scale") c.dem.flow_scale = v.get<double>();
      else if (key == "latent_dim") c.dem.latent_dim = v.get<std::size_t>();
      else if (key == "ode_hidden") c.dem.ode_hidden = v.get<std::size_t>();
      else if (key == "solver_steps") c.dem.steps_per_interval = v.get<std::size_t>();
      else if (key == "d_geo") c.local.d_geo = v.get<std::size_t>();
      else if (key == "cnn_channels") c.local.cnn_channels = v.get<std::vector<std::size_t>>();
      else if (key == "d_local") c.local.d_local = v.get<std::size_t>();
      else if (key == "fuse_hidden") c.local.fuse_hidden = v.get<std::size_t>();
      else if (key == "region_patch") c.local.patch = v.get<std::size_t>();
      else if (key == "local_flow_scale") c.local.flow_scale = v.get<double>();
      else if (key == "landmark_scale") c.local.landmark_scale = v.get<double>();
      else if (key == "gcn_layers") c.deform.layers = v.get<std::size_t>();
      else if (key == "gcn_width") c.deform.width = v.get<std::size_t>();
      else if (key == "head_hidden") c.deform.head_hidden = v.get<std::size_t>();
      else if (key == "lambda_attn") c.deform.lambda_attn = v.get<double>();
      else if (key == "attention_patch") c.deform.patch = v.get<std::size_t>();
      else if (key == "use_geo") c.local.use_geo = v.get<bool>();
      else if (key == "use_landmark") c.local.use_landmark = v.get<bool>();
      else if (key == "use_motion") c.local.use_motion = v.get<bool>();
      else if (key == "disable_dem") c.disable_dem = v.get<bool>();
      else if (key == "disable_dgmd") c.disable_dgmd = v.get<bool>();
      else throw Error("unknown model config key '" + key + "'");
    } catch (const json::exception& e) {
      throw Error("model config key '" + key + "': " + e.what());
    }
  }
  c.validate();
}

json attention_to_json(const AttentionField& a) {
  json intensity, region_weight;
  for (int r = 0; r < kRegionCount; ++r) {
    intensity[region_name(static_cast<Region>(r))] = a.intensity[static_cast<std::size_t>(r)];
    region_weight[region_name(static_cast<Region>(r))] = a.region_weight[static_cast<std::size_t>(r)];
  }
  std::vector<int> low(a.low.begin(), a.low.end());
  return json{{"intensity", intensity}, {"mean", a.mean},     {"stddev", a.stddev}, {"tau", a.tau},
              {"region_weight", region_weight}, {"weight", a.weight}, {"low", low}};
}

#define MICROFACE_INSTANTIATE(Real)                                                                                   \
  template void init_parameters(ParameterSet<Real>&, const ModelConfig&, std::uint64_t);                              \
  template FrameResult<Real> run_frame(Graph<Real>&, const ModelContext&, const ModelConfig&, const LossWeights&,      \
                                       Var<Real>, Var<Real>, const FrameGeometry&, const Camera&, const FlowField&,    \
                                       const Landmarks2d&, const Vertices*);                                          \
  template SequenceResult<Real> run_sequence(Graph<Real>&, const ModelContext&, const ModelConfig&,                   \
                                             const SequenceInput&, const LossWeights&,                                \
                                             const std::vector<FrameGeometry>*);                                      \
  template LossBreakdown breakdown(const SequenceResult<Real>&);                                                      \
  template Vertices to_vertices(const Tensor<Real>&);
MICROFACE_INSTANTIATE(float)
MICROFACE_INSTANTIATE(double)
#undef MICROFACE_INSTANTIATE

}  // namespace microface
