#include "microface/gradcheck_suite.hpp"

#include <random>

#include "microface/gradcheck.hpp"
#include "microface/mesh_ops.hpp"
#include "microface/ops.hpp"

namespace microface {

namespace {

constexpr double kEps = 3e-4;
constexpr std::size_t kMaxProbes = 16;

Tensor<double> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(shape);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

/// sum(x * c) with a fixed random c, so every output entry feeds the scalar differently.
Var<double> weighted_sum(Graph<double>& g, Var<double> x, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(x, g.constant(random_tensor(x.shape(), rng))));
}

ParameterSet<double> subset(const ParameterSet<double>& all, const std::vector<std::string>& prefixes) {
  ParameterSet<double> out;
  for (const auto& [name, t] : all.items())
    for (const auto& p : prefixes)
      if (name.rfind(p, 0) == 0) {
        out.add(name, t);
        break;
      }
  return out;
}

Tensor<double> vertices_tensor(const Vertices& v) {
  Tensor<double> t(Shape{static_cast<std::size_t>(v.rows()), 3});
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (int k = 0; k < 3; ++k) t.at(static_cast<std::size_t>(i), static_cast<std::size_t>(k)) = v(i, k);
  return t;
}

Landmarks2d stacked_landmarks(const SyntheticSequence& seq, std::size_t t) {
  Landmarks2d out(seq.fan_landmarks[t].rows() + seq.mp_landmarks[t].rows(), 2);
  out.topRows(seq.fan_landmarks[t].rows()) = seq.fan_landmarks[t];
  out.bottomRows(seq.mp_landmarks[t].rows()) = seq.mp_landmarks[t];
  return out;
}

struct Fixture {
  FaceModel model = tiny_face_model();
  ModelContext ctx{model};
  ModelConfig cfg = tiny_model_config(model.expression_count());
  SyntheticSequence seq = tiny_sequence(model, 7);
  SequenceInput input = sequence_input(seq);
  ParameterSet<double> params;
  std::vector<FrameGeometry> geometry;

  Fixture() {
    init_parameters(params, cfg, 11);
    // Move off the structured initialization (zero biases, zero last dynamics layer) so every path carries gradient.
    Rng rng(12);
    std::uniform_real_distribution<double> u(-0.1, 0.1);
    ParameterSet<double> shaken;
    for (const auto& [name, t] : params.items()) {
      Tensor<double> v = t;
      for (auto& x : v.values()) x += u(rng);
      shaken.add(name, std::move(v));
    }
    params = std::move(shaken);
    Graph<double> g(&params);
    geometry = run_sequence(g, ctx, cfg, input, LossWeights{}).geometry;
  }
};

class Runner {
 public:
  Runner(std::string module, double tol) : module_(std::move(module)), tol_(tol) {}

  void input(const std::string& name, const Tensor<double>& x, const ScalarFn& f,
             const ParameterSet<double>* params = nullptr, double eps = kEps) {
    GradcheckResult r;
    r.module = module_;
    r.name = name;
    r.max_rel_error = finite_diff_gradcheck(f, x, eps, params);
    r.probes = x.size();
    r.worst = "input";
    finish(std::move(r));
  }

  void params(const std::string& name, ParameterSet<double> set, const ParamLossFn& f) {
    const auto rep = gradcheck_parameters(f, set, kEps, kMaxProbes, 99);
    GradcheckResult r;
    r.module = module_;
    r.name = name;
    r.max_rel_error = rep.max_rel_error;
    r.probes = rep.probes;
    r.worst = rep.worst;
    finish(std::move(r));
  }

  std::vector<GradcheckResult> results;

 private:
  void finish(GradcheckResult r) {
    r.passed = r.max_rel_error < tol_;
    results.push_back(std::move(r));
  }
  std::string module_;
  double tol_;
};

void face_model_checks(Runner& run, const Fixture& fx) {
  const auto& m = fx.model;
  const auto& onset = fx.input.onset;
  auto vec = [](const Eigen::VectorXd& v) {
    Tensor<double> t(Shape{static_cast<std::size_t>(v.size())});
    for (Eigen::Index i = 0; i < v.size(); ++i) t[static_cast<std::size_t>(i)] = v[i];
    return t;
  };
  auto v3 = [](const Vec3& v) { return Tensor<double>(Shape{3}, {v.x(), v.y(), v.z()}); };
  Rng rng(3);
  const auto psi = random_tensor(Shape{m.expression_count()}, rng, -0.3, 0.3);
  run.input("blendshape expression", psi, [&](Graph<double>& g, Var<double> x) {
    return weighted_sum(g, blendshape_graph(g, m, g.constant(vec(onset.shape)), x, g.constant(v3(onset.rotation)),
                                            g.constant(v3(onset.translation))), 1);
  });
  run.input("blendshape rotation", Tensor<double>(Shape{3}, {0.1, -0.2, 0.05}), [&](Graph<double>& g, Var<double> x) {
    return weighted_sum(g, blendshape_graph(g, m, g.constant(vec(onset.shape)), g.constant(psi), x,
                                            g.constant(v3(onset.translation))), 2);
  });
  run.input("face normals", vertices_tensor(fx.seq.meshes[1].vertices), [&](Graph<double>& g, Var<double> x) {
    return weighted_sum(g, face_normals_graph(x, m.faces), 3);
  });
}

void dynamic_checks(Runner& run, const Fixture& fx) {
  const auto volume = flow_volume<double>(fx.input.flows);
  const auto& cfg = fx.cfg.dem;
  run.params("motion encoder weights", subset(fx.params, {"dem.enc."}), [&](Graph<double>& g) {
    return weighted_sum(g, motion_encode(g, g.constant(volume), cfg), 4);
  });
  Rng rng(5);
  const auto residuals = random_tensor(Shape{fx.input.frames() - 1, cfg.n_expression}, rng, -0.2, 0.2);
  const auto psi1 = random_tensor(Shape{cfg.n_expression}, rng, -0.2, 0.2);
  const auto times = frame_times(fx.input.frames());
  run.params("ode latent and dynamics weights", subset(fx.params, {"dem.latent", "dem.ode"}), [&](Graph<double>& g) {
    return weighted_sum(g, ode_fuse(g, g.constant(psi1), g.constant(residuals), times, cfg), 6);
  });
  run.input(
      "ode onset expression", psi1,
      [&](Graph<double>& g, Var<double> x) {
        return weighted_sum(g, ode_fuse(g, x, g.constant(residuals), times, cfg), 7);
      },
      &fx.params);
}

void local_feature_checks(Runner& run, const Fixture& fx) {
  const auto& ctx = fx.ctx;
  const auto& geo = fx.geometry[1];
  const auto v = vertices_tensor(fx.seq.meshes[1].vertices);
  run.params("geometric features weights", subset(fx.params, {"lf.geo."}), [&](Graph<double>& g) {
    return weighted_sum(g, geo_features(g, g.constant(v), ctx.propagation), 8);
  });
  // A landmark vertex can sit within ~1e-3 of its lifted point, where |x* - v| bends sharply.
  run.input(
      "landmark features vertices", v,
      [&](Graph<double>& g, Var<double> x) {
        return weighted_sum(g, landmark_features(g, x, geo.lifted, geo.assignment), 9);
      },
      nullptr, 1e-6);
  const auto flow = flow_channels<double>(fx.input.flows[0]);
  run.params("motion features weights", subset(fx.params, {"lf.cnn."}), [&](Graph<double>& g) {
    auto pix = motion_pixel_features(g, g.constant(flow), fx.cfg.local);
    return weighted_sum(g, region_motion_features(pix.features, geo.map_patches, fx.model.vertex_region), 10);
  });
  Rng rng(11);
  const std::size_t n = fx.model.vertex_count();
  const auto a = random_tensor(Shape{n, fx.cfg.local.d_geo}, rng);
  const auto b = random_tensor(Shape{n, LocalFeatureConfig::kLandmarkDim}, rng);
  const auto c = random_tensor(Shape{n, fx.cfg.local.d_mot()}, rng);
  run.params("feature fusion weights", subset(fx.params, {"lf.fuse."}), [&](Graph<double>& g) {
    return weighted_sum(g, fuse_features(g, g.constant(a), g.constant(b), g.constant(c)), 12);
  });
}

void deform_checks(Runner& run, const Fixture& fx) {
  const std::size_t n = fx.model.vertex_count();
  const auto v = vertices_tensor(fx.seq.meshes[1].vertices);
  Rng rng(13);
  const auto local = random_tensor(Shape{n, fx.cfg.local.d_local}, rng);
  run.params("deformation network weights", subset(fx.params, {"dg."}), [&](Graph<double>& g) {
    return weighted_sum(g, gcn_deform(g, g.constant(v), g.constant(local), fx.ctx.propagation, fx.cfg.deform), 14);
  });
  run.input("refine base displacement", random_tensor(Shape{n, 3}, rng), [&](Graph<double>& g, Var<double> x) {
    return weighted_sum(g, refine(g, g.constant(v), x, fx.geometry[1].attention).vertices, 15);
  });
}

void loss_checks(Runner& run, const Fixture& fx) {
  const std::size_t n = fx.model.vertex_count();
  const auto& attn = fx.geometry[2].attention;
  Rng rng(17);
  const auto delta = random_tensor(Shape{n, 3}, rng, -0.05, 0.05);
  const auto v0 = vertices_tensor(fx.seq.meshes[0].vertices);
  const auto v1 = vertices_tensor(fx.seq.meshes[2].vertices);
  const LossWeights w;
  run.input("laplacian loss", delta, [&](Graph<double>&, Var<double> x) { return laplacian_loss(fx.ctx.laplacian, x); });
  run.input("normal loss final mesh", v1, [&](Graph<double>& g, Var<double> x) {
    return normal_loss(x, g.constant(v0), fx.model.faces);
  });
  run.input("normal loss init mesh", v0, [&](Graph<double>& g, Var<double> x) {
    return normal_loss(g.constant(v1), x, fx.model.faces);
  });
  // |row| has curvature 1 / |row|; a smaller step keeps the stencil's truncation error down on short rows.
  run.input(
      "flow guide loss", delta, [&](Graph<double>&, Var<double> x) { return flow_guide_loss(x, attn, w.flow); },
      nullptr, 1e-4);
  const auto targets = stacked_landmarks(fx.seq, 2);
  const auto psi = random_tensor(Shape{1, fx.model.expression_count()}, rng, -0.2, 0.2);
  run.input("surrogate vertices", v1, [&](Graph<double>& g, Var<double> x) {
    return reconstruction_surrogate(x, fx.ctx.landmarks, targets, fx.seq.camera, g.constant(psi),
                                    &fx.seq.meshes[1].vertices, w)
        .total;
  });
  run.input("surrogate expression", psi, [&](Graph<double>& g, Var<double> x) {
    return reconstruction_surrogate(g.constant(v1), fx.ctx.landmarks, targets, fx.seq.camera, x,
                                    &fx.seq.meshes[1].vertices, w)
        .total;
  });
  run.input("total loss", delta, [&](Graph<double>& g, Var<double> x) {
    auto fin = add(g.constant(v1), x);
    LossParts<double> parts;
    parts.rec = reconstruction_surrogate(fin, fx.ctx.landmarks, targets, fx.seq.camera, g.constant(psi),
                                         &fx.seq.meshes[2].vertices, w)
                    .total;
    parts.lap = laplacian_loss(fx.ctx.laplacian, x);
    parts.normal = normal_loss(fin, g.constant(v1), fx.model.faces);
    parts.flow_guide = flow_guide_loss(x, attn, w.flow);
    return total_loss(parts, w);
  });
}

void pipeline_checks(Runner& run, const Fixture& fx) {
  const std::size_t t = 2;
  const auto targets = stacked_landmarks(fx.seq, t);
  const auto flow = frame_flow(fx.input, t);
  Rng rng(19);
  const auto psi = random_tensor(Shape{1, fx.model.expression_count()}, rng, -0.2, 0.2);
  const LossWeights w;
  ParameterSet<double> frame_params = subset(fx.params, {"lf.", "dg."});
  const auto v = vertices_tensor(fx.seq.meshes[t].vertices + 0.01 * Vertices::Random(fx.model.vertex_count(), 3));
  auto frame = [&](Graph<double>& g, Var<double> x) {
    return run_frame(g, fx.ctx, fx.cfg, w, x, g.constant(psi), fx.geometry[t], fx.seq.camera, flow, targets,
                     &fx.seq.meshes[t].vertices)
        .total;
  };
  run.input("frame pipeline init vertices", v, frame, &frame_params);
  run.params("frame pipeline weights", frame_params, [&](Graph<double>& g) { return frame(g, g.constant(v)); });
  run.params("clip pipeline all weights", fx.params, [&](Graph<double>& g) {
    return run_sequence(g, fx.ctx, fx.cfg, fx.input, w, &fx.geometry).loss;
  });
}

}  // namespace

FaceModel tiny_face_model() {
  TemplateOptions o;
  o.rows = 4;
  o.cols = 5;
  o.n_shape = 3;
  o.n_expression = 4;
  o.n_fan = 6;
  o.n_mp = 4;
  o.seed = 5;
  return build_template_model(o);
}

ModelConfig tiny_model_config(std::size_t n_expression) {
  ModelConfig c;
  c.dem.n_expression = n_expression;
  c.dem.encoder_channels = {2, 3};
  c.dem.latent_dim = 4;
  c.dem.ode_hidden = 5;
  c.dem.steps_per_interval = 2;
  c.dem.pool_grid = 2;
  c.dem.flow_scale = 3.0;
  c.local.d_geo = 4;
  c.local.cnn_channels = {2, 3};
  c.local.d_local = 4;
  c.local.fuse_hidden = 5;
  c.local.flow_scale = 3.0;
  c.local.landmark_scale = 3.0;
  c.deform.layers = 2;
  c.deform.width = 5;
  c.deform.head_hidden = 5;
  c.deform.lambda_attn = 1.0;
  return c;
}

SyntheticSequence tiny_sequence(const FaceModel& model, std::uint64_t seed) {
  TrajectoryConfig tc;
  tc.frames = 4;
  tc.amplitude = 0.6;
  tc.seed = seed;
  return gen_sequence(model, tc, Camera::for_image(24, 24));
}

std::vector<std::string> gradcheck_modules() {
  return {"face_model", "dynamic_encoded", "local_features", "mesh_deform", "losses", "pipeline"};
}

std::vector<GradcheckResult> run_gradcheck_suite(const std::string& module, double tolerance) {
  const auto modules = gradcheck_modules();
  if (!module.empty() && std::find(modules.begin(), modules.end(), module) == modules.end())
    throw Error("unknown gradcheck module '" + module + "'");
  const Fixture fx;
  std::vector<GradcheckResult> out;
  for (const auto& m : modules) {
    if (!module.empty() && m != module) continue;
    Runner run(m, tolerance);
    if (m == "face_model") face_model_checks(run, fx);
    if (m == "dynamic_encoded") dynamic_checks(run, fx);
    if (m == "local_features") local_feature_checks(run, fx);
    if (m == "mesh_deform") deform_checks(run, fx);
    if (m == "losses") loss_checks(run, fx);
    if (m == "pipeline") pipeline_checks(run, fx);
    out.insert(out.end(), run.results.begin(), run.results.end());
  }
  return out;
}

}  // namespace microface
