#include "microface/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

#include "json.hpp"
#include "microface/nn.hpp"

namespace microface {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kSequenceFormat = "microface-sequence-1";
constexpr const char* kDatasetFormat = "microface-dataset-1";

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed JSON: " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out << j.dump(1) << '\n';
  if (!out) throw IoError(path.string() + ": write failed");
}

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd from_vec(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json landmarks_to_json(const std::vector<Landmarks2d>& frames) {
  json out = json::array();
  for (const auto& l : frames) {
    json f = json::array();
    for (Eigen::Index i = 0; i < l.rows(); ++i) f.push_back({l(i, 0), l(i, 1)});
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<Landmarks2d> landmarks_from_json(const json& j) {
  std::vector<Landmarks2d> out;
  for (const auto& f : j) {
    Landmarks2d l(static_cast<Eigen::Index>(f.size()), 2);
    for (std::size_t i = 0; i < f.size(); ++i) {
      l(static_cast<Eigen::Index>(i), 0) = f[i].at(0).get<double>();
      l(static_cast<Eigen::Index>(i), 1) = f[i].at(1).get<double>();
    }
    out.push_back(std::move(l));
  }
  return out;
}

double edge(const Vec2& a, const Vec2& b, const Vec2& p) {
  return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
}

}  // namespace

void TrajectoryConfig::validate() const {
  if (frames < 2) throw Error("trajectory needs at least 2 frames");
  if (!(amplitude >= 0) || !std::isfinite(amplitude)) throw Error("amplitude must be finite and non-negative");
  if (!(apex > 0 && apex < 1)) throw Error("apex must lie strictly inside (0, 1)");
  if (active_region && *active_region != Region::kLeftEye && *active_region != Region::kRightEye &&
      *active_region != Region::kMouth) {
    throw Error("active region must be left_eye, right_eye or mouth");
  }
  if (noise.flow_sigma < 0 || noise.landmark_sigma < 0 || noise.head_jitter < 0) {
    throw Error("noise levels must be non-negative");
  }
}

double apex_profile(double s, double apex) {
  const double pi = std::numbers::pi;
  if (s <= 0 || s >= 1) return 0.0;
  if (s <= apex) return 0.5 * (1.0 - std::cos(pi * s / apex));
  return 0.5 * (1.0 + std::cos(pi * (s - apex) / (1.0 - apex)));
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Landmarks2d project_landmarks(const Mesh& mesh, const std::vector<int>& indices, const Camera& cam) {
  Landmarks2d out(static_cast<Eigen::Index>(indices.size()), 2);
  for (std::size_t i = 0; i < indices.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = project(mesh.vertices.row(indices[i]).transpose(), cam).transpose();
  return out;
}

FlowField render_flow(const Mesh& mesh_t, const Mesh& mesh_t1, const Camera& cam) {
  std::vector<int> coverage;
  return render_flow(mesh_t, mesh_t1, cam, coverage);
}

FlowField render_flow(const Mesh& a, const Mesh& b, const Camera& cam, std::vector<int>& coverage) {
  if (a.vertices.rows() != b.vertices.rows() || a.faces != b.faces) {
    throw ShapeError("render_flow: meshes do not share topology");
  }
  cam.validate();
  const auto W = static_cast<std::size_t>(cam.width), H = static_cast<std::size_t>(cam.height);
  const auto proj = project_all(a.vertices, cam);
  project_all(b.vertices, cam);  // depth check on the second frame
  FlowField flow(Shape{H, W, 2}, 0.0f);
  std::vector<double> zbuf(H * W, std::numeric_limits<double>::infinity());
  coverage.assign(H * W, -1);
  std::size_t front = 0;
  for (std::size_t f = 0; f < a.faces.size(); ++f) {
    const auto& face = a.faces[f];
    const Vec3 v0 = a.vertices.row(face[0]).transpose(), v1 = a.vertices.row(face[1]).transpose(),
               v2 = a.vertices.row(face[2]).transpose();
    if ((v1 - v0).cross(v2 - v0).dot(v0 + v1 + v2) >= 0) continue;
    ++front;
    const Vec2 p0 = proj.row(face[0]).transpose(), p1 = proj.row(face[1]).transpose(), p2 = proj.row(face[2]).transpose();
    const double area = edge(p0, p1, p2);
    if (std::abs(area) < 1e-12) continue;
    const double umin = std::max(0.0, std::ceil(std::min({p0.x(), p1.x(), p2.x()})));
    const double umax = std::min(static_cast<double>(W - 1), std::floor(std::max({p0.x(), p1.x(), p2.x()})));
    const double vmin = std::max(0.0, std::ceil(std::min({p0.y(), p1.y(), p2.y()})));
    const double vmax = std::min(static_cast<double>(H - 1), std::floor(std::max({p0.y(), p1.y(), p2.y()})));
    for (double v = vmin; v <= vmax; v += 1.0)
      for (double u = umin; u <= umax; u += 1.0) {
        const Vec2 p(u, v);
        const double w0 = edge(p1, p2, p) / area, w1 = edge(p2, p0, p) / area, w2 = 1.0 - w0 - w1;
        if (w0 < -1e-9 || w1 < -1e-9 || w2 < -1e-9) continue;
        // Perspective-correct barycentrics on the surface.
        Vec3 bc(w0 / v0.z(), w1 / v1.z(), w2 / v2.z());
        bc /= bc.sum();
        const Vec3 x = bc[0] * v0 + bc[1] * v1 + bc[2] * v2;
        const std::size_t pix = static_cast<std::size_t>(v) * W + static_cast<std::size_t>(u);
        if (!(x.z() < zbuf[pix])) continue;
        zbuf[pix] = x.z();
        coverage[pix] = static_cast<int>(f);
        const Vec3 x1 = bc[0] * b.vertices.row(face[0]).transpose() + bc[1] * b.vertices.row(face[1]).transpose() +
                        bc[2] * b.vertices.row(face[2]).transpose();
        const Vec2 d = project(x1, cam) - project(x, cam);
        flow[pix * 2] = static_cast<float>(d.x());
        flow[pix * 2 + 1] = static_cast<float>(d.y());
      }
  }
  if (front == 0) throw Error("render_flow: every triangle is back-facing");
  return flow;
}

SyntheticSequence gen_sequence(const FaceModel& model, const TrajectoryConfig& cfg, const Camera& cam) {
  cfg.validate();
  cam.validate();
  Rng rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  auto onset = ParamState::zeros(model.shape_count(), model.expression_count());
  for (auto& b : onset.shape) b = 0.5 * normal(rng);
  Vec3 axis(normal(rng), normal(rng), normal(rng));
  onset.rotation = axis.normalized() * 0.1 * unif(rng);
  onset.translation = Vec3(0.05 * normal(rng), 0.05 * normal(rng), 4.0 + 0.1 * normal(rng));

  const std::array<Region, 3> choices{Region::kLeftEye, Region::kRightEye, Region::kMouth};
  const std::size_t pick = std::min<std::size_t>(2, static_cast<std::size_t>(unif(rng) * 3.0));
  const Region region = cfg.active_region.value_or(choices[pick]);
  auto cols = expression_columns_for(region, model.expression_count());
  if (cols.empty()) {
    cols.resize(model.expression_count());
    std::iota(cols.begin(), cols.end(), std::size_t{0});
  }
  Eigen::VectorXd dir = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.expression_count()));
  for (auto c : cols) dir[static_cast<Eigen::Index>(c)] = normal(rng);
  if (dir.norm() > 0) dir.normalize();
  const double amp = cfg.amplitude * (0.5 + 0.5 * unif(rng));

  SyntheticSequence seq;
  seq.camera = cam;
  seq.noise = cfg.noise;
  seq.active_region = region_name(region);
  Rng jitter_rng(derive_seed(cfg.seed, 1));
  for (std::size_t t = 0; t < cfg.frames; ++t) {
    ParamState p = onset;
    const double s = static_cast<double>(t) / static_cast<double>(cfg.frames - 1);
    p.expression = amp * apex_profile(s, cfg.apex) * dir;
    if (t > 0 && cfg.noise.head_jitter > 0) {
      const double j = cfg.noise.head_jitter;
      p.rotation += Vec3(j * normal(jitter_rng), j * normal(jitter_rng), j * normal(jitter_rng));
      p.translation += Vec3(j * normal(jitter_rng), j * normal(jitter_rng), 0.0);
    }
    seq.meshes.push_back(blendshape_forward(model, p));
    seq.params.push_back(std::move(p));
  }

  Rng noise_rng(derive_seed(cfg.seed, 2));
  auto offsets = [&](std::size_t n) {
    Landmarks2d o(static_cast<Eigen::Index>(n), 2);
    for (Eigen::Index i = 0; i < o.rows(); ++i)
      for (int k = 0; k < 2; ++k) o(i, k) = cfg.noise.landmark_sigma * normal(noise_rng);
    return o;
  };
  const Landmarks2d fan_off = offsets(model.fan_landmarks.size());
  const Landmarks2d mp_off = offsets(model.mp_landmarks.size());
  for (const auto& m : seq.meshes) {
    seq.fan_landmarks.push_back(project_landmarks(m, model.fan_landmarks, cam) + fan_off);
    seq.mp_landmarks.push_back(project_landmarks(m, model.mp_landmarks, cam) + mp_off);
  }
  for (std::size_t t = 0; t + 1 < cfg.frames; ++t) {
    FlowField f = render_flow(seq.meshes[t], seq.meshes[t + 1], cam);
    if (cfg.noise.flow_sigma > 0) {
      for (std::size_t i = 0; i < f.size(); i += 2) {
        if (f[i] == 0.0f && f[i + 1] == 0.0f) continue;
        f[i] += static_cast<float>(cfg.noise.flow_sigma * normal(noise_rng));
        f[i + 1] += static_cast<float>(cfg.noise.flow_sigma * normal(noise_rng));
      }
    }
    seq.flows.push_back(std::move(f));
  }
  return seq;
}

void write_sequence(const SyntheticSequence& seq, const std::string& dir) {
  const fs::path root(dir);
  fs::create_directories(root);
  const auto& c = seq.camera;
  write_json_file(root / "camera.json", json{{"format", kSequenceFormat},
                                             {"fx", c.fx},
                                             {"fy", c.fy},
                                             {"cx", c.cx},
                                             {"cy", c.cy},
                                             {"width", c.width},
                                             {"height", c.height}});
  json frames = json::array();
  for (const auto& p : seq.params) {
    frames.push_back({{"shape", to_vec(p.shape)},
                      {"expression", to_vec(p.expression)},
                      {"rotation", to_vec(p.rotation)},
                      {"translation", to_vec(p.translation)}});
  }
  write_json_file(root / "params.json", json{{"frames", seq.frames()},
                                             {"active_region", seq.active_region},
                                             {"noise",
                                              {{"flow_sigma", seq.noise.flow_sigma},
                                               {"landmark_sigma", seq.noise.landmark_sigma},
                                               {"head_jitter", seq.noise.head_jitter}}},
                                             {"params", frames}});
  write_json_file(root / "landmarks.json",
                  json{{"fan", landmarks_to_json(seq.fan_landmarks)}, {"mp", landmarks_to_json(seq.mp_landmarks)}});
  for (std::size_t t = 0; t < seq.meshes.size(); ++t)
    write_obj((root / ("mesh_" + std::to_string(t + 1) + ".obj")).string(), seq.meshes[t]);
  for (std::size_t t = 0; t < seq.flows.size(); ++t)
    save_mxt((root / ("flow_" + std::to_string(t + 1) + ".mxt")).string(), seq.flows[t]);
}

SyntheticSequence read_sequence(const std::string& dir, bool require_meshes) {
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw IoError(dir + ": sequence directory does not exist");
  SyntheticSequence seq;
  const auto cam_path = root / "camera.json";
  if (!fs::exists(cam_path)) throw IoError(cam_path.string() + ": missing");
  try {
    const json cj = read_json_file(cam_path);
    if (cj.value("format", "") != kSequenceFormat) throw IoError(cam_path.string() + ": unknown format tag");
    seq.camera.fx = cj.at("fx").get<double>();
    seq.camera.fy = cj.at("fy").get<double>();
    seq.camera.cx = cj.at("cx").get<double>();
    seq.camera.cy = cj.at("cy").get<double>();
    seq.camera.width = cj.at("width").get<int>();
    seq.camera.height = cj.at("height").get<int>();
    seq.camera.validate();
  } catch (const json::exception& e) {
    throw IoError(cam_path.string() + ": " + e.what());
  }
  const auto params_path = root / "params.json";
  try {
    const json pj = read_json_file(params_path);
    seq.active_region = pj.value("active_region", "");
    if (pj.contains("noise")) {
      const auto& n = pj.at("noise");
      seq.noise.flow_sigma = n.at("flow_sigma").get<double>();
      seq.noise.landmark_sigma = n.at("landmark_sigma").get<double>();
      seq.noise.head_jitter = n.at("head_jitter").get<double>();
    }
    for (const auto& f : pj.at("params")) {
      ParamState p;
      p.shape = from_vec(f.at("shape").get<std::vector<double>>());
      p.expression = from_vec(f.at("expression").get<std::vector<double>>());
      const auto r = f.at("rotation").get<std::vector<double>>();
      const auto t = f.at("translation").get<std::vector<double>>();
      if (r.size() != 3 || t.size() != 3) throw IoError(params_path.string() + ": pose must have 3+3 entries");
      p.rotation = Vec3(r[0], r[1], r[2]);
      p.translation = Vec3(t[0], t[1], t[2]);
      seq.params.push_back(std::move(p));
    }
    if (pj.at("frames").get<std::size_t>() != seq.params.size())
      throw IoError(params_path.string() + ": frame count does not match the params array");
  } catch (const json::exception& e) {
    throw IoError(params_path.string() + ": " + e.what());
  }
  const std::size_t T = seq.params.size();
  if (T < 2) throw IoError(params_path.string() + ": need at least 2 frames");
  const auto lm_path = root / "landmarks.json";
  try {
    const json lj = read_json_file(lm_path);
    seq.fan_landmarks = landmarks_from_json(lj.at("fan"));
    seq.mp_landmarks = landmarks_from_json(lj.at("mp"));
  } catch (const json::exception& e) {
    throw IoError(lm_path.string() + ": " + e.what());
  }
  if (seq.fan_landmarks.size() != T || seq.mp_landmarks.size() != T)
    throw IoError(lm_path.string() + ": expected " + std::to_string(T) + " frames of landmarks");
  for (std::size_t t = 1; t <= T; ++t) {
    const auto p = root / ("mesh_" + std::to_string(t) + ".obj");
    if (!fs::exists(p)) {
      if (!require_meshes) {
        seq.meshes.clear();
        break;
      }
      throw IoError(p.string() + ": missing");
    }
    seq.meshes.push_back(read_obj(p.string()));
  }
  for (std::size_t t = 1; t < T; ++t) {
    const auto p = root / ("flow_" + std::to_string(t) + ".mxt");
    if (!fs::exists(p)) throw IoError(p.string() + ": missing");
    FlowField f = load_mxt(p.string());
    const Shape want{static_cast<std::size_t>(seq.camera.height), static_cast<std::size_t>(seq.camera.width), 2};
    if (f.shape() != want)
      throw IoError(p.string() + ": extent mismatch, expected " + shape_string(want) + ", got " + shape_string(f.shape()));
    seq.flows.push_back(std::move(f));
  }
  return seq;
}

const std::vector<std::string>& DatasetManifest::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "test") return test;
  throw Error("unknown split '" + name + "' (expected train or test)");
}

DatasetManifest generate_dataset(const std::string& dir, const DatasetOptions& o) {
  if (o.num == 0) throw Error("dataset needs at least one sequence");
  if (o.height <= 0 || o.width <= 0) throw Error("image extents must be positive");
  if (!(o.train_fraction > 0 && o.train_fraction < 1)) throw Error("train fraction must lie in (0, 1)");
  const fs::path root(dir);
  fs::create_directories(root);
  save_model(build_template_model(o.model), (root / "model").string());
  // Generate from the stored (f32-rounded) model so sequences agree with what loaders see.
  const FaceModel model = load_model((root / "model").string());
  const Camera cam = Camera::for_image(o.width, o.height);

  DatasetManifest m;
  m.num = o.num;
  m.seed = o.seed;
  m.height = o.height;
  m.width = o.width;
  m.amplitude = o.amplitude;
  m.frames = o.frames;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < o.num; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "seq_%04zu", i);
    names.emplace_back(name);
    TrajectoryConfig cfg;
    cfg.frames = o.frames;
    cfg.amplitude = o.amplitude;
    cfg.noise = o.noise;
    cfg.seed = derive_seed(o.seed, i);
    Rng pick(derive_seed(cfg.seed, 7));
    cfg.apex = std::uniform_real_distribution<double>(0.3, 0.7)(pick);
    write_sequence(gen_sequence(model, cfg, cam), (root / name).string());
  }
  std::vector<std::size_t> order(o.num);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split_rng(derive_seed(o.seed, 1u << 30));
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_train = static_cast<std::size_t>(std::llround(o.train_fraction * static_cast<double>(o.num)));
  std::vector<std::size_t> tr(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> te(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(tr.begin(), tr.end());
  std::sort(te.begin(), te.end());
  for (auto i : tr) m.train.push_back(names[i]);
  for (auto i : te) m.test.push_back(names[i]);
  write_json_file(root / "manifest.json", json{{"format", kDatasetFormat},
                                               {"num", m.num},
                                               {"seed", m.seed},
                                               {"height", m.height},
                                               {"width", m.width},
                                               {"amplitude", m.amplitude},
                                               {"frames", m.frames},
                                               {"noise",
                                                {{"flow_sigma", o.noise.flow_sigma},
                                                 {"landmark_sigma", o.noise.landmark_sigma},
                                                 {"head_jitter", o.noise.head_jitter}}},
                                               {"splits", {{"train", m.train}, {"test", m.test}}}});
  return m;
}

DatasetManifest read_manifest(const std::string& dir) {
  const auto path = fs::path(dir) / "manifest.json";
  if (!fs::exists(path)) throw IoError(path.string() + ": missing (is this a dataset directory?)");
  const json j = read_json_file(path);
  DatasetManifest m;
  try {
    if (j.value("format", "") != kDatasetFormat) throw IoError(path.string() + ": unknown format tag");
    m.num = j.at("num").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.height = j.at("height").get<int>();
    m.width = j.at("width").get<int>();
    m.amplitude = j.at("amplitude").get<double>();
    m.frames = j.at("frames").get<std::size_t>();
    m.train = j.at("splits").at("train").get<std::vector<std::string>>();
    m.test = j.at("splits").at("test").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace microface
