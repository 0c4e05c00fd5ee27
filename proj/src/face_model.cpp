#include "microface/face_model.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "json.hpp"
#include "microface/mesh_ops.hpp"
#include "microface/nn.hpp"
#include "microface/ops.hpp"

namespace microface {

namespace {

constexpr std::array<const char*, kRegionCount> kRegionNames{"left_eye",   "right_eye",   "nose",     "mouth",
                                                             "left_cheek", "right_cheek", "forehead", "chin"};

Region classify(double x, double y) {
  if (y < -0.5) return Region::kForehead;
  if (y < -0.1) {
    if (std::abs(x) <= 0.15) return Region::kNose;
    if (x < 0 && x >= -0.8) return Region::kLeftEye;
    if (x > 0 && x <= 0.8) return Region::kRightEye;
    return x < 0 ? Region::kLeftCheek : Region::kRightCheek;
  }
  if (y < 0.3) {
    if (std::abs(x) <= 0.3) return Region::kNose;
    return x < 0 ? Region::kLeftCheek : Region::kRightCheek;
  }
  if (y < 0.8) {
    if (std::abs(x) < 0.5) return Region::kMouth;
    return x < 0 ? Region::kLeftCheek : Region::kRightCheek;
  }
  return Region::kChin;
}

double gauss2(double dx, double dy, double sigma) { return std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)); }

// Facial surface height; negative z faces the camera.
double surface_depth(double x, double y) {
  double z = -0.45 * (1.0 - 0.6 * x * x - 0.35 * (y / 1.2) * (y / 1.2));
  z -= 0.22 * std::exp(-(x * x / (2 * 0.12 * 0.12) + (y - 0.05) * (y - 0.05) / (2 * 0.25 * 0.25)));
  z += 0.05 * (gauss2(x + 0.42, y + 0.3, 0.12) + gauss2(x - 0.42, y + 0.3, 0.12));
  z -= 0.04 * gauss2(x, y - 0.55, 0.15);
  return z;
}

void orthonormalize_columns(Eigen::MatrixXd& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (int pass = 0; pass < 2; ++pass)
      for (Eigen::Index k = 0; k < j; ++k) m.col(j) -= m.col(k).dot(m.col(j)) * m.col(k);
    m.col(j).normalize();
  }
}

std::vector<Vec2> fan_layout() {
  std::vector<Vec2> p;
  const double pi = std::numbers::pi;
  for (int i = 0; i <= 16; ++i) p.emplace_back(-0.9 * std::cos(pi * i / 16.0), 0.1 + 1.0 * std::sin(pi * i / 16.0));
  for (int side : {-1, 1})
    for (int i = 0; i < 5; ++i) {
      const double s = i / 4.0;
      const double u = side < 0 ? -0.75 + 0.6 * s : 0.15 + 0.6 * s;
      p.emplace_back(u, -0.58 - 0.08 * std::sin(pi * s));
    }
  for (int i = 0; i < 4; ++i) p.emplace_back(0.0, -0.35 + 0.15 * i);
  for (int i = 0; i < 5; ++i) p.emplace_back(-0.2 + 0.1 * i, 0.22);
  for (double cx : {-0.42, 0.42})
    for (int i = 0; i < 6; ++i) {
      const double a = pi + 2 * pi * i / 6.0;
      p.emplace_back(cx + 0.16 * std::cos(a), -0.3 + 0.07 * std::sin(a));
    }
  for (int i = 0; i < 12; ++i) {
    const double a = pi + 2 * pi * i / 12.0;
    p.emplace_back(0.35 * std::cos(a), 0.55 + 0.15 * std::sin(a));
  }
  for (int i = 0; i < 8; ++i) {
    const double a = pi + 2 * pi * i / 8.0;
    p.emplace_back(0.22 * std::cos(a), 0.55 + 0.06 * std::sin(a));
  }
  return p;
}

std::vector<Vec2> mp_layout() {
  std::vector<Vec2> p;
  const double pi = std::numbers::pi;
  for (int i = 0; i < 12; ++i) {
    const double a = 2 * pi * i / 12.0;
    p.emplace_back(0.38 * std::cos(a), 0.55 + 0.17 * std::sin(a));
  }
  for (int i = 0; i < 8; ++i) {
    const double a = 2 * pi * i / 8.0;
    p.emplace_back(0.25 * std::cos(a), 0.55 + 0.08 * std::sin(a));
  }
  for (double cx : {-0.42, 0.42}) {
    for (int i = 0; i < 6; ++i) {
      const double a = 2 * pi * i / 6.0;
      p.emplace_back(cx + 0.2 * std::cos(a), -0.3 + 0.1 * std::sin(a));
    }
    for (int i = 0; i < 6; ++i) {
      const double a = 2 * pi * i / 6.0 + pi / 6.0;
      p.emplace_back(cx + 0.12 * std::cos(a), -0.3 + 0.05 * std::sin(a));
    }
  }
  p.emplace_back(0.0, 0.05);
  p.emplace_back(-0.1, 0.15);
  p.emplace_back(0.1, 0.15);
  p.emplace_back(0.0, 0.22);
  return p;
}

std::vector<int> snap_to_vertices(const std::vector<Vec2>& layout, const Vertices& v) {
  std::vector<int> out;
  std::vector<bool> used(static_cast<std::size_t>(v.rows()), false);
  for (const auto& q : layout) {
    int best = -1;
    double best_d = 0;
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      if (used[static_cast<std::size_t>(i)]) continue;
      const double d = (Vec2(v(i, 0), v(i, 1)) - q).squaredNorm();
      if (best < 0 || d < best_d) {
        best = static_cast<int>(i);
        best_d = d;
      }
    }
    used[static_cast<std::size_t>(best)] = true;
    out.push_back(best);
  }
  return out;
}

Vec2 region_center(Region r) {
  switch (r) {
    case Region::kLeftEye:
      return {-0.42, -0.3};
    case Region::kRightEye:
      return {0.42, -0.3};
    default:
      return {0.0, 0.55};
  }
}

}  // namespace

const char* region_name(Region r) { return kRegionNames.at(static_cast<std::size_t>(r)); }

Region region_from_name(const std::string& name) {
  for (int i = 0; i < kRegionCount; ++i)
    if (name == kRegionNames[static_cast<std::size_t>(i)]) return static_cast<Region>(i);
  throw Error("unknown region name '" + name + "'");
}

ParamState ParamState::zeros(std::size_t n_shape, std::size_t n_expression) {
  ParamState p;
  p.shape = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_shape));
  p.expression = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_expression));
  return p;
}

void ParamState::validate() const {
  if (!shape.allFinite() || !expression.allFinite() || !rotation.allFinite() || !translation.allFinite()) {
    throw Error("parameter state has non-finite entries");
  }
  if (rotation.norm() >= std::numbers::pi) throw Error("axis-angle magnitude must be below pi");
}

std::vector<int> FaceModel::all_landmarks() const {
  std::vector<int> out = fan_landmarks;
  out.insert(out.end(), mp_landmarks.begin(), mp_landmarks.end());
  return out;
}

std::vector<std::vector<std::size_t>> FaceModel::region_vertices() const {
  std::vector<std::vector<std::size_t>> out(kRegionCount);
  for (std::size_t i = 0; i < vertex_region.size(); ++i) out[static_cast<std::size_t>(vertex_region[i])].push_back(i);
  return out;
}

void FaceModel::validate() const {
  const std::size_t n = vertex_count();
  if (n == 0) throw Error("face model has no vertices");
  for (std::size_t f = 0; f < faces.size(); ++f)
    for (int idx : faces[f])
      if (idx < 0 || static_cast<std::size_t>(idx) >= n) throw Error("face " + std::to_string(f) + " index out of range");
  if (!is_edge_connected(faces, n)) throw Error("face model mesh is not edge-connected");
  if (vertex_region.size() != n) throw Error("region map does not cover every vertex");
  for (auto r : vertex_region)
    if (static_cast<int>(r) < 0 || static_cast<int>(r) >= kRegionCount) throw Error("invalid region label");
  for (int idx : all_landmarks())
    if (idx < 0 || static_cast<std::size_t>(idx) >= n) throw Error("landmark index out of range");
  if (fan_landmarks.empty()) throw Error("FAN landmark set is empty");
  auto check_basis = [&](const Eigen::MatrixXd& b, const char* name) {
    if (static_cast<std::size_t>(b.rows()) != 3 * n) throw Error(std::string(name) + " basis has wrong row count");
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      if (std::abs(b.col(j).norm() - 1.0) > 1e-5) throw Error(std::string(name) + " basis column is not unit norm");
  };
  check_basis(shape_basis, "shape");
  check_basis(expression_basis, "expression");
  const auto mesh = template_mesh();
  for (std::size_t f = 0; f < faces.size(); ++f)
    if (face_area(mesh, f) <= 1e-12) throw Error("template face " + std::to_string(f) + " is degenerate");
}

FaceModel build_template_model(const TemplateOptions& o) {
  if (o.rows < 2 || o.cols < 2) throw Error("template grid needs at least 2x2 vertices");
  FaceModel m;
  const std::size_t n = o.rows * o.cols;
  m.template_vertices.resize(static_cast<Eigen::Index>(n), 3);
  for (std::size_t r = 0; r < o.rows; ++r)
    for (std::size_t c = 0; c < o.cols; ++c) {
      const double u = -1.0 + 2.0 * static_cast<double>(c) / static_cast<double>(o.cols - 1);
      const double y = -1.2 + 2.4 * static_cast<double>(r) / static_cast<double>(o.rows - 1);
      const double taper = 1.0 - 0.25 * std::pow(std::max(0.0, y / 1.2), 2.0);
      const double x = u * taper;
      const auto i = static_cast<Eigen::Index>(r * o.cols + c);
      m.template_vertices.row(i) << x, y, surface_depth(x, y);
    }
  for (std::size_t r = 0; r + 1 < o.rows; ++r)
    for (std::size_t c = 0; c + 1 < o.cols; ++c) {
      const int v00 = static_cast<int>(r * o.cols + c), v01 = v00 + 1;
      const int v10 = static_cast<int>((r + 1) * o.cols + c), v11 = v10 + 1;
      m.faces.push_back({v00, v11, v01});
      m.faces.push_back({v00, v10, v11});
    }
  m.vertex_region.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    m.vertex_region[i] = classify(m.template_vertices(row, 0), m.template_vertices(row, 1));
  }

  Rng rng(o.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  m.shape_basis = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(3 * n), static_cast<Eigen::Index>(o.n_shape));
  for (std::size_t j = 0; j < o.n_shape; ++j) {
    for (int bump = 0; bump < 3; ++bump) {
      const Vec2 center(-1.0 + 2.0 * unif(rng), -1.2 + 2.4 * unif(rng));
      const double sigma = 0.35 + 0.35 * unif(rng);
      const Vec3 dir(normal(rng), normal(rng), normal(rng));
      for (std::size_t i = 0; i < n; ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        const double w = gauss2(m.template_vertices(row, 0) - center.x(), m.template_vertices(row, 1) - center.y(), sigma);
        for (int k = 0; k < 3; ++k) m.shape_basis(3 * row + k, static_cast<Eigen::Index>(j)) += w * dir[k];
      }
    }
  }
  orthonormalize_columns(m.shape_basis);

  m.expression_basis =
      Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(3 * n), static_cast<Eigen::Index>(o.n_expression));
  for (std::size_t j = 0; j < o.n_expression; ++j) {
    Region group = Region::kMouth;
    for (Region r : {Region::kLeftEye, Region::kRightEye}) {
      const auto cols = expression_columns_for(r, o.n_expression);
      if (std::find(cols.begin(), cols.end(), j) != cols.end()) group = r;
    }
    const Vec2 c = region_center(group);
    const double sigma = group == Region::kMouth ? 0.2 : 0.12;
    const Vec3 a(0.3 * normal(rng), normal(rng), 0.6 * normal(rng));
    Eigen::Matrix<double, 3, 2> b;
    for (int k = 0; k < 6; ++k) b(k / 2, k % 2) = 2.5 * normal(rng);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      const Vec2 d(m.template_vertices(row, 0) - c.x(), m.template_vertices(row, 1) - c.y());
      const double w = gauss2(d.x(), d.y(), sigma);
      const Vec3 disp = w * (a + b * d);
      for (int k = 0; k < 3; ++k) m.expression_basis(3 * row + k, static_cast<Eigen::Index>(j)) = disp[k];
    }
  }
  orthonormalize_columns(m.expression_basis);

  const auto fan_all = fan_layout();
  if (o.n_fan == 0 || o.n_fan > fan_all.size())
    throw Error("FAN landmark count must be in 1.." + std::to_string(fan_all.size()));
  std::vector<Vec2> fan;
  for (std::size_t i = 0; i < o.n_fan; ++i) fan.push_back(fan_all[i * fan_all.size() / o.n_fan]);
  if (o.n_fan + o.n_mp > n) throw Error("template grid has fewer vertices than landmarks");
  m.fan_landmarks = snap_to_vertices(fan, m.template_vertices);
  auto mp = mp_layout();
  if (o.n_mp > mp.size()) throw Error("at most " + std::to_string(mp.size()) + " MP landmarks are supported");
  mp.resize(o.n_mp);
  m.mp_landmarks = snap_to_vertices(mp, m.template_vertices);
  m.validate();
  return m;
}

std::vector<std::size_t> expression_columns_for(Region r, std::size_t n_expression) {
  std::vector<std::size_t> out;
  const std::size_t eye_cols = std::min<std::size_t>(4, n_expression / 2);
  for (std::size_t j = 0; j < n_expression; ++j) {
    Region g = Region::kMouth;
    if (j < eye_cols) g = (j % 2 == 0) ? Region::kLeftEye : Region::kRightEye;
    if (g == r) out.push_back(j);
  }
  return out;
}

Eigen::Matrix3d axis_angle_to_matrix(const Vec3& w) {
  const double th = w.norm();
  if (th < 1e-12) return Eigen::Matrix3d::Identity();
  return Eigen::AngleAxisd(th, w / th).toRotationMatrix();
}

Mesh blendshape_forward(const FaceModel& model, const ParamState& p) {
  if (static_cast<std::size_t>(p.shape.size()) != model.shape_count() ||
      static_cast<std::size_t>(p.expression.size()) != model.expression_count()) {
    throw ShapeError("blendshape_forward: expected " + std::to_string(model.shape_count()) + " shape and " +
                     std::to_string(model.expression_count()) + " expression coefficients, got " +
                     std::to_string(p.shape.size()) + " and " + std::to_string(p.expression.size()));
  }
  const Eigen::VectorXd offsets = model.shape_basis * p.shape + model.expression_basis * p.expression;
  const Eigen::Matrix3d R = axis_angle_to_matrix(p.rotation);
  Mesh out{Vertices(model.template_vertices.rows(), 3), model.faces};
  for (Eigen::Index i = 0; i < model.template_vertices.rows(); ++i) {
    const Vec3 local = model.template_vertices.row(i).transpose() + offsets.segment<3>(3 * i);
    out.vertices.row(i) = (R * local + p.translation).transpose();
  }
  return out;
}

template <typename Real>
Var<Real> blendshape_graph(Graph<Real>& g, const FaceModel& model, Var<Real> shape, Var<Real> expression,
                           Var<Real> rotation, Var<Real> translation) {
  const std::size_t n = model.vertex_count();
  if (shape.value().size() != model.shape_count() || expression.value().size() != model.expression_count()) {
    throw ShapeError("blendshape_graph: coefficient count mismatch");
  }
  auto as_tensor = [](const Eigen::MatrixXd& m) {
    Tensor<Real> t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = static_cast<Real>(m(r, c));
    return t;
  };
  Tensor<Real> tmpl(Shape{n, 3});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < 3; ++k) tmpl.at(i, k) = static_cast<Real>(model.template_vertices(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)));
  auto offsets = add(matmul(g.constant(as_tensor(model.shape_basis)), reshape(shape, Shape{model.shape_count(), 1})),
                     matmul(g.constant(as_tensor(model.expression_basis)),
                            reshape(expression, Shape{model.expression_count(), 1})));
  auto local = add(g.constant(std::move(tmpl)), reshape(offsets, Shape{n, 3}));
  auto rotated = matmul(local, transpose(rodrigues(rotation)));
  return add_bias(rotated, reshape(translation, Shape{3}));
}

template Var<float> blendshape_graph(Graph<float>&, const FaceModel&, Var<float>, Var<float>, Var<float>, Var<float>);
template Var<double> blendshape_graph(Graph<double>&, const FaceModel&, Var<double>, Var<double>, Var<double>,
                                      Var<double>);

void write_obj(const std::string& path, const Mesh& mesh) {
  std::ofstream out(path);
  if (!out) throw IoError(path + ": cannot open for writing");
  char buf[128];
  for (Eigen::Index i = 0; i < mesh.vertices.rows(); ++i) {
    std::snprintf(buf, sizeof buf, "v %.6f %.6f %.6f\n", static_cast<float>(mesh.vertices(i, 0)),
                  static_cast<float>(mesh.vertices(i, 1)), static_cast<float>(mesh.vertices(i, 2)));
    out << buf;
  }
  for (const auto& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  if (!out) throw IoError(path + ": write failed");
}

Mesh read_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open");
  std::vector<Vec3> verts;
  Faces faces;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      Vec3 v;
      if (!(ls >> v.x() >> v.y() >> v.z())) throw IoError(path + ":" + std::to_string(lineno) + ": malformed vertex");
      verts.push_back(v);
    } else if (tag == "f") {
      Face f{};
      for (auto& idx : f) {
        std::string tok;
        if (!(ls >> tok)) throw IoError(path + ":" + std::to_string(lineno) + ": malformed face");
        idx = std::stoi(tok.substr(0, tok.find('/'))) - 1;
      }
      faces.push_back(f);
    }
  }
  Mesh m{Vertices(static_cast<Eigen::Index>(verts.size()), 3), std::move(faces)};
  for (std::size_t i = 0; i < verts.size(); ++i) m.vertices.row(static_cast<Eigen::Index>(i)) = verts[i].transpose();
  for (const auto& f : m.faces)
    for (int idx : f)
      if (idx < 0 || static_cast<std::size_t>(idx) >= verts.size()) throw IoError(path + ": face index out of range");
  return m;
}

void save_model(const FaceModel& model, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_obj((fs::path(dir) / "topology.obj").string(), model.template_mesh());
  {
    std::ofstream out(fs::path(dir) / "bases.mxt", std::ios::binary);
    if (!out) throw IoError(dir + "/bases.mxt: cannot open for writing");
    for (const auto* b : {&model.shape_basis, &model.expression_basis}) {
      Tensor<float> t(Shape{static_cast<std::size_t>(b->rows()), static_cast<std::size_t>(b->cols())});
      for (Eigen::Index r = 0; r < b->rows(); ++r)
        for (Eigen::Index c = 0; c < b->cols(); ++c) t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = static_cast<float>((*b)(r, c));
      write_mxt(out, t);
    }
  }
  nlohmann::json lm{{"fan", model.fan_landmarks}, {"mp", model.mp_landmarks}};
  std::ofstream(fs::path(dir) / "landmarks.json") << lm.dump(1) << '\n';
  nlohmann::json regions;
  regions["names"] = std::vector<std::string>(kRegionNames.begin(), kRegionNames.end());
  std::vector<int> labels;
  for (auto r : model.vertex_region) labels.push_back(static_cast<int>(r));
  regions["vertex_region"] = labels;
  std::ofstream(fs::path(dir) / "regions.json") << regions.dump() << '\n';
}

FaceModel load_model(const std::string& dir) {
  namespace fs = std::filesystem;
  auto read_json = [&](const char* name) {
    const auto path = (fs::path(dir) / name).string();
    std::ifstream in(path);
    if (!in) throw IoError(path + ": cannot open");
    try {
      return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ": " + e.what());
    }
  };
  FaceModel m;
  const Mesh topo = read_obj((fs::path(dir) / "topology.obj").string());
  m.template_vertices = topo.vertices;
  m.faces = topo.faces;
  const auto bases = load_mxt_all((fs::path(dir) / "bases.mxt").string());
  if (bases.size() != 2) throw IoError(dir + "/bases.mxt: expected shape and expression tensors");
  auto to_matrix = [&](const Tensor<float>& t) {
    if (t.rank() != 2 || t.dim(0) != 3 * m.vertex_count()) throw IoError(dir + "/bases.mxt: extent mismatch");
    Eigen::MatrixXd b(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
    for (std::size_t r = 0; r < t.dim(0); ++r)
      for (std::size_t c = 0; c < t.dim(1); ++c) b(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = t.at(r, c);
    return b;
  };
  m.shape_basis = to_matrix(bases[0]);
  m.expression_basis = to_matrix(bases[1]);
  try {
    const auto lm = read_json("landmarks.json");
    m.fan_landmarks = lm.at("fan").get<std::vector<int>>();
    m.mp_landmarks = lm.at("mp").get<std::vector<int>>();
    const auto rg = read_json("regions.json");
    const auto names = rg.at("names").get<std::vector<std::string>>();
    for (int label : rg.at("vertex_region").get<std::vector<int>>()) {
      if (label < 0 || static_cast<std::size_t>(label) >= names.size()) throw IoError(dir + "/regions.json: bad label");
      m.vertex_region.push_back(region_from_name(names[static_cast<std::size_t>(label)]));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(dir + ": malformed model metadata: " + e.what());
  }
  m.validate();
  return m;
}

}  // namespace microface
