#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "microface/autodiff.hpp"

namespace microface {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vertices = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Face = std::array<int, 3>;
using Faces = std::vector<Face>;

/// The eight facial regions. Left/right follow image columns (x < 0 is left).
enum class Region : int { kLeftEye = 0, kRightEye, kNose, kMouth, kLeftCheek, kRightCheek, kForehead, kChin };
inline constexpr int kRegionCount = 8;

const char* region_name(Region r);
Region region_from_name(const std::string& name);

struct Mesh {
  Vertices vertices;
  Faces faces;

  std::size_t vertex_count() const { return static_cast<std::size_t>(vertices.rows()); }
};

/// Per-frame model coefficients: shape, expression, and a global rigid pose.
struct ParamState {
  Eigen::VectorXd shape;
  Eigen::VectorXd expression;
  Vec3 rotation = Vec3::Zero();  // axis-angle, |rotation| < pi
  Vec3 translation = Vec3::Zero();

  static ParamState zeros(std::size_t n_shape, std::size_t n_expression);
  void validate() const;
};

/// Linear blendshape face model with its landmark embedding and region partition.
/// Immutable after construction; safe to share between threads.
struct FaceModel {
  Vertices template_vertices;
  Faces faces;
  Eigen::MatrixXd shape_basis;       // (3 n_v) x n_shape, rows ordered x0 y0 z0 x1 ...
  Eigen::MatrixXd expression_basis;  // (3 n_v) x n_expression
  std::vector<int> fan_landmarks;    // 68 vertex indices for the shipped template
  std::vector<int> mp_landmarks;
  std::vector<Region> vertex_region;

  std::size_t vertex_count() const { return static_cast<std::size_t>(template_vertices.rows()); }
  std::size_t shape_count() const { return static_cast<std::size_t>(shape_basis.cols()); }
  std::size_t expression_count() const { return static_cast<std::size_t>(expression_basis.cols()); }
  /// FAN landmarks followed by MP landmarks.
  std::vector<int> all_landmarks() const;
  /// Vertex indices of each region, in label order.
  std::vector<std::vector<std::size_t>> region_vertices() const;
  Mesh template_mesh() const { return Mesh{template_vertices, faces}; }

  /// Checks every structural invariant; throws Error describing the first violation.
  void validate() const;
};

struct TemplateOptions {
  std::size_t rows = 27;
  std::size_t cols = 24;
  std::size_t n_shape = 16;
  std::size_t n_expression = 8;
  std::size_t n_mp = 48;
  std::size_t n_fan = 68;  // fewer picks an evenly spaced subset of the 68-point layout
  std::uint64_t seed = 2024;
};

/// Synthetic face-like open grid mesh with smooth orthonormal bases. Expression columns are
/// windowed around the eyes (0-3: left, right, left, right) and the mouth (4-7).
FaceModel build_template_model(const TemplateOptions& options = {});

/// Expression basis columns concentrated on the given region group.
std::vector<std::size_t> expression_columns_for(Region r, std::size_t n_expression);

Eigen::Matrix3d axis_angle_to_matrix(const Vec3& axis_angle);

/// V = R(theta) (template + B_shape beta + B_expr psi) + t, per vertex.
Mesh blendshape_forward(const FaceModel& model, const ParamState& p);

/// Differentiable blendshape synthesis; `shape` [n_shape], `expression` [n_expression],
/// `rotation` [3] (axis-angle), `translation` [3]. Returns vertices [n_v, 3].
template <typename Real>
Var<Real> blendshape_graph(Graph<Real>& g, const FaceModel& model, Var<Real> shape, Var<Real> expression,
                           Var<Real> rotation, Var<Real> translation);

void write_obj(const std::string& path, const Mesh& mesh);
Mesh read_obj(const std::string& path);

/// Model directory: topology.obj, bases.mxt, landmarks.json, regions.json.
void save_model(const FaceModel& model, const std::string& dir);
FaceModel load_model(const std::string& dir);

}  // namespace microface
