#pragma once

#include <optional>
#include <vector>

#include "microface/face_model.hpp"

namespace microface {

/// Pinhole camera looking down +z. Pixel (u, v) has its center at integer coordinates.
struct Camera {
  double fx = 134.4;
  double fy = 134.4;
  double cx = 48.0;
  double cy = 48.0;
  int width = 96;
  int height = 96;

  /// Default intrinsics for a square-ish image: focal 1.4 * width, centered principal point.
  static Camera for_image(int width, int height);
  void validate() const;
};

/// (fx x/z + cx, fy y/z + cy). Throws Error for z <= 1e-6.
Vec2 project(const Vec3& v, const Camera& cam);
Eigen::Matrix<double, Eigen::Dynamic, 2> project_all(const Vertices& vertices, const Camera& cam);
/// Camera-space direction (not normalized) of the ray through a pixel.
Vec3 pixel_ray(const Vec2& pixel, const Camera& cam);

/// Two-sided Moller-Trumbore. Returns the ray parameter t > 0 of the hit.
std::optional<double> ray_triangle(const Vec3& origin, const Vec3& dir, const Vec3& a, const Vec3& b, const Vec3& c);

struct Backprojection {
  Vec3 point = Vec3::Zero();
  bool fallback = false;  // ray missed; point is the vertex whose projection is nearest
  int face = -1;          // hit face, or -1 on fallback
};

/// Casts many pixels against one mesh; triangles are pre-binned by their projected bounding boxes.
class MeshRaycaster {
 public:
  MeshRaycaster(const Mesh& mesh, const Camera& cam);
  Backprojection cast(const Vec2& pixel) const;

 private:
  Mesh mesh_;
  Camera cam_;
  Eigen::Matrix<double, Eigen::Dynamic, 2> projected_;
  std::vector<Eigen::Vector4d> boxes_;  // min u, min v, max u, max v
};

/// Nearest ray-mesh intersection through `pixel`, with the nearest-projected-vertex fallback.
Backprojection backproject_to_mesh(const Vec2& pixel, const Camera& cam, const Mesh& mesh);

/// Mean projection of the given vertices, clamped to the image rectangle.
Vec2 region_centroid(const std::vector<std::size_t>& region, const Vertices& vertices, const Camera& cam);

/// Flat indices of the k x k patch around round(center), shifted so it lies inside a w x h grid.
std::vector<std::size_t> patch_pixels(const Vec2& center, std::size_t width, std::size_t height, std::size_t k = 5);

}  // namespace microface
