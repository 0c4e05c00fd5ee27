#include "microface/camera.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace microface {

Camera Camera::for_image(int width, int height) {
  Camera c;
  c.width = width;
  c.height = height;
  c.fx = c.fy = 1.4 * width;
  c.cx = 0.5 * width;
  c.cy = 0.5 * height;
  c.validate();
  return c;
}

void Camera::validate() const {
  if (width <= 0 || height <= 0) throw Error("camera image size must be positive");
  if (!(fx > 0) || !(fy > 0)) throw Error("camera focal lengths must be positive");
}

Vec2 project(const Vec3& v, const Camera& cam) {
  if (!(v.z() > 1e-6)) throw Error("cannot project a point with z <= 1e-6");
  return {cam.fx * v.x() / v.z() + cam.cx, cam.fy * v.y() / v.z() + cam.cy};
}

Eigen::Matrix<double, Eigen::Dynamic, 2> project_all(const Vertices& vertices, const Camera& cam) {
  Eigen::Matrix<double, Eigen::Dynamic, 2> out(vertices.rows(), 2);
  for (Eigen::Index i = 0; i < vertices.rows(); ++i) out.row(i) = project(vertices.row(i).transpose(), cam).transpose();
  return out;
}

Vec3 pixel_ray(const Vec2& pixel, const Camera& cam) {
  return {(pixel.x() - cam.cx) / cam.fx, (pixel.y() - cam.cy) / cam.fy, 1.0};
}

std::optional<double> ray_triangle(const Vec3& o, const Vec3& d, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 e1 = b - a, e2 = c - a;
  const Vec3 p = d.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < 1e-14) return std::nullopt;
  const double inv = 1.0 / det;
  const Vec3 s = o - a;
  const double u = s.dot(p) * inv;
  if (u < -1e-12 || u > 1.0 + 1e-12) return std::nullopt;
  const Vec3 q = s.cross(e1);
  const double v = d.dot(q) * inv;
  if (v < -1e-12 || u + v > 1.0 + 1e-12) return std::nullopt;
  const double t = e2.dot(q) * inv;
  if (t <= 1e-12) return std::nullopt;
  return t;
}

MeshRaycaster::MeshRaycaster(const Mesh& mesh, const Camera& cam)
    : mesh_(mesh), cam_(cam), projected_(project_all(mesh.vertices, cam)) {
  boxes_.reserve(mesh_.faces.size());
  for (const auto& f : mesh_.faces) {
    Eigen::Vector4d box(std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                        -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity());
    for (int idx : f) {
      box[0] = std::min(box[0], projected_(idx, 0));
      box[1] = std::min(box[1], projected_(idx, 1));
      box[2] = std::max(box[2], projected_(idx, 0));
      box[3] = std::max(box[3], projected_(idx, 1));
    }
    boxes_.push_back(box);
  }
}

Backprojection MeshRaycaster::cast(const Vec2& pixel) const {
  const Vec3 dir = pixel_ray(pixel, cam_);
  const Vec3 origin = Vec3::Zero();
  Backprojection best;
  double best_t = std::numeric_limits<double>::infinity();
  constexpr double slack = 1e-6;
  for (std::size_t f = 0; f < mesh_.faces.size(); ++f) {
    const auto& box = boxes_[f];
    if (pixel.x() < box[0] - slack || pixel.x() > box[2] + slack || pixel.y() < box[1] - slack ||
        pixel.y() > box[3] + slack) {
      continue;
    }
    const auto& face = mesh_.faces[f];
    const auto t = ray_triangle(origin, dir, mesh_.vertices.row(face[0]).transpose(),
                                mesh_.vertices.row(face[1]).transpose(), mesh_.vertices.row(face[2]).transpose());
    if (t && *t < best_t) {
      best_t = *t;
      best.face = static_cast<int>(f);
    }
  }
  if (best.face >= 0) {
    best.point = origin + best_t * dir;
    return best;
  }
  Eigen::Index nearest = 0;
  (projected_.rowwise() - pixel.transpose()).rowwise().squaredNorm().minCoeff(&nearest);
  best.fallback = true;
  best.point = mesh_.vertices.row(nearest).transpose();
  return best;
}

Backprojection backproject_to_mesh(const Vec2& pixel, const Camera& cam, const Mesh& mesh) {
  return MeshRaycaster(mesh, cam).cast(pixel);
}

Vec2 region_centroid(const std::vector<std::size_t>& region, const Vertices& vertices, const Camera& cam) {
  if (region.empty()) throw Error("region_centroid: empty region");
  Vec2 acc = Vec2::Zero();
  for (auto i : region) acc += project(vertices.row(static_cast<Eigen::Index>(i)).transpose(), cam);
  acc /= static_cast<double>(region.size());
  acc.x() = std::clamp(acc.x(), 0.0, static_cast<double>(cam.width - 1));
  acc.y() = std::clamp(acc.y(), 0.0, static_cast<double>(cam.height - 1));
  return acc;
}

std::vector<std::size_t> patch_pixels(const Vec2& center, std::size_t width, std::size_t height, std::size_t k) {
  if (k > width || k > height) throw Error("patch larger than the grid");
  auto start = [k](double c, std::size_t extent) {
    const long half = static_cast<long>(k / 2);
    long lo = std::lround(c) - half;
    lo = std::clamp(lo, 0L, static_cast<long>(extent - k));
    return static_cast<std::size_t>(lo);
  };
  const std::size_t x0 = start(center.x(), width), y0 = start(center.y(), height);
  std::vector<std::size_t> out;
  out.reserve(k * k);
  for (std::size_t y = y0; y < y0 + k; ++y)
    for (std::size_t x = x0; x < x0 + k; ++x) out.push_back(y * width + x);
  return out;
}

}  // namespace microface
