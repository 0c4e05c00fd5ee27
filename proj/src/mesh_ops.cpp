#include "microface/mesh_ops.hpp"

#include <cmath>
#include <numeric>
#include <tuple>

#include "microface/ops.hpp"

namespace microface {

CsrMatrix build_adjacency(const Faces& faces, std::size_t n) {
  std::vector<std::tuple<std::size_t, std::size_t, double>> trip;
  trip.reserve(faces.size() * 6);
  for (const auto& f : faces) {
    for (int k = 0; k < 3; ++k) {
      const int a = f[static_cast<std::size_t>(k)], b = f[static_cast<std::size_t>((k + 1) % 3)];
      if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= n || static_cast<std::size_t>(b) >= n) {
        throw Error("build_adjacency: face index out of range");
      }
      if (a == b) continue;
      trip.emplace_back(a, b, 1.0);
      trip.emplace_back(b, a, 1.0);
    }
  }
  CsrMatrix m = CsrMatrix::from_triplets(n, n, trip);
  for (auto& v : m.values) v = 1.0;  // shared edges were summed
  return m;
}

std::vector<double> degrees(const CsrMatrix& a) {
  std::vector<double> d(a.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t k = a.row_ptr[i]; k < a.row_ptr[i + 1]; ++k) d[i] += a.values[k];
  return d;
}

CsrMatrix normalized_propagation(const CsrMatrix& a) {
  std::vector<double> d = degrees(a);
  for (auto& x : d) x += 1.0;
  std::vector<std::tuple<std::size_t, std::size_t, double>> trip;
  for (std::size_t i = 0; i < a.rows; ++i) {
    trip.emplace_back(i, i, 1.0 / d[i]);
    for (std::size_t k = a.row_ptr[i]; k < a.row_ptr[i + 1]; ++k) {
      const std::size_t j = a.col_idx[k];
      trip.emplace_back(i, j, a.values[k] / std::sqrt(d[i] * d[j]));
    }
  }
  return CsrMatrix::from_triplets(a.rows, a.cols, trip);
}

CsrMatrix uniform_laplacian(const CsrMatrix& a) {
  const auto d = degrees(a);
  std::vector<std::tuple<std::size_t, std::size_t, double>> trip;
  for (std::size_t i = 0; i < a.rows; ++i) {
    if (d[i] == 0.0) continue;
    trip.emplace_back(i, i, 1.0);
    for (std::size_t k = a.row_ptr[i]; k < a.row_ptr[i + 1]; ++k) trip.emplace_back(i, a.col_idx[k], -a.values[k] / d[i]);
  }
  return CsrMatrix::from_triplets(a.rows, a.cols, trip);
}

namespace {
Vec3 raw_normal(const Mesh& mesh, std::size_t f) {
  const auto& face = mesh.faces.at(f);
  const Vec3 v0 = mesh.vertices.row(face[0]).transpose();
  const Vec3 v1 = mesh.vertices.row(face[1]).transpose();
  const Vec3 v2 = mesh.vertices.row(face[2]).transpose();
  return (v1 - v0).cross(v2 - v0);
}
}  // namespace

double face_area(const Mesh& mesh, std::size_t f) { return 0.5 * raw_normal(mesh, f).norm(); }

std::vector<Vec3> face_normals(const Mesh& mesh) {
  std::vector<Vec3> out;
  out.reserve(mesh.faces.size());
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const Vec3 n = raw_normal(mesh, f);
    if (0.5 * n.norm() < 1e-12) throw Error("face " + std::to_string(f) + " is degenerate (area below 1e-12)");
    out.push_back(n.normalized());
  }
  return out;
}

bool is_edge_connected(const Faces& faces, std::size_t n) {
  if (n == 0) return false;
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& f : faces)
    for (int k = 0; k < 3; ++k)
      parent[find(static_cast<std::size_t>(f[static_cast<std::size_t>(k)]))] =
          find(static_cast<std::size_t>(f[static_cast<std::size_t>((k + 1) % 3)]));
  const std::size_t root = find(0);
  for (std::size_t i = 1; i < n; ++i)
    if (find(i) != root) return false;
  return true;
}

template <typename Real>
Var<Real> face_normals_graph(Var<Real> vertices, const Faces& faces, Real eps) {
  std::vector<std::size_t> i0, i1, i2;
  for (const auto& f : faces) {
    i0.push_back(static_cast<std::size_t>(f[0]));
    i1.push_back(static_cast<std::size_t>(f[1]));
    i2.push_back(static_cast<std::size_t>(f[2]));
  }
  auto v0 = gather_rows(vertices, i0);
  auto n = cross_rows(sub(gather_rows(vertices, i1), v0), sub(gather_rows(vertices, i2), v0));
  auto len = sqrt_eps(row_sum(square(n)), eps);
  Graph<Real>& g = *vertices.graph();
  Tensor<Real> ones(Shape{faces.size()}, Real(1));
  return scale_rows(n, div(g.constant(std::move(ones)), len));
}

template Var<float> face_normals_graph(Var<float>, const Faces&, float);
template Var<double> face_normals_graph(Var<double>, const Faces&, double);

}  // namespace microface
