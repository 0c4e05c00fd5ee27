#pragma once

#include <vector>

#include "microface/face_model.hpp"
#include "microface/sparse.hpp"

namespace microface {

/// Symmetric 0/1 vertex adjacency with zero diagonal; A[i,j] = 1 iff (i,j) is an edge of some face.
CsrMatrix build_adjacency(const Faces& faces, std::size_t vertex_count);
inline CsrMatrix build_adjacency(const Mesh& mesh) { return build_adjacency(mesh.faces, mesh.vertex_count()); }

std::vector<double> degrees(const CsrMatrix& adjacency);

/// D~^{-1/2} (A + I) D~^{-1/2} with D~ the degree matrix of A + I.
CsrMatrix normalized_propagation(const CsrMatrix& adjacency);

/// I - D^{-1} A. Rows sum to zero; isolated vertices get an all-zero row.
CsrMatrix uniform_laplacian(const CsrMatrix& adjacency);

/// Unit normal (v1 - v0) x (v2 - v0) per face. Throws Error naming the first face with area < 1e-12.
std::vector<Vec3> face_normals(const Mesh& mesh);
double face_area(const Mesh& mesh, std::size_t face);

bool is_edge_connected(const Faces& faces, std::size_t vertex_count);

/// Differentiable unit face normals of vertices [n_v, 3] -> [n_f, 3] (smoothed norm, eps inside the sqrt).
template <typename Real>
Var<Real> face_normals_graph(Var<Real> vertices, const Faces& faces, Real eps = Real(1e-20));

}  // namespace microface
