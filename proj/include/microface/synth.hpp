#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "microface/camera.hpp"
#include "microface/face_model.hpp"
#include "microface/tensor.hpp"

namespace microface {

using Landmarks2d = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;

struct NoiseConfig {
  double flow_sigma = 0.05;      // pixels, added to moving covered pixels only
  double landmark_sigma = 0.3;   // pixels, one fixed offset per landmark per sequence
  double head_jitter = 0.0;      // radians / model units, per-frame rigid jitter
};

struct TrajectoryConfig {
  std::size_t frames = 8;
  double amplitude = 0.15;  // max |psi|
  double apex = 0.5;        // apex position in clip time [0, 1]
  /// kLeftEye, kRightEye or kMouth; unset draws one at random.
  std::optional<Region> active_region;
  NoiseConfig noise;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Flow between two frames: [H, W, 2] float, (du, dv) in pixels.
using FlowField = Tensor<float>;

struct SyntheticSequence {
  Camera camera;
  std::vector<ParamState> params;
  std::vector<Mesh> meshes;
  std::vector<Landmarks2d> fan_landmarks;
  std::vector<Landmarks2d> mp_landmarks;
  std::vector<FlowField> flows;  // frames() - 1 entries
  NoiseConfig noise;
  std::string active_region;

  std::size_t frames() const { return params.size(); }
};

/// Raised-cosine onset-apex-offset profile: 0 at s = 0 and s = 1, 1 at s = apex.
double apex_profile(double s, double apex);

SyntheticSequence gen_sequence(const FaceModel& model, const TrajectoryConfig& cfg, const Camera& cam);

/// Analytic flow from mesh_t to mesh_t1. Throws if no triangle faces the camera.
FlowField render_flow(const Mesh& mesh_t, const Mesh& mesh_t1, const Camera& cam);

/// Same as render_flow, also returning the index of the face covering each pixel (-1 if none).
FlowField render_flow(const Mesh& mesh_t, const Mesh& mesh_t1, const Camera& cam, std::vector<int>& coverage);

/// Projected landmark vertices of a mesh, one row per index.
Landmarks2d project_landmarks(const Mesh& mesh, const std::vector<int>& indices, const Camera& cam);

/// Sequence directory: camera.json, params.json, landmarks.json, mesh_<t>.obj, flow_<t>.mxt (t from 1).
void write_sequence(const SyntheticSequence& seq, const std::string& dir);
/// With `require_meshes` false, ground-truth meshes are optional and `meshes` is left empty when any is absent.
SyntheticSequence read_sequence(const std::string& dir, bool require_meshes = true);

/// Deterministic per-item seed derived from a base seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

struct DatasetOptions {
  std::size_t num = 80;
  std::uint64_t seed = 0;
  int height = 96;
  int width = 96;
  double amplitude = 0.15;
  std::size_t frames = 8;
  double train_fraction = 0.7;
  NoiseConfig noise;
  TemplateOptions model;
};

struct DatasetManifest {
  std::size_t num = 0;
  std::uint64_t seed = 0;
  int height = 0;
  int width = 0;
  double amplitude = 0;
  std::size_t frames = 0;
  std::vector<std::string> train;
  std::vector<std::string> test;

  const std::vector<std::string>& split(const std::string& name) const;
};

/// Writes DIR/model/, DIR/seq_<id>/ for every sequence and DIR/manifest.json.
DatasetManifest generate_dataset(const std::string& dir, const DatasetOptions& options);
DatasetManifest read_manifest(const std::string& dir);

}  // namespace microface
