#pragma once

#include <string>
#include <vector>

#include "microface/pipeline.hpp"

namespace microface {

struct GradcheckResult {
  std::string module;
  std::string name;
  double max_rel_error = 0;
  std::size_t probes = 0;
  std::string worst;
  bool passed = false;
};

/// 4 x 5 template grid (20 vertices) with every region populated, 6 + 4 landmarks and 4 expression columns.
FaceModel tiny_face_model();

/// Model dimensions small enough for exhaustive finite differences (latent size 4).
ModelConfig tiny_model_config(std::size_t n_expression);

/// A 4-frame clip of the tiny model on a 24 x 24 image.
SyntheticSequence tiny_sequence(const FaceModel& model, std::uint64_t seed);

std::vector<std::string> gradcheck_modules();

/// Central-difference checks in 64-bit mode for each loss, each learned module and the whole frame and clip
/// pipelines. An empty `module` runs everything.
std::vector<GradcheckResult> run_gradcheck_suite(const std::string& module = "", double tolerance = 1e-5);

}  // namespace microface
