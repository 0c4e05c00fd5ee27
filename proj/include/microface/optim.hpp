#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "microface/autodiff.hpp"

namespace microface {

struct AdamHyper {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment accumulators keyed by parameter name.
template <typename Real>
struct AdamState {
  AdamHyper hyper;
  std::uint64_t step = 0;
  std::map<std::string, Tensor<Real>> first_moment;
  std::map<std::string, Tensor<Real>> second_moment;
};

/// One bias-corrected Adam step over every parameter that has a gradient entry.
/// Throws ShapeError when a gradient does not match its parameter.
template <typename Real>
void adam_update(ParameterSet<Real>& params, const GradientMap<Real>& grads, AdamState<Real>& state);

}  // namespace microface
