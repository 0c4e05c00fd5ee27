#pragma once

#include <random>
#include <string>
#include <vector>

#include "microface/ops.hpp"

namespace microface {

using Rng = std::mt19937_64;

enum class Activation { kNone, kRelu, kTanh };

/// Registers `name.w` [in, out] (uniform in ±sqrt(1/in)) and a zero bias `name.b` [out].
template <typename Real>
void init_linear(ParameterSet<Real>& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng);

/// Registers a tensor of the given shape, uniform in ±sqrt(1/fan_in).
template <typename Real>
void init_uniform(ParameterSet<Real>& params, const std::string& name, Shape shape, std::size_t fan_in, Rng& rng);

/// x [n, in] -> x W + b
template <typename Real>
Var<Real> linear(Graph<Real>& g, Var<Real> x, const std::string& name);

/// Layer widths {in, h1, ..., out}; layers are named `name.l0`, `name.l1`, ...
template <typename Real>
void init_mlp(ParameterSet<Real>& params, const std::string& name, const std::vector<std::size_t>& widths, Rng& rng);

/// Hidden layers use `hidden`; the last layer is linear.
template <typename Real>
Var<Real> mlp(Graph<Real>& g, Var<Real> x, const std::string& name, std::size_t layers,
              Activation hidden = Activation::kRelu);

template <typename Real>
Var<Real> activate(Var<Real> x, Activation act);

}  // namespace microface
