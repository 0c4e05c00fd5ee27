#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "microface/autodiff.hpp"

namespace microface {

/// Scalar function of one differentiable input, built on a fresh 64-bit graph.
using ScalarFn = std::function<Var<double>(Graph<double>&, Var<double>)>;
/// Scalar function of the parameters attached to the graph.
using ParamLossFn = std::function<Var<double>(Graph<double>&)>;

/// |a - c| / max(|a| + |c|, floor). The floor keeps entries that are zero up to rounding from dominating.
double relative_error(double analytic, double central, double floor = 1e-12);

/// Noise floor used by the checks below: 1e-6 max(1, |f(x)|). Gradient entries smaller than this are
/// compared in absolute terms, since differences of f cannot resolve them in 64-bit arithmetic.
double gradcheck_floor(double value);

/// Max over components of the relative error between the reverse-mode gradient and a fourth-order central
/// difference (f(x-2h), f(x-h), f(x+h), f(x+2h)) with step `eps`. The step shrinks for a component whose
/// probes change the graph's branch signature. Throws NumericError if f is NaN at any probe. Graphs are bound to `params` when given.
double finite_diff_gradcheck(const ScalarFn& f, const Tensor<double>& x, double eps,
                             const ParameterSet<double>* params = nullptr);

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::string worst;  // "<param>[<index>]"
  std::size_t probes = 0;
};

/// Same check against every parameter of `params`. At most `max_probes` entries per tensor are probed,
/// chosen with a seeded shuffle; `params` is restored before returning.
GradcheckReport gradcheck_parameters(const ParamLossFn& f, ParameterSet<double>& params, double eps,
                                     std::size_t max_probes, std::uint64_t seed);

}  // namespace microface
