#include "microface/optim.hpp"

#include <cmath>

namespace microface {

template <typename Real>
void adam_update(ParameterSet<Real>& params, const GradientMap<Real>& grads, AdamState<Real>& state) {
  for (const auto& [name, g] : grads) {
    if (params.get(name).shape() != g.shape()) {
      throw ShapeError("adam: gradient for '" + name + "' has shape " + shape_string(g.shape()) + ", parameter " +
                       shape_string(params.get(name).shape()));
    }
  }
  ++state.step;
  const auto& h = state.hyper;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (const auto& [name, g] : grads) {
    Tensor<Real>& p = params.get_mut(name);
    auto& m = state.first_moment.try_emplace(name, Tensor<Real>(p.shape())).first->second;
    auto& v = state.second_moment.try_emplace(name, Tensor<Real>(p.shape())).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * gi;
      const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * gi * gi;
      m[i] = static_cast<Real>(mi);
      v[i] = static_cast<Real>(vi);
      const double step = h.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + h.epsilon);
      p[i] = static_cast<Real>(static_cast<double>(p[i]) - step);
    }
  }
}

template void adam_update(ParameterSet<float>&, const GradientMap<float>&, AdamState<float>&);
template void adam_update(ParameterSet<double>&, const GradientMap<double>&, AdamState<double>&);

}  // namespace microface
