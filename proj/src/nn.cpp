#include "microface/nn.hpp"

#include <cmath>

namespace microface {

template <typename Real>
void init_uniform(ParameterSet<Real>& params, const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<Real> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<Real>(dist(rng));
  params.add(name, std::move(t));
}

template <typename Real>
void init_linear(ParameterSet<Real>& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  init_uniform(params, name + ".w", Shape{in, out}, in, rng);
  params.add(name + ".b", Tensor<Real>(Shape{out}));
}

template <typename Real>
Var<Real> linear(Graph<Real>& g, Var<Real> x, const std::string& name) {
  return add_bias(matmul(x, g.param(name + ".w")), g.param(name + ".b"));
}

template <typename Real>
void init_mlp(ParameterSet<Real>& params, const std::string& name, const std::vector<std::size_t>& widths, Rng& rng) {
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    init_linear(params, name + ".l" + std::to_string(i), widths[i], widths[i + 1], rng);
  }
}

template <typename Real>
Var<Real> activate(Var<Real> x, Activation act) {
  switch (act) {
    case Activation::kRelu:
      return relu(x);
    case Activation::kTanh:
      return tanh(x);
    case Activation::kNone:
      break;
  }
  return x;
}

template <typename Real>
Var<Real> mlp(Graph<Real>& g, Var<Real> x, const std::string& name, std::size_t layers, Activation hidden) {
  for (std::size_t i = 0; i < layers; ++i) {
    x = linear(g, x, name + ".l" + std::to_string(i));
    if (i + 1 < layers) x = activate(x, hidden);
  }
  return x;
}

template void init_uniform(ParameterSet<float>&, const std::string&, Shape, std::size_t, Rng&);
template void init_uniform(ParameterSet<double>&, const std::string&, Shape, std::size_t, Rng&);
template void init_linear(ParameterSet<float>&, const std::string&, std::size_t, std::size_t, Rng&);
template void init_linear(ParameterSet<double>&, const std::string&, std::size_t, std::size_t, Rng&);
template void init_mlp(ParameterSet<float>&, const std::string&, const std::vector<std::size_t>&, Rng&);
template void init_mlp(ParameterSet<double>&, const std::string&, const std::vector<std::size_t>&, Rng&);
template Var<float> linear(Graph<float>&, Var<float>, const std::string&);
template Var<double> linear(Graph<double>&, Var<double>, const std::string&);
template Var<float> mlp(Graph<float>&, Var<float>, const std::string&, std::size_t, Activation);
template Var<double> mlp(Graph<double>&, Var<double>, const std::string&, std::size_t, Activation);
template Var<float> activate(Var<float>, Activation);
template Var<double> activate(Var<double>, Activation);

}  // namespace microface
