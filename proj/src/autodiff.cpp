#include "microface/autodiff.hpp"

#include <cmath>

namespace microface {

template <typename Real>
void ParameterSet<Real>::add(const std::string& name, Tensor<Real> value) {
  if (!tensors_.emplace(name, std::move(value)).second) throw Error("duplicate parameter '" + name + "'");
}

template <typename Real>
const Tensor<Real>& ParameterSet<Real>::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

template <typename Real>
Tensor<Real>& ParameterSet<Real>::get_mut(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

template <typename Real>
std::vector<std::string> ParameterSet<Real>::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& kv : tensors_) out.push_back(kv.first);
  return out;
}

template <typename Real>
std::size_t ParameterSet<Real>::element_count() const {
  std::size_t n = 0;
  for (const auto& kv : tensors_) n += kv.second.size();
  return n;
}

template <typename Real>
Var<Real> Graph<Real>::constant(Tensor<Real> value) {
  return record("constant", std::move(value), {}, nullptr);
}

template <typename Real>
Var<Real> Graph<Real>::leaf(Tensor<Real> value) {
  auto v = record("leaf", std::move(value), {}, nullptr);
  nodes_.back().requires_grad = true;
  return v;
}

template <typename Real>
Var<Real> Graph<Real>::param(const std::string& name) {
  if (auto it = param_nodes_.find(name); it != param_nodes_.end()) return Var<Real>(this, it->second);
  if (params_ == nullptr) throw Error("graph has no parameter set (asked for '" + name + "')");
  auto v = leaf(params_->get(name));
  param_nodes_.emplace(name, v.id());
  return v;
}

template <typename Real>
Var<Real> Graph<Real>::record(const char* op, Tensor<Real> value, std::vector<int> parents, Backward backward) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by op '") + op + "' (node " +
                       std::to_string(nodes_.size()) + ")");
  }
  Node node;
  node.op = op;
  node.value = std::move(value);
  for (int p : parents) node.requires_grad = node.requires_grad || nodes_[static_cast<std::size_t>(p)].requires_grad;
  if (node.requires_grad) {
    node.parents = std::move(parents);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var<Real>(this, static_cast<int>(nodes_.size() - 1));
}

template <typename Real>
Tensor<Real>& Graph<Real>::grad_accumulator(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.has_grad) {
    n.grad = Tensor<Real>(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

template <typename Real>
void Graph<Real>::backward(Var<Real> loss) {
  if (loss.graph() != this) throw Error("loss belongs to a different graph");
  if (loss.value().size() != 1) throw ShapeError("loss must be scalar, got shape " + shape_string(loss.shape()));
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor<Real>();
  }
  grad_accumulator(loss.id()).fill(Real(1));
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.has_grad || !n.backward) continue;
    if (!n.grad.all_finite()) {
      throw NumericError(std::string("non-finite gradient at op '") + n.op + "' (node " + std::to_string(i) + ")");
    }
    n.backward(*this, n.grad);
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.has_grad && !n.grad.all_finite()) {
      throw NumericError(std::string("non-finite gradient at op '") + n.op + "' (node " + std::to_string(i) + ")");
    }
  }
}

template <typename Real>
Tensor<Real> Graph<Real>::grad(Var<Real> v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (!n.has_grad) return Tensor<Real>(n.value.shape());
  return n.grad;
}

template <typename Real>
GradientMap<Real> Graph<Real>::parameter_grads() const {
  GradientMap<Real> out;
  if (params_ == nullptr) return out;
  for (const auto& [name, t] : params_->items()) {
    auto it = param_nodes_.find(name);
    if (it == param_nodes_.end()) {
      out.emplace(name, Tensor<Real>(t.shape()));
    } else {
      out.emplace(name, grad(Var<Real>(const_cast<Graph*>(this), it->second)));
    }
  }
  return out;
}

template <typename Real>
GradientMap<Real> gradients(Graph<Real>& graph, Var<Real> loss) {
  graph.backward(loss);
  return graph.parameter_grads();
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class Graph<float>;
template class Graph<double>;
template GradientMap<float> gradients(Graph<float>&, Var<float>);
template GradientMap<double> gradients(Graph<double>&, Var<double>);

}  // namespace microface
