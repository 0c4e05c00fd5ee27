#pragma once

#include <deque>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "microface/tensor.hpp"

namespace microface {

template <typename Real>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while the graph lives.
template <typename Real>
class Var {
 public:
  Var() = default;
  Var(Graph<Real>* graph, int id) : graph_(graph), id_(id) {}

  Graph<Real>* graph() const { return graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Tensor<Real>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Graph<Real>* graph_ = nullptr;
  int id_ = -1;
};

/// Named trainable tensors, iterated in name order.
template <typename Real>
class ParameterSet {
 public:
  void add(const std::string& name, Tensor<Real> value);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor<Real>& get(const std::string& name) const;
  Tensor<Real>& get_mut(const std::string& name);
  std::vector<std::string> names() const;
  std::size_t size() const { return tensors_.size(); }
  std::size_t element_count() const;
  const std::map<std::string, Tensor<Real>>& items() const { return tensors_; }

  template <typename Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    for (const auto& [name, t] : tensors_) out.add(name, t.template cast<Other>());
    return out;
  }

 private:
  std::map<std::string, Tensor<Real>> tensors_;
};

template <typename Real>
using GradientMap = std::map<std::string, Tensor<Real>>;

/// Tape of recorded primitive operations. Nodes are appended in evaluation order, which is a topological
/// order, so the backward sweep walks the tape in reverse and visits each node once.
template <typename Real>
class Graph {
 public:
  using Backward = std::function<void(Graph&, const Tensor<Real>& out_grad)>;

  explicit Graph(const ParameterSet<Real>* params = nullptr) : params_(params) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Real> constant(Tensor<Real> value);
  /// Differentiable leaf, e.g. an input whose gradient is wanted.
  Var<Real> leaf(Tensor<Real> value);
  /// Leaf bound to a named parameter of the attached ParameterSet; created once per name.
  Var<Real> param(const std::string& name);

  /// Appends an op node. Throws NumericError if `value` contains NaN/Inf.
  Var<Real> record(const char* op, Tensor<Real> value, std::vector<int> parents, Backward backward);

  /// Reverse sweep from a scalar node. Throws ShapeError for a non-scalar loss and NumericError when a
  /// non-finite gradient reaches a node.
  void backward(Var<Real> loss);

  const Tensor<Real>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  /// Gradient of a node after backward(); zeros if it was never reached.
  Tensor<Real> grad(Var<Real> v) const;
  /// Accumulator for backward closures. Allocates zeros on first use.
  Tensor<Real>& grad_accumulator(int id);

  /// Gradient for every parameter of the attached set; unreached parameters get zeros.
  GradientMap<Real> parameter_grads() const;

  std::size_t node_count() const { return nodes_.size(); }

  /// Folds the branch taken by a piecewise op (e.g. the ReLU sign pattern) into a running hash. Two
  /// evaluations with equal signatures lie on the same smooth piece.
  void note_branch(std::uint64_t h) { branch_signature_ = (branch_signature_ ^ h) * 0x100000001b3ULL + 0x9e3779b97f4a7c15ULL; }
  std::uint64_t branch_signature() const { return branch_signature_; }
  const ParameterSet<Real>* parameters() const { return params_; }

 private:
  struct Node {
    const char* op = "";
    Tensor<Real> value;
    Tensor<Real> grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<int> parents;
    Backward backward;
  };

  const ParameterSet<Real>* params_;
  std::deque<Node> nodes_;
  std::unordered_map<std::string, int> param_nodes_;
  std::uint64_t branch_signature_ = 0xcbf29ce484222325ULL;
};

template <typename Real>
const Tensor<Real>& Var<Real>::value() const {
  return graph_->value(id_);
}

/// ∂loss/∂param for every parameter in the graph's set.
template <typename Real>
GradientMap<Real> gradients(Graph<Real>& graph, Var<Real> loss);

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace microface
