#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "mhvae/tensor.hpp"

namespace mhvae {

template <class T>
class Graph;

// Handle to a node on a graph's tape.
template <class T>
struct Var {
  Graph<T>* g = nullptr;
  int id = -1;

  const Tensor<T>& val() const { return g->value(id); }
  const Shape& shape() const { return g->value(id).shape(); }
  bool valid() const { return g != nullptr && id >= 0; }
};

// Reverse-mode tape. Nodes are recorded in evaluation order, which is already
// a topological order, so the backward pass is a single descending sweep that
// visits each node reachable from the loss exactly once.
template <class T>
class Graph {
 public:
  using BackFn = std::function<void(Graph&, int)>;

  Var<T> leaf(Tensor<T> v, bool needs_grad = false) {
    nodes_.push_back(Node{std::move(v), Tensor<T>(), needs_grad, nullptr});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> make(Tensor<T> v, const std::vector<int>& parents, BackFn fn) {
    bool ng = false;
    for (int p : parents) ng = ng || nodes_[static_cast<size_t>(p)].needs_grad;
    nodes_.push_back(Node{std::move(v), Tensor<T>(), ng, ng ? std::move(fn) : nullptr});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
  bool has_grad(int id) const { return !nodes_[static_cast<size_t>(id)].grad.empty(); }

  // Gradient buffer, zero-initialized to the node's value shape on first use.
  Tensor<T>& grad_buf(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  // Gradient of the last backward() wrt node id; zeros if the node was not
  // reached by the loss.
  Tensor<T> grad(int id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    return n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad;
  }

  void backward(Var<T> loss) {
    require(loss.g == this, "backward: loss var belongs to another graph");
    require(value(loss.id).size() == 1, "backward: loss must be scalar, got shape " +
                                            shape_str(value(loss.id).shape()));
    grad_buf(loss.id).mutable_data()[0] = T(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.back && n.needs_grad && !n.grad.empty()) n.back(*this, id);
    }
  }

  void zero_grads() {
    for (Node& n : nodes_) n.grad = Tensor<T>();
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad;
    BackFn back;
  };
  std::vector<Node> nodes_;
};

}  // namespace mhvae
