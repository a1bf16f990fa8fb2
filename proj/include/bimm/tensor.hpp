#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "bimm/errors.hpp"

namespace bimm {

using Shape = std::vector<size_t>;

inline size_t numel(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ")";
  return os.str();
}

// ---------------------------------------------------------------------------
// Autograd graph node.
//
// Ops build a fresh graph every forward pass. Each node owns a transient
// gradient buffer (allocated lazily during backward and released as soon as
// the node has been processed) plus a closure that scatters its gradient
// into its parents' buffers. Leaf nodes (parameters) additionally point at
// the parameter's persistent gradient storage, into which backward
// accumulates additively; repeated backward calls therefore sum.
// ---------------------------------------------------------------------------
template <class Real>
struct GradNode {
  size_t size = 0;                                     // numel of the output
  std::vector<Real> grad;                              // transient d(loss)/d(output)
  std::vector<std::shared_ptr<GradNode>> parents;      // inputs, in op order
  std::function<void(GradNode&)> backprop;             // empty for leaves
  std::shared_ptr<std::vector<Real>> leaf_grad;        // set for leaves only

  void ensure_grad() {
    if (grad.size() != size) grad.assign(size, Real(0));
  }
};

// Thread-local switch that disables graph construction (used by frozen
// forward passes where gradients are never needed).
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGrad {
  bool prev;
  NoGrad() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGrad() { grad_mode() = prev; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

// ---------------------------------------------------------------------------
// Dense row-major n-d tensor. Copies share storage (shallow semantics), so a
// Tensor behaves like a handle; clone() makes storage-level copies. A tensor
// marked requires_grad owns persistent gradient storage and a leaf autograd
// node which every op attaches to, letting one parameter feed many graph
// sites while accumulating into a single gradient buffer.
// ---------------------------------------------------------------------------
template <class Real>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<Real>>(numel(shape_), Real(0))) {}

  Tensor(Shape shape, std::vector<Real> values) : shape_(std::move(shape)) {
    if (values.size() != numel(shape_)) {
      throw ShapeError("Tensor: " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape_));
    }
    data_ = std::make_shared<std::vector<Real>>(std::move(values));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, Real v) {
    Tensor t(std::move(shape));
    std::fill(t.vec().begin(), t.vec().end(), v);
    return t;
  }

  static Tensor scalar(Real v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  size_t ndim() const { return shape_.size(); }
  size_t dim(size_t i) const { return shape_.at(i); }
  size_t size() const { return data_ ? data_->size() : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  Real* data() { return data_->data(); }
  const Real* data() const { return data_->data(); }
  std::vector<Real>& vec() { return *data_; }
  const std::vector<Real>& vec() const { return *data_; }
  const std::shared_ptr<std::vector<Real>>& storage() const { return data_; }

  Real item() const {
    if (size() != 1) throw ContractError("Tensor::item: size " + std::to_string(size()) + " != 1");
    return (*data_)[0];
  }

  bool requires_grad() const { return requires_grad_; }

  Tensor& set_requires_grad(bool on = true) {
    if (on && !requires_grad_) {
      requires_grad_ = true;
      grad_ = std::make_shared<std::vector<Real>>(size(), Real(0));
      node = std::make_shared<GradNode<Real>>();
      node->size = size();
      node->leaf_grad = grad_;
    } else if (!on && requires_grad_) {
      requires_grad_ = false;
      grad_.reset();
      node.reset();
    }
    return *this;
  }

  const std::vector<Real>& grad() const {
    if (!grad_) throw ContractError("Tensor::grad: tensor does not require grad");
    return *grad_;
  }
  std::vector<Real>& grad() {
    if (!grad_) throw ContractError("Tensor::grad: tensor does not require grad");
    return *grad_;
  }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), Real(0));
  }

  // Deep copy of values; the copy is a detached constant.
  Tensor clone() const {
    Tensor t(shape_, std::vector<Real>(*data_));
    return t;
  }

  template <class R2>
  Tensor<R2> cast() const {
    std::vector<R2> out(size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<R2>((*data_)[i]);
    return Tensor<R2>(shape_, std::move(out));
  }

  // Same storage, detached from the graph.
  Tensor detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  // Graph node: null for constants, leaf node for parameters, interior node
  // for op outputs. Public because the op layer wires graphs directly.
  std::shared_ptr<GradNode<Real>> node;

  // Used by ops to mark interior outputs.
  void attach_node(std::shared_ptr<GradNode<Real>> n) { node = std::move(n); }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<Real>> data_;
  std::shared_ptr<std::vector<Real>> grad_;  // allocated iff requires_grad
  bool requires_grad_ = false;
};

// ---------------------------------------------------------------------------
// Reverse-mode sweep. Topological order via iterative depth-first search from
// the loss node (parents visited in op order), processed in reverse so every
// node's gradient is complete before it propagates. Deterministic: the graph
// is built in program order and traversal follows stored parent order.
// ---------------------------------------------------------------------------
template <class Real>
void backward(const Tensor<Real>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.node) {
    throw ContractError("backward: loss is not connected to any tracked tensor");
  }

  using Node = GradNode<Real>;
  std::vector<Node*> order;  // post-order: parents before users
  std::unordered_set<Node*> seen;
  struct Frame {
    Node* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node.get(), 0});
  seen.insert(loss.node.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node* p = f.node->parents[f.next_parent++].get();
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  loss.node->ensure_grad();
  loss.node->grad[0] = Real(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.empty()) continue;  // unreachable from the seed
    if (n->backprop) n->backprop(*n);
    if (n->leaf_grad) {
      auto& dst = *n->leaf_grad;
      for (size_t i = 0; i < n->grad.size(); ++i) dst[i] += n->grad[i];
    }
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

}  // namespace bimm
