#pragma once

#include <cassert>
#include <functional>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "hgr/common.hpp"

namespace hgr::ad {

// Shapes are rank-1 vectors [n] or rank-2 row-major matrices [rows, cols].
// Scalars are represented as [1].
using Shape = std::vector<int>;

inline int numel(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d <= 0) fail<ShapeError>("non-positive dimension in shape ", shape_str(s));
    n *= d;
  }
  return n;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

template <class Real>
class Tape;

// Lightweight handle into a Tape. Copyable; valid as long as the tape node
// it points to has not been truncated away.
template <class Real>
struct Tensor {
  Tape<Real>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int rows() const { return shape()[0]; }
  int cols() const { return shape().size() == 2 ? shape()[1] : 1; }
  int size() const { return numel(shape()); }
  std::span<const Real> value() const;
  std::span<const Real> grad() const;
  Real scalar() const;
  bool requires_grad() const;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the backward
// sweep is a single reverse pass; no explicit topological sort is needed.
// A tape is single-threaded; run independent batches on independent tapes.
template <class Real>
class Tape {
 public:
  using Hook = std::function<void(std::span<const Real>)>;

  struct Node {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;  // allocated lazily by backward()
    bool requires_grad = false;
    std::function<void(Tape&)> backward;  // sends this node's grad to inputs
    Hook leaf_hook;  // for parameter leaves: accumulates grad externally
  };

  Tensor<Real> leaf(Shape shape, std::vector<Real> value, bool requires_grad = false) {
    if (numel(shape) != static_cast<int>(value.size()))
      fail<ShapeError>("leaf: shape ", shape_str(shape), " does not match ",
                       value.size(), " values");
    return push(std::move(shape), std::move(value), requires_grad, nullptr);
  }

  Tensor<Real> constant(Shape shape, std::vector<Real> value) {
    return leaf(std::move(shape), std::move(value), false);
  }

  Tensor<Real> zeros(Shape shape) {
    std::vector<Real> v(static_cast<size_t>(numel(shape)), Real(0));
    return constant(std::move(shape), std::move(v));
  }

  Tensor<Real> scalar(Real v, bool requires_grad = false) {
    return leaf({1}, {v}, requires_grad);
  }

  // Leaf that routes its gradient into an external buffer after backward.
  Tensor<Real> leaf_with_hook(Shape shape, std::vector<Real> value, Hook hook) {
    Tensor<Real> t = push(std::move(shape), std::move(value), true, nullptr);
    nodes_[t.id].leaf_hook = std::move(hook);
    return t;
  }

  // Internal: records a computed node. `backward` may be empty when no input
  // needs a gradient or recording is off.
  Tensor<Real> push(Shape shape, std::vector<Real> value, bool requires_grad,
                    std::function<void(Tape&)> backward) {
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = requires_grad && recording_;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    backward_run_ = false;
    return Tensor<Real>{this, static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  size_t size() const { return nodes_.size(); }

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  // Drops every node with index >= mark. Earlier nodes stay intact, which
  // lets evaluation reuse encoded inputs while discarding per-pair scratch.
  void truncate(size_t mark) {
    if (mark > nodes_.size()) fail<Error>("truncate: mark beyond tape end");
    nodes_.resize(mark);
  }

  void reset() {
    nodes_.clear();
    backward_run_ = false;
  }

  // Reverse sweep from a scalar loss. Gradients of every requires_grad node
  // are left on the tape; parameter leaves additionally fire their hooks.
  void backward(Tensor<Real> loss) {
    if (loss.tape != this) fail<Error>("backward: loss lives on another tape");
    if (loss.size() != 1)
      fail<ShapeError>("backward: loss must be scalar, got shape ",
                       shape_str(loss.shape()));
    if (backward_run_)
      fail<Error>("backward: called twice on the same recording");
    if (!node(loss.id).requires_grad)
      fail<Error>("backward: loss does not depend on any differentiable input");
    backward_run_ = true;

    for (auto& n : nodes_) {
      if (n.requires_grad) n.grad.assign(n.value.size(), Real(0));
    }
    node(loss.id).grad[0] = Real(1);

    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.requires_grad) continue;
      if (n.backward) n.backward(*this);
      if (n.leaf_hook) n.leaf_hook(std::span<const Real>(n.grad));
    }
  }

  // Grad accumulation helper used by op backward closures.
  void accumulate(int id, std::span<const Real> g) {
    Node& n = node(id);
    if (!n.requires_grad) return;
    assert(n.grad.size() == g.size());
    for (size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

 private:
  std::vector<Node> nodes_;
  bool recording_ = true;
  bool backward_run_ = false;
};

template <class Real>
const Shape& Tensor<Real>::shape() const {
  return tape->node(id).shape;
}

template <class Real>
std::span<const Real> Tensor<Real>::value() const {
  return std::span<const Real>(tape->node(id).value);
}

template <class Real>
std::span<const Real> Tensor<Real>::grad() const {
  const auto& n = tape->node(id);
  if (n.grad.size() != n.value.size())
    fail<Error>("grad: no gradient recorded for this tensor (run backward first)");
  return std::span<const Real>(n.grad);
}

template <class Real>
Real Tensor<Real>::scalar() const {
  if (size() != 1)
    fail<ShapeError>("scalar: tensor has shape ", shape_str(shape()));
  return value()[0];
}

template <class Real>
bool Tensor<Real>::requires_grad() const {
  return tape->node(id).requires_grad;
}

}  // namespace hgr::ad
