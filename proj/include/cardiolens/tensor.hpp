#pragma once

// Dense double-precision tensor with reverse-mode differentiation.
//
// Every differentiable operation that touches a tensor requiring gradients
// produces a node stamped with a monotonically increasing tape position.
// backward() gathers the nodes reachable from the loss into a GradTape,
// ordered by that position, and replays it in reverse so each node's local
// backward rule runs after all of its consumers have contributed.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace cardiolens {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty unless requires_grad
  bool requires_grad = false;
  std::uint64_t tape_pos = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents' grads.
  std::function<void(Node&)> backward;
};

inline std::uint64_t next_tape_pos() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) : node_(std::make_shared<detail::Node>()) {
    if (numel(shape) != data.size())
      throw ShapeError("Tensor: data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->tape_pos = detail::next_tape_pos();
    set_requires_grad(requires_grad);
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return Tensor(shape, std::vector<double>(numel(shape), 0.0), requires_grad);
  }
  static Tensor filled(const Shape& shape, double v, bool requires_grad = false) {
    return Tensor(shape, std::vector<double>(numel(shape), v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  double operator[](std::size_t i) const { return node_->data[i]; }

  double item() const {
    if (size() != 1) throw ShapeError("Tensor::item on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    if (flag && node_->grad.size() != node_->data.size()) node_->grad.assign(node_->data.size(), 0.0);
    if (!flag) node_->grad.clear();
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  /// Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  /// Builds an operation result. Gradient bookkeeping is attached only when
  /// some input requires gradients.
  static Tensor from_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                        std::function<void(detail::Node&)> backward) {
    Tensor out(std::move(shape), std::move(data), false);
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      out.node_->requires_grad = true;
      out.node_->grad.assign(out.node_->data.size(), 0.0);
      for (auto& in : inputs) out.node_->parents.push_back(in.node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Nodes reachable from a loss, in recording order.
class GradTape {
 public:
  static GradTape collect(const Tensor& loss) {
    GradTape tape;
    std::unordered_set<const detail::Node*> seen;
    std::vector<detail::Node*> stack{loss.node().get()};
    while (!stack.empty()) {
      detail::Node* n = stack.back();
      stack.pop_back();
      if (!n->requires_grad || !seen.insert(n).second) continue;
      tape.nodes_.push_back(n);
      for (const auto& p : n->parents) stack.push_back(p.get());
    }
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->tape_pos < b->tape_pos; });
    return tape;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Zeroes intermediate gradients, seeds d(loss)/d(loss) = 1 and runs the
  /// local backward rules from the newest entry to the oldest. Leaf gradients
  /// accumulate across calls.
  void replay(const Tensor& loss) const {
    for (detail::Node* n : nodes_)
      if (n->backward) std::fill(n->grad.begin(), n->grad.end(), 0.0);
    loss.node()->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      if ((*it)->backward) (*it)->backward(**it);
  }

 private:
  std::vector<detail::Node*> nodes_;
};

inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) throw ShapeError("backward: loss must be a scalar");
  if (!loss.requires_grad()) throw std::invalid_argument("backward: loss does not depend on any trainable tensor");
  GradTape::collect(loss).replay(loss);
}

}  // namespace cardiolens
