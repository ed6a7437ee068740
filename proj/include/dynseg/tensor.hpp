#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynseg {

using Index = std::int64_t;
using Shape = std::vector<Index>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Index numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Autograd is recorded only while enabled. Thread-local so inference workers
// can run with recording off while a training thread keeps it on.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's grad and accumulates into parents.
  std::function<void(const TensorNode&)> backward;

  // Allocates the grad buffer on first use; returns it.
  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);
  explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static BasicTensor zeros(const Shape& shape, bool requires_grad = false);
  static BasicTensor full(const Shape& shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Mutable access is for leaves (parameters, inputs); mutating a tensor that
  // already feeds a recorded graph invalidates that graph.
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T at(std::size_t flat) const { return node_->data.at(flat); }

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  // Shares nothing with the graph; data is copied.
  BasicTensor detach() const;
  BasicTensor clone() const { return detach(); }

  // Reverse-mode pass from a scalar root. Intermediate graph state is released
  // afterwards; leaf gradients accumulate across calls until zero_grad().
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Builds an op result. Records parents and the backward rule only when grad
// mode is on and at least one input requires grad. Rejects non-finite output.
template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                           std::initializer_list<BasicTensor<T>> inputs,
                           std::function<void(const TensorNode<T>&)> backward);

template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                           const std::vector<BasicTensor<T>>& inputs,
                           std::function<void(const TensorNode<T>&)> backward);

// True when grads for `t` should be produced by a backward rule.
template <typename T>
inline bool wants_grad(const BasicTensor<T>& t) {
  return t.defined() && t.requires_grad();
}

template <typename T>
inline std::vector<T>& grad_of(const BasicTensor<T>& t) {
  return t.node()->grad_buffer();
}

}  // namespace dynseg
