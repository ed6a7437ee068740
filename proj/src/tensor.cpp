#include "dynseg/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace dynseg {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
thread_local bool grad_mode_enabled = true;
}  // namespace

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool on) { grad_mode_enabled = on; }

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  if (static_cast<Index>(data.size()) != dynseg::numel(shape)) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  return BasicTensor(shape, std::vector<T>(static_cast<std::size_t>(dynseg::numel(shape)), value),
                     requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
  return *this;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(node_->shape, node_->data, false);
}

template <typename T>
void BasicTensor<T>::backward() const {
  if (!defined()) throw std::logic_error("backward() on undefined tensor");
  if (numel() != 1) {
    throw ShapeError("backward() requires a scalar root, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  // `order` owns the nodes so releasing parent links below cannot free them early.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack{{node_, 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      std::shared_ptr<Node> parent = top.first->parents[top.second++];
      if (parent->requires_grad && visited.insert(parent.get()).second) {
        stack.emplace_back(std::move(parent), 0);
      }
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = it->get();
    const bool interior = static_cast<bool>(node->backward);
    if (interior && !node->grad.empty()) node->backward(*node);
    node->backward = nullptr;
    node->parents.clear();
    if (interior && node != node_.get()) std::vector<T>().swap(node->grad);
  }
}

namespace {

template <typename T>
void check_finite(const char* op, const std::vector<T>& data) {
  for (const T& v : data) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

template <typename T, typename Inputs>
BasicTensor<T> make_result_impl(const char* op, Shape shape, std::vector<T> data,
                                const Inputs& inputs,
                                std::function<void(const TensorNode<T>&)> backward) {
  check_finite(op, data);
  BasicTensor<T> out(std::move(shape), std::move(data), false);
  if (!GradMode::enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || wants_grad(in);
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) {
    if (wants_grad(in)) node.parents.push_back(in.node());
  }
  node.backward = std::move(backward);
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                           std::initializer_list<BasicTensor<T>> inputs,
                           std::function<void(const TensorNode<T>&)> backward) {
  return make_result_impl<T>(op, std::move(shape), std::move(data), inputs, std::move(backward));
}

template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                           const std::vector<BasicTensor<T>>& inputs,
                           std::function<void(const TensorNode<T>&)> backward) {
  return make_result_impl<T>(op, std::move(shape), std::move(data), inputs, std::move(backward));
}

template class BasicTensor<float>;
template class BasicTensor<double>;

template BasicTensor<float> make_result(const char*, Shape, std::vector<float>,
                                        std::initializer_list<BasicTensor<float>>,
                                        std::function<void(const TensorNode<float>&)>);
template BasicTensor<double> make_result(const char*, Shape, std::vector<double>,
                                         std::initializer_list<BasicTensor<double>>,
                                         std::function<void(const TensorNode<double>&)>);
template BasicTensor<float> make_result(const char*, Shape, std::vector<float>,
                                        const std::vector<BasicTensor<float>>&,
                                        std::function<void(const TensorNode<float>&)>);
template BasicTensor<double> make_result(const char*, Shape, std::vector<double>,
                                         const std::vector<BasicTensor<double>>&,
                                         std::function<void(const TensorNode<double>&)>);

}  // namespace dynseg
