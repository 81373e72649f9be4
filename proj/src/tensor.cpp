#include "zipmap/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace zipmap {

namespace {
thread_local bool g_grad_enabled = true;
thread_local FlopCounter* g_flop_counter = nullptr;
}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_string(shape));
    n *= e;
  }
  return n;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

FlopCounter::FlopCounter() : outer_(g_flop_counter) { g_flop_counter = this; }
FlopCounter::~FlopCounter() {
  g_flop_counter = outer_;
  if (outer_) outer_->flops_ += flops_;
}
void FlopCounter::add(std::uint64_t flops) {
  if (g_flop_counter) g_flop_counter->flops_ += flops;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<TensorNode<T>>()) {
  const Index n = shape_numel(shape);
  node_->shape = std::move(shape);
  node_->value.assign(static_cast<std::size_t>(n), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<TensorNode<T>>()) {
  if (shape_numel(shape) != static_cast<Index>(data.size()))
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_string(shape));
  node_->shape = std::move(shape);
  node_->value = std::move(data);
}

template <typename T>
Tensor<T> Tensor<T>::from_matrix(const RowMatrix<T>& m) {
  std::vector<T> data(m.data(), m.data() + m.size());
  return Tensor(Shape{m.rows(), m.cols()}, std::move(data));
}

template <typename T>
Index Tensor<T>::dim(Index axis) const {
  const Index r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape()));
  return node_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  return *this;
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw ShapeError("backward() without seed needs a single-element tensor");
  const T one(1);
  backward(std::span<const T>(&one, 1));
}

template <typename T>
void Tensor<T>::backward(std::span<const T> seed) const {
  if (static_cast<Index>(seed.size()) != numel()) throw ShapeError("backward seed size mismatch");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> visited;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<T>* parent = node->parents[next++].get();
      if (parent && parent->requires_grad && visited.insert(parent).second)
        stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  auto& g = node_->ensure_grad();
  for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), node_->value);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(shape(), node_->value);
  out.node_->requires_grad = node_->requires_grad;
  return out;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::vector<NodePtr<T>> inputs,
                      BackwardFn<T> backward) {
  Tensor<T> out(std::move(shape), std::move(value));
  if (any_requires_grad(inputs)) {
    auto& node = *out.node();
    node.requires_grad = true;
    node.parents = std::move(inputs);
    node.backward = std::move(backward);
  }
  return out;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result(Shape, std::vector<float>, std::vector<NodePtr<float>>,
                                   BackwardFn<float>);
template Tensor<double> make_result(Shape, std::vector<double>, std::vector<NodePtr<double>>,
                                    BackwardFn<double>);

}  // namespace zipmap
