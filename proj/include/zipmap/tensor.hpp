#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "zipmap/errors.hpp"

namespace zipmap {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);
Index shape_numel(const Shape& shape);

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
struct TensorNode;

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

// Propagates `self.grad` into the grads of `self.parents`.
template <typename T>
using BackwardFn = std::function<void(TensorNode<T>& self)>;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<NodePtr<T>> parents;
  BackwardFn<T> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
  Index rows() const { return shape.empty() ? 1 : static_cast<Index>(value.size()) / shape.back(); }
  Index cols() const { return shape.empty() ? 1 : shape.back(); }
  ConstMatrixMap<T> value_matrix() const { return {value.data(), rows(), cols()}; }
  MatrixMap<T> grad_matrix() {
    ensure_grad();
    return {grad.data(), rows(), cols()};
  }
};

// Gradient recording switch. Off inside a NoGradGuard scope on the current thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Counts multiply-add work issued by matrix products on the current thread.
class FlopCounter {
 public:
  FlopCounter();
  ~FlopCounter();
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;

  std::uint64_t flops() const { return flops_; }
  static void add(std::uint64_t flops);

 private:
  std::uint64_t flops_ = 0;
  FlopCounter* outer_;
};

// Dense row-major array with optional reverse-mode gradient tracking.
// Copies share storage; use clone() for an independent copy.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);
  explicit Tensor(NodePtr<T> node) : node_(std::move(node)) {}

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }
  static Tensor from_matrix(const RowMatrix<T>& m);
  template <typename Derived>
  static Tensor from_eigen(const Eigen::MatrixBase<Derived>& m) {
    return from_matrix(RowMatrix<T>(m.template cast<T>()));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const;
  Index numel() const { return static_cast<Index>(node_->value.size()); }
  // Row-major 2D view: all leading extents folded into rows.
  Index rows() const { return node_->rows(); }
  Index cols() const { return node_->cols(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  T item() const;
  T operator[](Index i) const { return node_->value[static_cast<std::size_t>(i)]; }

  ConstMatrixMap<T> matrix() const { return node_->value_matrix(); }
  MatrixMap<T> mutable_matrix() { return {node_->value.data(), rows(), cols()}; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  ConstMatrixMap<T> grad_matrix() const { return {node_->grad.data(), rows(), cols()}; }
  void zero_grad() { node_->grad.clear(); }

  // Seeds d(self)/d(self) = 1 (self must be a single element) and runs the graph backwards.
  void backward() const;
  // Same, with an explicit upstream gradient of matching size.
  void backward(std::span<const T> seed) const;

  Tensor detach() const;
  Tensor clone() const;
  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->value.begin(), node_->value.end());
    return Tensor<U>(shape(), std::move(out));
  }

  const NodePtr<T>& node() const { return node_; }

 private:
  NodePtr<T> node_;
};

// Builds an op result. Parents and the backward closure are kept only when recording
// is on and some input tracks gradients.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::vector<NodePtr<T>> inputs,
                      BackwardFn<T> backward);

template <typename T>
bool any_requires_grad(const std::vector<NodePtr<T>>& inputs) {
  if (!grad_enabled()) return false;
  for (const auto& n : inputs)
    if (n && n->requires_grad) return true;
  return false;
}

}  // namespace zipmap
