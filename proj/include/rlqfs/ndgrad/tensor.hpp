#pragma once
// Dense row-major tensors of doubles with a dynamic reverse-mode tape.
//
// Each op that touches a tracked input (a parameter, or something computed
// from one) records a Node holding its parents and a closure that pushes the
// output gradient back into them. `backward` walks the graph in reverse
// topological order. Tensors are shared handles: copying a Tensor aliases
// the same storage.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rlqfs::nd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl;

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Reads out.grad, accumulates into parents' grads.
  std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  bool tracked() const { return requires_grad || node != nullptr; }
  std::span<double> ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> data);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  // Trainable leaf.
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  std::span<double> grad() { return impl_->grad; }
  std::span<const double> grad() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }

  double item() const;
  double at(std::size_t i) const { return impl_->data.at(i); }
  double at(std::size_t i, std::size_t j) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool tracked() const { return impl_->tracked(); }

  // Allocates (if needed) and zeroes the gradient buffer.
  void zero_grad();
  // Same values, cut from the graph.
  Tensor detach() const;
  Tensor clone() const;

  bool same(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Whether ops currently record the tape (thread-local).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Populates grads of every tracked tensor reachable from `loss` (a single
// element). Leaf gradients accumulate across calls; intermediate gradients
// are recomputed each call.
void backward(const Tensor& loss);

// Creates an op output and, when recording, attaches a node.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   std::function<void(TensorImpl& out)> backward_fn);
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(TensorImpl& out)> backward_fn);

}  // namespace rlqfs::nd
