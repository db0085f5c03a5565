#include "rlqfs/ndgrad/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "rlqfs/errors.hpp"

namespace rlqfs::nd {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

std::span<double> TensorImpl::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

namespace {

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<double> data) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

thread_local bool g_grad_enabled = true;

}  // namespace

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const auto n = shape_numel(shape);
  return Tensor(new_impl(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  return Tensor(new_impl(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::vector(std::vector<double> data) {
  const auto n = data.size();
  return from({n}, std::move(data));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return from({r, c}, std::move(data));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  Tensor t = from(std::move(shape), std::move(data));
  t.impl_->requires_grad = true;
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  if (rank() != 2) throw DimensionError("at(i,j) on rank-" + std::to_string(rank()) + " tensor");
  return impl_->data.at(i * impl_->shape[1] + j);
}

void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(impl);
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(TensorImpl& out)> backward_fn) {
  auto impl = new_impl(std::move(shape), std::move(data));
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.defined() && t.tracked(); });
    if (any) {
      auto node = std::make_shared<Node>();
      node->parents.reserve(inputs.size());
      for (const auto& t : inputs) node->parents.push_back(t.impl());
      node->backward = std::move(backward_fn);
      impl->node = std::move(node);
    }
  }
  return Tensor(impl);
}

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   std::function<void(TensorImpl& out)> backward_fn) {
  return make_result(std::move(shape), std::move(data), std::vector<Tensor>(inputs),
                     std::move(backward_fn));
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  TensorImpl* root = loss.impl().get();
  if (!root->tracked()) throw ContractError("backward() on a tensor with no gradient graph");

  // Iterative post-order DFS.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [cur, next] = stack.back();
    if (cur->node && next < cur->node->parents.size()) {
      TensorImpl* p = cur->node->parents[next++].get();
      if (p->tracked() && seen.insert(p).second) stack.emplace_back(p, 0);
      continue;
    }
    order.push_back(cur);
    stack.pop_back();
  }

  for (TensorImpl* t : order) {
    if (t->node) {
      t->grad.assign(t->data.size(), 0.0);
    } else {
      t->ensure_grad();
    }
  }
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (t->node && t->node->backward) t->node->backward(*t);
  }
}

}  // namespace rlqfs::nd
