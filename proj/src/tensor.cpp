#include "wldm/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace wldm {

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void contract_fail(const std::string& what) { throw ContractViolation(what); }

namespace {

thread_local bool g_grad_enabled = true;
bool g_debug_checks = false;

std::shared_ptr<TensorImpl> new_impl(const Shape& shape, std::vector<Real> data, bool requires_grad) {
  for (auto e : shape) require(e > 0, "tensor extents must be positive, got " + shape_str(shape));
  require(static_cast<std::int64_t>(data.size()) == numel_of(shape),
          "data length does not match shape " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void set_debug_checks(bool on) { g_debug_checks = on; }
bool debug_checks() { return g_debug_checks; }

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(new_impl(shape, std::vector<Real>(numel_of(shape), Real(0)), requires_grad));
}

Tensor Tensor::full(const Shape& shape, Real value, bool requires_grad) {
  return Tensor(new_impl(shape, std::vector<Real>(numel_of(shape), value), requires_grad));
}

Tensor Tensor::from(const Shape& shape, std::vector<Real> values, bool requires_grad) {
  return Tensor(new_impl(shape, std::move(values), requires_grad));
}

std::int64_t Tensor::dim(std::int64_t axis) const {
  const auto n = ndim();
  if (axis < 0) axis += n;
  require(axis >= 0 && axis < n, "axis out of range for shape " + shape_str(shape()));
  return impl_->shape[axis];
}

Real Tensor::item() const {
  require(numel() == 1, "item() needs a single-element tensor, got " + shape_str(shape()));
  return impl_->data[0];
}

Real Tensor::at(std::initializer_list<std::int64_t> index) const {
  require(static_cast<std::int64_t>(index.size()) == ndim(), "index rank mismatch");
  std::int64_t flat = 0;
  std::size_t a = 0;
  for (auto i : index) {
    require(i >= 0 && i < impl_->shape[a], "index out of range");
    flat = flat * impl_->shape[a] + i;
    ++a;
  }
  return impl_->data[flat];
}

Tensor& Tensor::set_requires_grad(bool on) {
  require(impl_->is_leaf() || !on, "requires_grad can only be enabled on leaves");
  impl_->requires_grad = on;
  return *this;
}

std::vector<Real> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<Real>(impl_->data.size(), Real(0));
  return impl_->grad;
}

Tensor Tensor::detach() const { return Tensor(new_impl(impl_->shape, impl_->data, false)); }

void Tensor::backward() const {
  require(numel() == 1, "backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (t->node && next < t->node->inputs.size()) {
      TensorImpl* child = t->node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }

  for (auto* t : order)
    if (!t->is_leaf()) t->grad.assign(t->data.size(), Real(0));
  auto root = detail::grad_sink(*impl_);
  root[0] += Real(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (!t->is_leaf()) t->node->backward(*t);
  }
  // Interior gradients are scratch; only leaves keep theirs.
  for (auto* t : order)
    if (!t->is_leaf()) {
      t->grad.clear();
      t->grad.shrink_to_fit();
    }
}

namespace detail {

std::span<Real> grad_sink(TensorImpl& t) {
  if (!t.requires_grad) return {};
  if (t.grad.empty()) t.grad.assign(t.data.size(), Real(0));
  return t.grad;
}

Tensor make_result(const char* name, Shape shape, std::vector<Real> data,
                   const std::vector<Tensor>& inputs, BackwardFn backward) {
  if (g_debug_checks) {
    for (Real v : data)
      if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + name);
  }
  auto impl = new_impl(shape, std::move(data), false);
  bool track = false;
  if (g_grad_enabled)
    for (const auto& in : inputs) track = track || in.requires_grad();
  if (track) {
    impl->requires_grad = true;
    auto node = std::make_shared<Node>();
    node->name = name;
    for (const auto& in : inputs) node->inputs.push_back(in.impl_ptr());
    node->backward = std::move(backward);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

Tensor make_result(const char* name, Shape shape, std::vector<Real> data,
                   std::initializer_list<Tensor> inputs, BackwardFn backward) {
  return make_result(name, std::move(shape), std::move(data), std::vector<Tensor>(inputs),
                     std::move(backward));
}

}  // namespace detail

}  // namespace wldm
