#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "wldm/core.hpp"

namespace wldm {

struct TensorImpl;

// One recorded op in the define-by-run graph. `backward` reads the output's
// gradient and accumulates into the gradients of `inputs`.
struct Node {
  const char* name = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves

  bool is_leaf() const { return node == nullptr; }
};

// Reference-counted handle to a dense row-major tensor. Copies alias the same
// storage; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, Real value, bool requires_grad = false);
  static Tensor ones(const Shape& shape) { return full(shape, Real(1)); }
  static Tensor from(const Shape& shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value) { return full({}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  // Negative axes count from the back.
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<Real> data() { return impl_->data; }
  std::span<const Real> data() const { return impl_->data; }
  Real item() const;
  Real at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient buffer; all zeros when nothing has been accumulated yet.
  std::vector<Real> grad() const;
  std::span<const Real> grad_view() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  // Leaf copy without history or gradient tracking.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  // Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls.
  void backward() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Graph recording switch (thread local).
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

// When on, every op verifies its output is finite and throws NumericError.
void set_debug_checks(bool on);
bool debug_checks();

namespace detail {

using BackwardFn = std::function<void(const TensorImpl& out)>;

// Wraps freshly computed data as an op result, recording `backward` when any
// input tracks gradients and grad mode is on.
Tensor make_result(const char* name, Shape shape, std::vector<Real> data,
                   std::initializer_list<Tensor> inputs, BackwardFn backward);
Tensor make_result(const char* name, Shape shape, std::vector<Real> data,
                   const std::vector<Tensor>& inputs, BackwardFn backward);

// Gradient buffer of `t` for accumulation, allocated on first use. Empty span
// when `t` does not track gradients.
std::span<Real> grad_sink(TensorImpl& t);
inline std::span<Real> grad_sink(const std::shared_ptr<TensorImpl>& t) { return grad_sink(*t); }

}  // namespace detail

}  // namespace wldm
