#include <algorithm>
#include <cmath>

#include "wldm/ops.hpp"

namespace wldm {

namespace {

using detail::grad_sink;
using detail::make_result;

struct BroadcastPlan {
  Shape out;
  std::vector<std::int64_t> stride_a;
  std::vector<std::int64_t> stride_b;
  bool same = false;
};

std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  const std::size_t nd = out.size();
  const std::size_t off = nd - in.size();
  std::vector<std::int64_t> strides(nd, 0);
  std::int64_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[i + off] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  return strides;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t nd = std::max(a.size(), b.size());
  p.out.assign(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::int64_t ea = i + a.size() >= nd ? a[i + a.size() - nd] : 1;
    const std::int64_t eb = i + b.size() >= nd ? b[i + b.size() - nd] : 1;
    if (ea != eb && ea != 1 && eb != 1)
      contract_fail("cannot broadcast " + shape_str(a) + " with " + shape_str(b) + " at axis " +
                    std::to_string(i));
    p.out[i] = std::max(ea, eb);
  }
  p.stride_a = broadcast_strides(a, p.out);
  p.stride_b = broadcast_strides(b, p.out);
  return p;
}

template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::int64_t n = numel_of(p.out);
  if (p.same) {
    for (std::int64_t o = 0; o < n; ++o) f(o, o, o);
    return;
  }
  const std::size_t nd = p.out.size();
  std::vector<std::int64_t> idx(nd, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t ax = nd; ax-- > 0;) {
      ++idx[ax];
      ia += p.stride_a[ax];
      ib += p.stride_b[ax];
      if (idx[ax] < p.out[ax]) break;
      ia -= p.stride_a[ax] * p.out[ax];
      ib -= p.stride_b[ax] * p.out[ax];
      idx[ax] = 0;
    }
  }
}

// f(x, y) -> value; da(x, y) and db(x, y) are partial derivatives.
template <class F, class DA, class DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  auto plan = plan_broadcast(a.shape(), b.shape());
  std::vector<Real> out(numel_of(plan.out));
  {
    const auto xa = a.data();
    const auto xb = b.data();
    for_each_broadcast(plan, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) { out[o] = f(xa[ia], xb[ib]); });
  }
  auto pa = a.impl_ptr();
  auto pb = b.impl_ptr();
  return make_result(name, plan.out, std::move(out), {a, b}, [plan, pa, pb, da, db](const TensorImpl& res) {
    auto ga = grad_sink(pa);
    auto gb = grad_sink(pb);
    const auto& xa = pa->data;
    const auto& xb = pb->data;
    const auto& g = res.grad;
    for_each_broadcast(plan, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      if (!ga.empty()) ga[ia] += g[o] * da(xa[ia], xb[ib]);
      if (!gb.empty()) gb[ib] += g[o] * db(xa[ia], xb[ib]);
    });
  });
}

// f(x) -> y; df(x, y) -> dy/dx.
template <class F, class DF>
Tensor unary_op(const char* name, const Tensor& x, F f, DF df) {
  const auto xs = x.data();
  std::vector<Real> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  auto px = x.impl_ptr();
  return make_result(name, x.shape(), std::move(out), {x}, [px, df](const TensorImpl& res) {
    auto gx = grad_sink(px);
    if (gx.empty()) return;
    const auto& xs = px->data;
    for (std::size_t i = 0; i < xs.size(); ++i) gx[i] += res.grad[i] * df(xs[i], res.data[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](Real x, Real y) { return x + y; }, [](Real, Real) { return Real(1); },
      [](Real, Real) { return Real(1); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](Real x, Real y) { return x - y; }, [](Real, Real) { return Real(1); },
      [](Real, Real) { return Real(-1); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](Real x, Real y) { return x * y; }, [](Real, Real y) { return y; },
      [](Real x, Real) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](Real x, Real y) { return x / y; }, [](Real, Real y) { return Real(1) / y; },
      [](Real x, Real y) { return -x / (y * y); });
}

Tensor scale(const Tensor& x, Real s) {
  return unary_op("scale", x, [s](Real v) { return v * s; }, [s](Real, Real) { return s; });
}

Tensor add_scalar(const Tensor& x, Real s) {
  return unary_op("add_scalar", x, [s](Real v) { return v + s; }, [](Real, Real) { return Real(1); });
}

Tensor neg(const Tensor& x) { return scale(x, Real(-1)); }

Tensor square(const Tensor& x) {
  return unary_op("square", x, [](Real v) { return v * v; }, [](Real v, Real) { return Real(2) * v; });
}

Tensor exp(const Tensor& x) {
  return unary_op("exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op("log", x, [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op("sqrt", x, [](Real v) { return std::sqrt(v); }, [](Real, Real y) { return Real(0.5) / y; });
}

Tensor tanh(const Tensor& x) {
  return unary_op("tanh", x, [](Real v) { return std::tanh(v); }, [](Real, Real y) { return Real(1) - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      "sigmoid", x, [](Real v) { return Real(1) / (Real(1) + std::exp(-v)); },
      [](Real, Real y) { return y * (Real(1) - y); });
}

Tensor silu(const Tensor& x) {
  return unary_op(
      "silu", x, [](Real v) { return v / (Real(1) + std::exp(-v)); },
      [](Real v, Real) {
        const Real s = Real(1) / (Real(1) + std::exp(-v));
        return s * (Real(1) + v * (Real(1) - s));
      });
}

Tensor leaky_relu(const Tensor& x, Real slope) {
  return unary_op(
      "leaky_relu", x, [slope](Real v) { return v > 0 ? v : slope * v; },
      [slope](Real v, Real) { return v > 0 ? Real(1) : slope; });
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      "softplus", x, [](Real v) { return std::max(v, Real(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](Real v, Real) { return Real(1) / (Real(1) + std::exp(-v)); });
}

Tensor clamp(const Tensor& x, Real lo, Real hi) {
  require(lo <= hi, "clamp bounds out of order");
  return unary_op(
      "clamp", x, [lo, hi](Real v) { return std::clamp(v, lo, hi); },
      [lo, hi](Real v, Real) { return (v > lo && v < hi) ? Real(1) : Real(0); });
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  require(pred.shape() == target.shape(),
          "mse_loss shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  return mean(square(sub(pred, target)));
}

}  // namespace wldm
