#include <algorithm>
#include <numeric>

#include "wldm/ops.hpp"

namespace wldm {

namespace {

using detail::grad_sink;
using detail::make_result;

std::int64_t normalize_axis(std::int64_t axis, std::int64_t ndim) {
  if (axis < 0) axis += ndim;
  require(axis >= 0 && axis < ndim, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(ndim));
  return axis;
}

// (outer, extent, inner) decomposition around one axis.
struct AxisSplit {
  std::int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::int64_t axis) {
  AxisSplit r;
  for (std::int64_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Tensor sum(const Tensor& x) {
  double acc = 0;
  for (Real v : x.data()) acc += v;
  auto px = x.impl_ptr();
  return make_result("sum", {}, {static_cast<Real>(acc)}, {x}, [px](const TensorImpl& res) {
    auto gx = grad_sink(px);
    if (gx.empty()) return;
    const Real g = res.grad[0];
    for (auto& v : gx) v += g;
  });
}

Tensor mean(const Tensor& x) {
  double acc = 0;
  for (Real v : x.data()) acc += v;
  const auto n = static_cast<double>(x.numel());
  auto px = x.impl_ptr();
  return make_result("mean", {}, {static_cast<Real>(acc / n)}, {x}, [px, n](const TensorImpl& res) {
    auto gx = grad_sink(px);
    if (gx.empty()) return;
    const Real g = static_cast<Real>(res.grad[0] / n);
    for (auto& v : gx) v += g;
  });
}

Tensor sum(const Tensor& x, std::int64_t axis, bool keepdim) {
  axis = normalize_axis(axis, x.ndim());
  const auto sp = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  if (keepdim)
    out_shape[axis] = 1;
  else
    out_shape.erase(out_shape.begin() + axis);
  std::vector<Real> out(sp.outer * sp.inner);
  const auto xs = x.data();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      double acc = 0;
      for (std::int64_t e = 0; e < sp.extent; ++e) acc += xs[(o * sp.extent + e) * sp.inner + i];
      out[o * sp.inner + i] = static_cast<Real>(acc);
    }
  auto px = x.impl_ptr();
  return make_result("sum_axis", out_shape, std::move(out), {x}, [px, sp](const TensorImpl& res) {
    auto gx = grad_sink(px);
    if (gx.empty()) return;
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t e = 0; e < sp.extent; ++e)
        for (std::int64_t i = 0; i < sp.inner; ++i) gx[(o * sp.extent + e) * sp.inner + i] += res.grad[o * sp.inner + i];
  });
}

Tensor mean(const Tensor& x, std::int64_t axis, bool keepdim) {
  const auto extent = x.dim(axis);
  return scale(sum(x, axis, keepdim), Real(1) / static_cast<Real>(extent));
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  require(numel_of(shape) == x.numel(),
          "reshape from " + shape_str(x.shape()) + " to " + shape_str(shape) + " changes element count");
  auto px = x.impl_ptr();
  return make_result("reshape", shape, std::vector<Real>(x.data().begin(), x.data().end()), {x},
                     [px](const TensorImpl& res) {
                       auto gx = grad_sink(px);
                       if (gx.empty()) return;
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += res.grad[i];
                     });
}

Tensor flatten(const Tensor& x) { return reshape(x, {x.numel()}); }

Tensor permute(const Tensor& x, const std::vector<std::int64_t>& order) {
  const auto nd = x.ndim();
  require(static_cast<std::int64_t>(order.size()) == nd, "permute order rank mismatch");
  std::vector<bool> used(nd, false);
  for (auto a : order) {
    require(a >= 0 && a < nd && !used[a], "permute order is not a permutation");
    used[a] = true;
  }
  const Shape& in = x.shape();
  std::vector<std::int64_t> in_strides(nd, 1);
  for (std::int64_t i = nd - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out_shape(nd);
  std::vector<std::int64_t> src_stride(nd);
  for (std::int64_t i = 0; i < nd; ++i) {
    out_shape[i] = in[order[i]];
    src_stride[i] = in_strides[order[i]];
  }
  // gather[o] = source offset of output element o
  const std::int64_t n = x.numel();
  std::vector<std::int64_t> gather(n);
  {
    std::vector<std::int64_t> idx(nd, 0);
    std::int64_t src = 0;
    for (std::int64_t o = 0; o < n; ++o) {
      gather[o] = src;
      for (std::int64_t ax = nd - 1; ax >= 0; --ax) {
        ++idx[ax];
        src += src_stride[ax];
        if (idx[ax] < out_shape[ax]) break;
        src -= src_stride[ax] * out_shape[ax];
        idx[ax] = 0;
      }
    }
  }
  std::vector<Real> out(n);
  const auto xs = x.data();
  for (std::int64_t o = 0; o < n; ++o) out[o] = xs[gather[o]];
  auto px = x.impl_ptr();
  return make_result("permute", out_shape, std::move(out), {x},
                     [px, gather = std::move(gather)](const TensorImpl& res) {
                       auto gx = grad_sink(px);
                       if (gx.empty()) return;
                       for (std::size_t o = 0; o < gather.size(); ++o) gx[gather[o]] += res.grad[o];
                     });
}

Tensor transpose_last(const Tensor& x) {
  const auto nd = x.ndim();
  require(nd >= 2, "transpose_last needs rank >= 2");
  std::vector<std::int64_t> order(nd);
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[nd - 1], order[nd - 2]);
  return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis) {
  require(!parts.empty(), "concat of zero tensors");
  const auto nd = parts[0].ndim();
  axis = normalize_axis(axis, nd);
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    require(p.ndim() == nd, "concat rank mismatch");
    for (std::int64_t i = 0; i < nd; ++i)
      if (i != axis && p.shape()[i] != parts[0].shape()[i])
        contract_fail("concat shape mismatch at axis " + std::to_string(i) + ": " + shape_str(p.shape()) +
                      " vs " + shape_str(parts[0].shape()));
    out_shape[axis] += p.shape()[axis];
  }
  const auto sp = split_at(out_shape, axis);
  std::vector<Real> out(numel_of(out_shape));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::int64_t block = p.shape()[axis] * sp.inner;
    const auto xs = p.data();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      std::copy_n(xs.begin() + o * block, block, out.begin() + o * sp.extent * sp.inner + off * sp.inner);
    off += p.shape()[axis];
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const auto& p : parts) impls.push_back(p.impl_ptr());
  return make_result("concat", out_shape, std::move(out), parts,
                     [impls, offsets, sp, axis](const TensorImpl& res) {
                       for (std::size_t k = 0; k < impls.size(); ++k) {
                         auto g = grad_sink(impls[k]);
                         if (g.empty()) continue;
                         const std::int64_t block = impls[k]->shape[axis] * sp.inner;
                         for (std::int64_t o = 0; o < sp.outer; ++o) {
                           const Real* src = res.grad.data() + o * sp.extent * sp.inner + offsets[k] * sp.inner;
                           Real* dst = g.data() + o * block;
                           for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Tensor slice(const Tensor& x, std::int64_t axis, std::int64_t start, std::int64_t length) {
  axis = normalize_axis(axis, x.ndim());
  require(start >= 0 && length > 0 && start + length <= x.shape()[axis],
          "slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range on axis " +
              std::to_string(axis) + " of " + shape_str(x.shape()));
  const auto sp = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<Real> out(numel_of(out_shape));
  const std::int64_t block = length * sp.inner;
  const auto xs = x.data();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    std::copy_n(xs.begin() + (o * sp.extent + start) * sp.inner, block, out.begin() + o * block);
  auto px = x.impl_ptr();
  return make_result("slice", out_shape, std::move(out), {x}, [px, sp, start, block](const TensorImpl& res) {
    auto gx = grad_sink(px);
    if (gx.empty()) return;
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      Real* dst = gx.data() + (o * sp.extent + start) * sp.inner;
      const Real* src = res.grad.data() + o * block;
      for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
    }
  });
}

std::vector<Tensor> split(const Tensor& x, std::int64_t axis, std::int64_t parts) {
  const auto extent = x.dim(axis);
  require(parts > 0 && extent % parts == 0,
          "cannot split extent " + std::to_string(extent) + " into " + std::to_string(parts) + " parts");
  std::vector<Tensor> out;
  const auto len = extent / parts;
  for (std::int64_t p = 0; p < parts; ++p) out.push_back(slice(x, axis, p * len, len));
  return out;
}

}  // namespace wldm
