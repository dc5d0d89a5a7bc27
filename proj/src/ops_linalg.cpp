#include <algorithm>
#include <cmath>
#include <numbers>

#include "blas.hpp"
#include "wldm/ops.hpp"

namespace wldm {

namespace {

using detail::grad_sink;
using detail::make_result;

// Maps each output batch index to (a batch, b batch) under broadcasting.
std::vector<std::pair<std::int64_t, std::int64_t>> batch_pairs(const Shape& ba, const Shape& bb, Shape& out) {
  const std::size_t nd = std::max(ba.size(), bb.size());
  out.assign(nd, 1);
  std::vector<std::int64_t> ea(nd, 1), eb(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    if (i + ba.size() >= nd) ea[i] = ba[i + ba.size() - nd];
    if (i + bb.size() >= nd) eb[i] = bb[i + bb.size() - nd];
    if (ea[i] != eb[i] && ea[i] != 1 && eb[i] != 1)
      contract_fail("matmul batch dims not broadcastable: " + shape_str(ba) + " vs " + shape_str(bb));
    out[i] = std::max(ea[i], eb[i]);
  }
  const std::int64_t n = numel_of(out);
  std::vector<std::pair<std::int64_t, std::int64_t>> pairs(n);
  std::vector<std::int64_t> idx(nd, 0);
  for (std::int64_t o = 0; o < n; ++o) {
    std::int64_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < nd; ++i) {
      ia = ia * ea[i] + (ea[i] == 1 ? 0 : idx[i]);
      ib = ib * eb[i] + (eb[i] == 1 ? 0 : idx[i]);
    }
    pairs[o] = {ia, ib};
    for (std::size_t ax = nd; ax-- > 0;) {
      if (++idx[ax] < out[ax]) break;
      idx[ax] = 0;
    }
  }
  return pairs;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() >= 2 && b.ndim() >= 2, "matmul needs rank >= 2 operands");
  const auto m = a.dim(-2), k = a.dim(-1);
  const auto k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2)
    contract_fail("matmul inner dimension mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Shape ba(a.shape().begin(), a.shape().end() - 2);
  Shape bb(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  auto pairs = batch_pairs(ba, bb, batch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<Real> out(numel_of(out_shape));
  const Real* xa = a.data().data();
  const Real* xb = b.data().data();
  for (std::size_t o = 0; o < pairs.size(); ++o)
    blas::gemm(false, false, m, n, k, Real(1), xa + pairs[o].first * m * k, k, xb + pairs[o].second * k * n, n,
               Real(0), out.data() + o * m * n, n);
  auto pa = a.impl_ptr();
  auto pb = b.impl_ptr();
  return make_result("matmul", out_shape, std::move(out), {a, b},
                     [pa, pb, pairs = std::move(pairs), m, n, k](const TensorImpl& res) {
                       auto ga = grad_sink(pa);
                       auto gb = grad_sink(pb);
                       const Real* g = res.grad.data();
                       for (std::size_t o = 0; o < pairs.size(); ++o) {
                         const auto [ia, ib] = pairs[o];
                         if (!ga.empty())
                           blas::gemm(false, true, m, k, n, Real(1), g + o * m * n, n, pb->data.data() + ib * k * n,
                                      n, Real(1), ga.data() + ia * m * k, k);
                         if (!gb.empty())
                           blas::gemm(true, false, k, n, m, Real(1), pa->data.data() + ia * m * k, k, g + o * m * n,
                                      n, Real(1), gb.data() + ib * k * n, n);
                       }
                     });
}

Tensor softmax(const Tensor& x, std::int64_t axis) {
  const auto nd = x.ndim();
  if (axis < 0) axis += nd;
  require(axis >= 0 && axis < nd, "softmax axis out of range for " + shape_str(x.shape()));
  std::int64_t outer = 1, inner = 1;
  const std::int64_t extent = x.shape()[axis];
  for (std::int64_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::int64_t i = axis + 1; i < nd; ++i) inner *= x.shape()[i];
  const auto xs = x.data();
  std::vector<Real> out(xs.size());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * extent * inner + i;
      Real mx = xs[base];
      for (std::int64_t e = 1; e < extent; ++e) mx = std::max(mx, xs[base + e * inner]);
      double total = 0;
      for (std::int64_t e = 0; e < extent; ++e) {
        const double v = std::exp(static_cast<double>(xs[base + e * inner]) - mx);
        out[base + e * inner] = static_cast<Real>(v);
        total += v;
      }
      for (std::int64_t e = 0; e < extent; ++e)
        out[base + e * inner] = static_cast<Real>(out[base + e * inner] / total);
    }
  auto px = x.impl_ptr();
  return make_result("softmax", x.shape(), std::move(out), {x}, [px, outer, inner, extent](const TensorImpl& res) {
    auto gx = grad_sink(px);
    if (gx.empty()) return;
    const auto& y = res.data;
    const auto& g = res.grad;
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * extent * inner + i;
        double dot = 0;
        for (std::int64_t e = 0; e < extent; ++e) dot += static_cast<double>(g[base + e * inner]) * y[base + e * inner];
        for (std::int64_t e = 0; e < extent; ++e) {
          const auto j = base + e * inner;
          gx[j] += static_cast<Real>(y[j] * (g[j] - dot));
        }
      }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  auto y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

Tensor timestep_embedding(const std::vector<int>& timesteps, std::int64_t dim) {
  require(dim >= 2 && dim % 2 == 0, "timestep embedding dim must be even");
  const std::int64_t half = dim / 2;
  std::vector<Real> out(timesteps.size() * dim);
  for (std::size_t j = 0; j < timesteps.size(); ++j)
    for (std::int64_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(timesteps[j]) * freq;
      out[j * dim + i] = static_cast<Real>(std::sin(arg));
      out[j * dim + half + i] = static_cast<Real>(std::cos(arg));
    }
  return Tensor::from({static_cast<std::int64_t>(timesteps.size()), dim}, std::move(out));
}

}  // namespace wldm
