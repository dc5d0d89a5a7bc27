#include <algorithm>

#include "blas.hpp"
#include "wldm/ops.hpp"

namespace wldm {

namespace {

using detail::grad_sink;
using detail::make_result;

struct ConvGeometry {
  std::int64_t n, c, d, h, w;
  std::int64_t f, k, stride, pad, groups;
  std::int64_t od, oh, ow;
  std::int64_t cg() const { return c / groups; }
  std::int64_t fg() const { return f / groups; }
  std::int64_t in_plane() const { return d * h * w; }
  std::int64_t out_plane() const { return od * oh * ow; }
  std::int64_t rows() const { return cg() * k * k * k; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// Valid output index range [lo, hi) along one axis for kernel tap `tap`.
std::pair<std::int64_t, std::int64_t> valid_range(std::int64_t out, std::int64_t in, std::int64_t tap,
                                                  std::int64_t stride, std::int64_t pad) {
  // in-coordinate = o * stride - pad + tap must lie in [0, in)
  std::int64_t lo = 0;
  while (lo < out && lo * stride - pad + tap < 0) ++lo;
  std::int64_t hi = out;
  while (hi > lo && (hi - 1) * stride - pad + tap >= in) --hi;
  return {lo, hi};
}

// col[row, p] for one (sample, group) slab of Cg channels.
void im2col(const ConvGeometry& g, const Real* x, Real* col) {
  const std::int64_t k = g.k, P = g.out_plane();
  for (std::int64_t c = 0; c < g.cg(); ++c)
    for (std::int64_t kd = 0; kd < k; ++kd)
      for (std::int64_t kh = 0; kh < k; ++kh)
        for (std::int64_t kw = 0; kw < k; ++kw) {
          Real* row = col + (((c * k + kd) * k + kh) * k + kw) * P;
          const auto [wlo, whi] = valid_range(g.ow, g.w, kw, g.stride, g.pad);
          for (std::int64_t od = 0; od < g.od; ++od) {
            const std::int64_t id = od * g.stride - g.pad + kd;
            for (std::int64_t oh = 0; oh < g.oh; ++oh) {
              const std::int64_t ih = oh * g.stride - g.pad + kh;
              Real* dst = row + (od * g.oh + oh) * g.ow;
              if (id < 0 || id >= g.d || ih < 0 || ih >= g.h) {
                std::fill_n(dst, g.ow, Real(0));
                continue;
              }
              const Real* src = x + (c * g.d + id) * g.h * g.w + ih * g.w;
              std::fill_n(dst, wlo, Real(0));
              for (std::int64_t ow = wlo; ow < whi; ++ow) dst[ow] = src[ow * g.stride - g.pad + kw];
              std::fill(dst + whi, dst + g.ow, Real(0));
            }
          }
        }
}

void col2im(const ConvGeometry& g, const Real* col, Real* x) {
  const std::int64_t k = g.k, P = g.out_plane();
  for (std::int64_t c = 0; c < g.cg(); ++c)
    for (std::int64_t kd = 0; kd < k; ++kd)
      for (std::int64_t kh = 0; kh < k; ++kh)
        for (std::int64_t kw = 0; kw < k; ++kw) {
          const Real* row = col + (((c * k + kd) * k + kh) * k + kw) * P;
          const auto [wlo, whi] = valid_range(g.ow, g.w, kw, g.stride, g.pad);
          for (std::int64_t od = 0; od < g.od; ++od) {
            const std::int64_t id = od * g.stride - g.pad + kd;
            if (id < 0 || id >= g.d) continue;
            for (std::int64_t oh = 0; oh < g.oh; ++oh) {
              const std::int64_t ih = oh * g.stride - g.pad + kh;
              if (ih < 0 || ih >= g.h) continue;
              const Real* src = row + (od * g.oh + oh) * g.ow;
              Real* dst = x + (c * g.d + id) * g.h * g.w + ih * g.w;
              for (std::int64_t ow = wlo; ow < whi; ++ow) dst[ow * g.stride - g.pad + kw] += src[ow];
            }
          }
        }
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, Conv3dOptions opts) {
  require(input.ndim() == 5, "conv3d input must be [N,C,D,H,W], got " + shape_str(input.shape()));
  require(weight.ndim() == 5, "conv3d weight must be [F,C/g,k,k,k], got " + shape_str(weight.shape()));
  require(opts.groups >= 1 && opts.stride >= 1 && opts.padding >= 0, "conv3d options out of range");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.d = input.dim(2);
  g.h = input.dim(3);
  g.w = input.dim(4);
  g.f = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = opts.stride;
  g.pad = opts.padding;
  g.groups = opts.groups;
  if (g.c % g.groups != 0)
    contract_fail("conv3d: input channels C=" + std::to_string(g.c) + " not divisible by groups=" +
                  std::to_string(g.groups));
  if (g.f % g.groups != 0)
    contract_fail("conv3d: output channels F=" + std::to_string(g.f) + " not divisible by groups=" +
                  std::to_string(g.groups));
  if (weight.dim(1) != g.cg())
    contract_fail("conv3d: weight dim 1 is " + std::to_string(weight.dim(1)) + ", expected C/groups=" +
                  std::to_string(g.cg()));
  if (weight.dim(3) != g.k || weight.dim(4) != g.k) contract_fail("conv3d: kernel must be cubic");
  if (g.k % 2 == 0) contract_fail("conv3d: kernel size k=" + std::to_string(g.k) + " must be odd");
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != g.f))
    contract_fail("conv3d: bias must be [F], got " + shape_str(bias.shape()));
  auto out_extent = [&](std::int64_t e, const char* axis) {
    const std::int64_t span = e + 2 * g.pad - g.k;
    if (span < 0) contract_fail(std::string("conv3d: kernel larger than padded input along ") + axis);
    return span / g.stride + 1;
  };
  g.od = out_extent(g.d, "D");
  g.oh = out_extent(g.h, "H");
  g.ow = out_extent(g.w, "W");

  const std::int64_t P = g.out_plane(), K = g.rows(), Fg = g.fg();
  std::vector<Real> out(g.n * g.f * P);
  std::vector<Real> col(g.pointwise() ? 0 : K * P);
  const Real* xs = input.data().data();
  const Real* ws = weight.data().data();
  for (std::int64_t n = 0; n < g.n; ++n)
    for (std::int64_t gi = 0; gi < g.groups; ++gi) {
      const Real* x_slab = xs + (n * g.c + gi * g.cg()) * g.in_plane();
      const Real* cols = x_slab;
      if (!g.pointwise()) {
        im2col(g, x_slab, col.data());
        cols = col.data();
      }
      blas::gemm(false, false, Fg, P, K, Real(1), ws + gi * Fg * K, K, cols, P, Real(0),
                 out.data() + (n * g.f + gi * Fg) * P, P);
    }
  if (bias.defined()) {
    const auto bs = bias.data();
    for (std::int64_t n = 0; n < g.n; ++n)
      for (std::int64_t f = 0; f < g.f; ++f) {
        Real* o = out.data() + (n * g.f + f) * P;
        for (std::int64_t p = 0; p < P; ++p) o[p] += bs[f];
      }
  }

  auto pin = input.impl_ptr();
  auto pw = weight.impl_ptr();
  auto pb = bias.defined() ? bias.impl_ptr() : nullptr;
  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result("conv3d", {g.n, g.f, g.od, g.oh, g.ow}, std::move(out), inputs,
                     [g, pin, pw, pb](const TensorImpl& res) {
                       const std::int64_t P = g.out_plane(), K = g.rows(), Fg = g.fg();
                       auto gx = grad_sink(pin);
                       auto gw = grad_sink(pw);
                       const Real* gout = res.grad.data();
                       if (pb) {
                         auto gb = grad_sink(pb);
                         if (!gb.empty())
                           for (std::int64_t n = 0; n < g.n; ++n)
                             for (std::int64_t f = 0; f < g.f; ++f) {
                               const Real* o = gout + (n * g.f + f) * P;
                               double acc = 0;
                               for (std::int64_t p = 0; p < P; ++p) acc += o[p];
                               gb[f] += static_cast<Real>(acc);
                             }
                       }
                       if (gx.empty() && gw.empty()) return;
                       std::vector<Real> col(g.pointwise() ? 0 : K * P);
                       std::vector<Real> gcol(g.pointwise() || gx.empty() ? 0 : K * P);
                       for (std::int64_t n = 0; n < g.n; ++n)
                         for (std::int64_t gi = 0; gi < g.groups; ++gi) {
                           const Real* go = gout + (n * g.f + gi * Fg) * P;
                           const Real* wg = pw->data.data() + gi * Fg * K;
                           const std::int64_t slab = (n * g.c + gi * g.cg()) * g.in_plane();
                           if (!gw.empty()) {
                             const Real* cols = pin->data.data() + slab;
                             if (!g.pointwise()) {
                               im2col(g, cols, col.data());
                               cols = col.data();
                             }
                             blas::gemm(false, true, Fg, K, P, Real(1), go, P, cols, P, Real(1), gw.data() + gi * Fg * K,
                                        K);
                           }
                           if (!gx.empty()) {
                             if (g.pointwise()) {
                               blas::gemm(true, false, K, P, Fg, Real(1), wg, K, go, P, Real(1), gx.data() + slab, P);
                             } else {
                               blas::gemm(true, false, K, P, Fg, Real(1), wg, K, go, P, Real(0), gcol.data(), P);
                               col2im(g, gcol.data(), gx.data() + slab);
                             }
                           }
                         }
                     });
}

}  // namespace wldm
