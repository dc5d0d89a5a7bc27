#include "wldm/wavelet3d.hpp"

#include <cmath>

#include "wldm/ops.hpp"

namespace wldm {

namespace {

using detail::grad_sink;
using detail::make_result;

// Strided 1-D line view: element i lives at base[i * stride].
struct Line {
  std::int64_t length;
  std::int64_t stride;
};

// Analysis along one axis with periodic extension:
//   lo[i] = sum_k h[k] x[(2i + k) mod n],  hi[i] = sum_k g[k] x[(2i + k) mod n]
// Output halves are written as lo at [0, n/2) and hi at [n/2, n).
void analyze(const FilterBank& fb, const Real* in, Real* out, Line line, std::vector<double>& tmp) {
  const std::int64_t n = line.length, half = n / 2;
  tmp.assign(n, 0.0);
  for (std::int64_t i = 0; i < half; ++i) {
    double lo = 0, hi = 0;
    for (std::size_t k = 0; k < fb.low.size(); ++k) {
      const double v = in[((2 * i + static_cast<std::int64_t>(k)) % n) * line.stride];
      lo += fb.low[k] * v;
      hi += fb.high[k] * v;
    }
    tmp[i] = lo;
    tmp[half + i] = hi;
  }
  for (std::int64_t i = 0; i < n; ++i) out[i * line.stride] = static_cast<Real>(tmp[i]);
}

// Adjoint (= inverse, the bank is orthonormal) of `analyze`.
void synthesize(const FilterBank& fb, const Real* in, Real* out, Line line, std::vector<double>& tmp) {
  const std::int64_t n = line.length, half = n / 2;
  tmp.assign(n, 0.0);
  for (std::int64_t i = 0; i < half; ++i) {
    const double lo = in[i * line.stride];
    const double hi = in[(half + i) * line.stride];
    for (std::size_t k = 0; k < fb.low.size(); ++k)
      tmp[(2 * i + static_cast<std::int64_t>(k)) % n] += fb.low[k] * lo + fb.high[k] * hi;
  }
  for (std::int64_t i = 0; i < n; ++i) out[i * line.stride] = static_cast<Real>(tmp[i]);
}

// Applies `f` in place to every line of a [D,H,W] volume along `axis`.
template <class F>
void each_line(Real* vol, std::int64_t D, std::int64_t H, std::int64_t W, int axis, F f) {
  if (axis == 0) {
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w) f(vol + h * W + w, Line{D, H * W});
  } else if (axis == 1) {
    for (std::int64_t d = 0; d < D; ++d)
      for (std::int64_t w = 0; w < W; ++w) f(vol + d * H * W + w, Line{H, W});
  } else {
    for (std::int64_t d = 0; d < D; ++d)
      for (std::int64_t h = 0; h < H; ++h) f(vol + (d * H + h) * W, Line{W, 1});
  }
}

// Per channel: in-place separable transform producing the "quadrant" layout
// (band bits select the half of each axis), then regroup into the band stack
// [8, D/2, H/2, W/2].
void forward_volume(const FilterBank& fb, const Real* in, Real* bands, std::int64_t D, std::int64_t H,
                    std::int64_t W, std::vector<Real>& work, std::vector<double>& tmp) {
  const std::int64_t n = D * H * W;
  work.assign(in, in + n);
  for (int axis = 0; axis < 3; ++axis)
    each_line(work.data(), D, H, W, axis,
              [&](Real* base, Line line) { analyze(fb, base, base, line, tmp); });
  const std::int64_t d2 = D / 2, h2 = H / 2, w2 = W / 2;
  for (int b = 0; b < 8; ++b) {
    const std::int64_t od = (b >> 2) & 1, oh = (b >> 1) & 1, ow = b & 1;
    Real* dst = bands + b * d2 * h2 * w2;
    for (std::int64_t d = 0; d < d2; ++d)
      for (std::int64_t h = 0; h < h2; ++h)
        for (std::int64_t w = 0; w < w2; ++w)
          dst[(d * h2 + h) * w2 + w] = work[((od * d2 + d) * H + oh * h2 + h) * W + ow * w2 + w];
  }
}

void inverse_volume(const FilterBank& fb, const Real* bands, Real* out, std::int64_t D, std::int64_t H,
                    std::int64_t W, std::vector<double>& tmp) {
  const std::int64_t d2 = D / 2, h2 = H / 2, w2 = W / 2;
  for (int b = 0; b < 8; ++b) {
    const std::int64_t od = (b >> 2) & 1, oh = (b >> 1) & 1, ow = b & 1;
    const Real* src = bands + b * d2 * h2 * w2;
    for (std::int64_t d = 0; d < d2; ++d)
      for (std::int64_t h = 0; h < h2; ++h)
        for (std::int64_t w = 0; w < w2; ++w)
          out[((od * d2 + d) * H + oh * h2 + h) * W + ow * w2 + w] = src[(d * h2 + h) * w2 + w];
  }
  for (int axis = 2; axis >= 0; --axis)
    each_line(out, D, H, W, axis, [&](Real* base, Line line) { synthesize(fb, base, base, line, tmp); });
}

// Whole-tensor kernels between [N,C,D,H,W] and the band stack [N,C,8,d,h,w].
std::vector<Real> analyze_all(const FilterBank& fb, std::span<const Real> x, std::int64_t NC, std::int64_t D,
                              std::int64_t H, std::int64_t W) {
  const std::int64_t n = D * H * W;
  std::vector<Real> out(NC * n), work;
  std::vector<double> tmp;
  for (std::int64_t c = 0; c < NC; ++c) forward_volume(fb, x.data() + c * n, out.data() + c * n, D, H, W, work, tmp);
  return out;
}

std::vector<Real> synthesize_all(const FilterBank& fb, std::span<const Real> bands, std::int64_t NC,
                                 std::int64_t D, std::int64_t H, std::int64_t W) {
  const std::int64_t n = D * H * W;
  std::vector<Real> out(NC * n);
  std::vector<double> tmp;
  for (std::int64_t c = 0; c < NC; ++c) inverse_volume(fb, bands.data() + c * n, out.data() + c * n, D, H, W, tmp);
  return out;
}

// [N,C,D,H,W] -> [N,C,8,D/2,H/2,W/2]
Tensor band_stack(const Tensor& x, WaveletFamily family) {
  require(x.ndim() == 5, "dwt3 expects [N,C,D,H,W], got " + shape_str(x.shape()));
  const std::int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  if (D % 2 || H % 2 || W % 2)
    contract_fail("dwt3: odd spatial extent in " + shape_str(x.shape()) +
                  "; pad the volume to even D, H, W before transforming");
  auto fb = filter_bank(family);
  auto out = analyze_all(fb, x.data(), N * C, D, H, W);
  auto px = x.impl_ptr();
  return make_result("dwt3", {N, C, 8, D / 2, H / 2, W / 2}, std::move(out), {x},
                     [=](const TensorImpl& res) {
                       auto gx = grad_sink(px);
                       if (gx.empty()) return;
                       auto back = synthesize_all(fb, res.grad, N * C, D, H, W);
                       for (std::size_t i = 0; i < back.size(); ++i) gx[i] += back[i];
                     });
}

// [N,C,8,d,h,w] -> [N,C,2d,2h,2w]
Tensor unstack(const Tensor& s, WaveletFamily family) {
  const std::int64_t N = s.dim(0), C = s.dim(1), D = 2 * s.dim(3), H = 2 * s.dim(4), W = 2 * s.dim(5);
  auto fb = filter_bank(family);
  auto out = synthesize_all(fb, s.data(), N * C, D, H, W);
  auto ps = s.impl_ptr();
  return make_result("idwt3", {N, C, D, H, W}, std::move(out), {s}, [=](const TensorImpl& res) {
    auto gs = grad_sink(ps);
    if (gs.empty()) return;
    auto back = analyze_all(fb, res.grad, N * C, D, H, W);
    for (std::size_t i = 0; i < back.size(); ++i) gs[i] += back[i];
  });
}

}  // namespace

FilterBank filter_bank(WaveletFamily family) {
  FilterBank fb;
  if (family == WaveletFamily::Haar) {
    const double r = 1.0 / std::sqrt(2.0);
    fb.low = {r, r};
    fb.high = {r, -r};
  } else {
    const double s3 = std::sqrt(3.0), den = 4.0 * std::sqrt(2.0);
    fb.low = {(1 + s3) / den, (3 + s3) / den, (3 - s3) / den, (1 - s3) / den};
    // quadrature mirror: g[k] = (-1)^k h[L-1-k]
    fb.high = {fb.low[3], -fb.low[2], fb.low[1], -fb.low[0]};
  }
  return fb;
}

SubBands dwt3(const Tensor& x, WaveletFamily family) {
  auto stack = band_stack(x, family);
  const std::int64_t N = x.dim(0), C = x.dim(1), d = x.dim(2) / 2, h = x.dim(3) / 2, w = x.dim(4) / 2;
  SubBands out;
  out.lll = reshape(slice(stack, 2, 0, 1), {N, C, d, h, w});
  out.detail = reshape(slice(stack, 2, 1, 7), {N, 7 * C, d, h, w});
  return out;
}

Tensor idwt3(const SubBands& bands, WaveletFamily family) {
  const Tensor& lll = bands.lll;
  const Tensor& det = bands.detail;
  require(lll.ndim() == 5 && det.ndim() == 5, "idwt3 expects 5-D sub-bands");
  const std::int64_t N = lll.dim(0), C = lll.dim(1), d = lll.dim(2), h = lll.dim(3), w = lll.dim(4);
  if (det.dim(1) != 7 * C)
    contract_fail("idwt3: detail has " + std::to_string(det.dim(1)) + " channels, expected 7 x " +
                  std::to_string(C));
  if (det.dim(0) != N || det.dim(2) != d || det.dim(3) != h || det.dim(4) != w)
    contract_fail("idwt3: detail geometry " + shape_str(det.shape()) + " does not match lll " +
                  shape_str(lll.shape()));
  auto stack = concat({reshape(lll, {N, C, 1, d, h, w}), reshape(det, {N, C, 7, d, h, w})}, 2);
  return unstack(stack, family);
}

}  // namespace wldm
