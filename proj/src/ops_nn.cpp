#include <algorithm>
#include <cmath>

#include "wldm/ops.hpp"

namespace wldm {

namespace {

using detail::grad_sink;
using detail::make_result;

void require_volume(const Tensor& x, const char* op) {
  require(x.ndim() == 5, std::string(op) + " expects [N,C,D,H,W], got " + shape_str(x.shape()));
}

// Per-axis linear interpolation taps (align_corners = false, edge clamped).
struct Taps {
  std::vector<std::int64_t> i0, i1;
  std::vector<Real> frac;
};

Taps make_taps(std::int64_t in, std::int64_t out) {
  Taps t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.frac.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::int64_t>(std::floor(src));
    lo = std::min(lo, in - 1);
    t.i0[o] = lo;
    t.i1[o] = std::min(lo + 1, in - 1);
    t.frac[o] = static_cast<Real>(src - static_cast<double>(lo));
  }
  return t;
}

}  // namespace

Tensor group_norm(const Tensor& x, std::int64_t groups, const Tensor& gamma, const Tensor& beta, Real eps) {
  require(x.ndim() >= 2, "group_norm expects [N,C,...]");
  const std::int64_t N = x.dim(0), C = x.dim(1);
  if (groups < 1 || C % groups != 0)
    contract_fail("group_norm: channels C=" + std::to_string(C) + " not divisible by groups=" +
                  std::to_string(groups));
  if (gamma.defined()) require(gamma.ndim() == 1 && gamma.dim(0) == C, "group_norm gamma must be [C]");
  if (beta.defined()) require(beta.ndim() == 1 && beta.dim(0) == C, "group_norm beta must be [C]");
  const std::int64_t spatial = x.numel() / (N * C);
  const std::int64_t cpg = C / groups;
  const std::int64_t M = cpg * spatial;
  std::vector<Real> mu(N * groups), rstd(N * groups);
  std::vector<Real> out(x.numel());
  const auto xs = x.data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t gi = 0; gi < groups; ++gi) {
      const std::int64_t base = (n * C + gi * cpg) * spatial;
      double s = 0;
      for (std::int64_t i = 0; i < M; ++i) s += xs[base + i];
      const double m = s / static_cast<double>(M);
      double v = 0;
      for (std::int64_t i = 0; i < M; ++i) {
        const double dlt = xs[base + i] - m;
        v += dlt * dlt;
      }
      v /= static_cast<double>(M);
      const double r = 1.0 / std::sqrt(v + static_cast<double>(eps));
      mu[n * groups + gi] = static_cast<Real>(m);
      rstd[n * groups + gi] = static_cast<Real>(r);
      for (std::int64_t c = 0; c < cpg; ++c) {
        const std::int64_t ch = gi * cpg + c;
        const Real ga = gamma.defined() ? gamma.data()[ch] : Real(1);
        const Real be = beta.defined() ? beta.data()[ch] : Real(0);
        for (std::int64_t s2 = 0; s2 < spatial; ++s2) {
          const std::int64_t j = base + c * spatial + s2;
          out[j] = static_cast<Real>((xs[j] - m) * r) * ga + be;
        }
      }
    }
  auto px = x.impl_ptr();
  auto pg = gamma.defined() ? gamma.impl_ptr() : nullptr;
  auto pb = beta.defined() ? beta.impl_ptr() : nullptr;
  std::vector<Tensor> inputs{x};
  if (gamma.defined()) inputs.push_back(gamma);
  if (beta.defined()) inputs.push_back(beta);
  return make_result("group_norm", x.shape(), std::move(out), inputs,
                     [=, mu = std::move(mu), rstd = std::move(rstd)](const TensorImpl& res) {
                       auto gx = grad_sink(px);
                       std::span<Real> ggam = pg ? grad_sink(pg) : std::span<Real>{};
                       std::span<Real> gbet = pb ? grad_sink(pb) : std::span<Real>{};
                       const auto& xs = px->data;
                       const auto& gy = res.grad;
                       std::vector<double> xhat(M), gxh(M);
                       for (std::int64_t n = 0; n < N; ++n)
                         for (std::int64_t gi = 0; gi < groups; ++gi) {
                           const std::int64_t base = (n * C + gi * cpg) * spatial;
                           const double m = mu[n * groups + gi];
                           const double r = rstd[n * groups + gi];
                           double mean_g = 0, mean_gx = 0;
                           for (std::int64_t c = 0; c < cpg; ++c) {
                             const std::int64_t ch = gi * cpg + c;
                             const double ga = pg ? pg->data[ch] : 1.0;
                             double sg = 0, sgx = 0;
                             for (std::int64_t s2 = 0; s2 < spatial; ++s2) {
                               const std::int64_t i = c * spatial + s2;
                               xhat[i] = (xs[base + i] - m) * r;
                               gxh[i] = gy[base + i] * ga;
                               mean_g += gxh[i];
                               mean_gx += gxh[i] * xhat[i];
                               sg += gy[base + i];
                               sgx += gy[base + i] * xhat[i];
                             }
                             if (!ggam.empty()) ggam[ch] += static_cast<Real>(sgx);
                             if (!gbet.empty()) gbet[ch] += static_cast<Real>(sg);
                           }
                           if (gx.empty()) continue;
                           mean_g /= static_cast<double>(M);
                           mean_gx /= static_cast<double>(M);
                           for (std::int64_t i = 0; i < M; ++i)
                             gx[base + i] += static_cast<Real>(r * (gxh[i] - mean_g - xhat[i] * mean_gx));
                         }
                     });
}

Tensor upsample_nearest(const Tensor& x, std::int64_t factor) {
  require_volume(x, "upsample_nearest");
  require(factor >= 1, "upsample factor must be >= 1");
  const std::int64_t NC = x.dim(0) * x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::int64_t OD = D * factor, OH = H * factor, OW = W * factor;
  std::vector<Real> out(NC * OD * OH * OW);
  const auto xs = x.data();
  for (std::int64_t c = 0; c < NC; ++c)
    for (std::int64_t d = 0; d < OD; ++d)
      for (std::int64_t h = 0; h < OH; ++h)
        for (std::int64_t w = 0; w < OW; ++w)
          out[((c * OD + d) * OH + h) * OW + w] = xs[((c * D + d / factor) * H + h / factor) * W + w / factor];
  auto px = x.impl_ptr();
  return make_result("upsample_nearest", {x.dim(0), x.dim(1), OD, OH, OW}, std::move(out), {x},
                     [=](const TensorImpl& res) {
                       auto gx = grad_sink(px);
                       if (gx.empty()) return;
                       for (std::int64_t c = 0; c < NC; ++c)
                         for (std::int64_t d = 0; d < OD; ++d)
                           for (std::int64_t h = 0; h < OH; ++h)
                             for (std::int64_t w = 0; w < OW; ++w)
                               gx[((c * D + d / factor) * H + h / factor) * W + w / factor] +=
                                   res.grad[((c * OD + d) * OH + h) * OW + w];
                     });
}

Tensor resize_trilinear(const Tensor& x, const std::array<std::int64_t, 3>& size) {
  require_volume(x, "resize_trilinear");
  require(size[0] > 0 && size[1] > 0 && size[2] > 0, "resize target must be positive");
  const std::int64_t NC = x.dim(0) * x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const auto [OD, OH, OW] = size;
  const Taps td = make_taps(D, OD), th = make_taps(H, OH), tw = make_taps(W, OW);
  std::vector<Real> out(NC * OD * OH * OW);
  const auto xs = x.data();
  for (std::int64_t c = 0; c < NC; ++c) {
    const Real* src = xs.data() + c * D * H * W;
    for (std::int64_t d = 0; d < OD; ++d)
      for (std::int64_t h = 0; h < OH; ++h)
        for (std::int64_t w = 0; w < OW; ++w) {
          const Real fd = td.frac[d], fh = th.frac[h], fw = tw.frac[w];
          auto at = [&](std::int64_t a, std::int64_t b, std::int64_t e) { return src[(a * H + b) * W + e]; };
          const Real c00 = at(td.i0[d], th.i0[h], tw.i0[w]) * (1 - fw) + at(td.i0[d], th.i0[h], tw.i1[w]) * fw;
          const Real c01 = at(td.i0[d], th.i1[h], tw.i0[w]) * (1 - fw) + at(td.i0[d], th.i1[h], tw.i1[w]) * fw;
          const Real c10 = at(td.i1[d], th.i0[h], tw.i0[w]) * (1 - fw) + at(td.i1[d], th.i0[h], tw.i1[w]) * fw;
          const Real c11 = at(td.i1[d], th.i1[h], tw.i0[w]) * (1 - fw) + at(td.i1[d], th.i1[h], tw.i1[w]) * fw;
          const Real c0 = c00 * (1 - fh) + c01 * fh;
          const Real c1 = c10 * (1 - fh) + c11 * fh;
          out[((c * OD + d) * OH + h) * OW + w] = c0 * (1 - fd) + c1 * fd;
        }
  }
  auto px = x.impl_ptr();
  return make_result("resize_trilinear", {x.dim(0), x.dim(1), OD, OH, OW}, std::move(out), {x},
                     [=](const TensorImpl& res) {
                       auto gx = grad_sink(px);
                       if (gx.empty()) return;
                       for (std::int64_t c = 0; c < NC; ++c) {
                         Real* dst = gx.data() + c * D * H * W;
                         for (std::int64_t d = 0; d < OD; ++d)
                           for (std::int64_t h = 0; h < OH; ++h)
                             for (std::int64_t w = 0; w < OW; ++w) {
                               const Real g = res.grad[((c * OD + d) * OH + h) * OW + w];
                               const Real fd = td.frac[d], fh = th.frac[h], fw = tw.frac[w];
                               const std::int64_t ds[2] = {td.i0[d], td.i1[d]};
                               const std::int64_t hs[2] = {th.i0[h], th.i1[h]};
                               const std::int64_t ws[2] = {tw.i0[w], tw.i1[w]};
                               const Real wd[2] = {1 - fd, fd}, wh[2] = {1 - fh, fh}, ww[2] = {1 - fw, fw};
                               for (int a = 0; a < 2; ++a)
                                 for (int b = 0; b < 2; ++b)
                                   for (int e = 0; e < 2; ++e)
                                     dst[(ds[a] * H + hs[b]) * W + ws[e]] += g * wd[a] * wh[b] * ww[e];
                             }
                       }
                     });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, bool* degenerate) {
  require(a.shape() == b.shape(),
          "cosine_similarity shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  constexpr double kFloor = 1e-8;
  const auto xa = a.data();
  const auto xb = b.data();
  double dot = 0, na2 = 0, nb2 = 0;
  for (std::size_t i = 0; i < xa.size(); ++i) {
    dot += static_cast<double>(xa[i]) * xb[i];
    na2 += static_cast<double>(xa[i]) * xa[i];
    nb2 += static_cast<double>(xb[i]) * xb[i];
  }
  const double raw = std::sqrt(na2) * std::sqrt(nb2);
  const bool floored = raw < kFloor;
  const double denom = floored ? kFloor : raw;
  const double cosv = dot / denom;
  if (degenerate) *degenerate = floored;
  auto pa = a.impl_ptr();
  auto pb = b.impl_ptr();
  return make_result("cosine_similarity", {}, {static_cast<Real>(cosv)}, {a, b},
                     [=](const TensorImpl& res) {
                       auto ga = grad_sink(pa);
                       auto gb = grad_sink(pb);
                       const double g = res.grad[0];
                       const auto& va = pa->data;
                       const auto& vb = pb->data;
                       for (std::size_t i = 0; i < va.size(); ++i) {
                         if (!ga.empty()) {
                           double d = vb[i] / denom;
                           if (!floored) d -= cosv * va[i] / na2;
                           ga[i] += static_cast<Real>(g * d);
                         }
                         if (!gb.empty()) {
                           double d = va[i] / denom;
                           if (!floored) d -= cosv * vb[i] / nb2;
                           gb[i] += static_cast<Real>(g * d);
                         }
                       }
                     });
}

}  // namespace wldm
