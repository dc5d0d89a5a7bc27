#include "wldm/wavelet_blocks.hpp"

#include <numeric>

namespace wldm {

std::int64_t wrm_groups(std::int64_t channels) { return std::gcd(channels, std::int64_t{4}); }

bool supports_wrm(const Tensor& x) {
  return x.ndim() == 5 && x.dim(2) % 4 == 0 && x.dim(3) % 4 == 0 && x.dim(4) % 4 == 0;
}

WrmParams make_wrm(ParamStore& store, const std::string& name, std::int64_t channels, Rng& rng, WrmInit init,
                   WaveletFamily family) {
  const std::int64_t g = wrm_groups(channels);
  WrmParams p;
  p.primary_group = make_conv3d(store, name + "/primary_group", channels, channels, 3, rng, 1, g, init.grouped);
  p.primary_point = make_conv3d(store, name + "/primary_point", channels, channels, 1, rng, 1, 1, init.pointwise);
  p.h1_group = make_conv3d(store, name + "/h1_group", 7 * channels, 7 * channels, 3, rng, 1, g, init.grouped);
  p.l1_group = make_conv3d(store, name + "/l1_group", channels, channels, 3, rng, 1, g, init.grouped);
  p.l2_group = make_conv3d(store, name + "/l2_group", channels, channels, 3, rng, 1, g, init.grouped);
  p.h2_group = make_conv3d(store, name + "/h2_group", 7 * channels, 7 * channels, 3, rng, 1, g, init.grouped);
  p.fuse_point = make_conv3d(store, name + "/fuse_point", channels, channels, 1, rng, 1, 1, init.pointwise);
  p.family = family;
  return p;
}

Tensor wrm_forward(const Tensor& x, const WrmParams& p) {
  require(x.ndim() == 5, "wrm_forward expects [N,C,D,H,W], got " + shape_str(x.shape()));
  if (!supports_wrm(x))
    contract_fail("wrm_forward: spatial extents of " + shape_str(x.shape()) +
                  " must be divisible by 4 for two wavelet levels");
  require(x.dim(1) == p.primary_point.out_channels(), "wrm_forward: channel count does not match parameters");

  const Tensor primary = add(x, p.primary_point(p.primary_group(x)));

  const SubBands level1 = dwt3(x, p.family);
  const Tensor h1 = p.h1_group(level1.detail);
  const Tensor l1 = p.l1_group(level1.lll);

  const SubBands level2 = dwt3(level1.lll, p.family);
  const Tensor l1_deep = idwt3({p.l2_group(level2.lll), p.h2_group(level2.detail)}, p.family);

  const Tensor freq = idwt3({add(l1, l1_deep), h1}, p.family);
  return p.fuse_point(add(primary, freq));
}

WaveletBlockParams make_wavelet_block(ParamStore& store, const std::string& name, std::int64_t in, std::int64_t out,
                                      Rng& rng, const WaveletBlockOptions& opts) {
  WaveletBlockParams p;
  p.norm = make_group_norm(store, name + "/norm", in);
  p.conv = make_conv3d(store, name + "/conv", in, out, 3, rng, 1, 1, opts.conv_init);
  if (opts.time_dim > 0) p.time_proj = make_linear(store, name + "/time_proj", opts.time_dim, out, rng);
  if (opts.use_wrm) p.wrm = make_wrm(store, name + "/wrm", out, rng, opts.wrm_init);
  if (in != out) p.shortcut = make_conv3d(store, name + "/shortcut", in, out, 1, rng);
  return p;
}

Tensor wavelet_block(const Tensor& x, const WaveletBlockParams& p, const Tensor& time_embedding) {
  Tensor h = p.conv(silu(p.norm(x)));
  if (p.time_proj && time_embedding.defined()) {
    const Tensor t = (*p.time_proj)(time_embedding);  // [N, out]
    h = add(h, reshape(t, {t.dim(0), t.dim(1), 1, 1, 1}));
  }
  if (p.wrm && supports_wrm(h)) h = wrm_forward(h, *p.wrm);
  const Tensor skip = p.shortcut ? (*p.shortcut)(x) : x;
  return add(skip, h);
}

}  // namespace wldm
