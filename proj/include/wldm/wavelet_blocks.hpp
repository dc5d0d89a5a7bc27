#pragma once

#include <optional>
#include <string>

#include "wldm/nn.hpp"
#include "wldm/wavelet3d.hpp"

namespace wldm {

// Parameters of the Wavelet Residual Module for C channels. Every convolution
// keeps the channel count of its stream; grouped convs use gcd(C, 4) groups.
struct WrmParams {
  Conv3dLayer primary_group;  // k=3, grouped, over x
  Conv3dLayer primary_point;  // 1^3
  Conv3dLayer h1_group;       // k=3, grouped, over the 7C first-level detail bands
  Conv3dLayer l1_group;       // k=3, grouped, over the first-level LLL band
  Conv3dLayer l2_group;       // second-level LLL band
  Conv3dLayer h2_group;       // second-level detail bands (7C)
  Conv3dLayer fuse_point;     // final 1^3
  WaveletFamily family = WaveletFamily::Haar;
};

struct WrmInit {
  Init grouped = Init::Default;
  Init pointwise = Init::Default;
};

std::int64_t wrm_groups(std::int64_t channels);

WrmParams make_wrm(ParamStore& store, const std::string& name, std::int64_t channels, Rng& rng, WrmInit init = {},
                   WaveletFamily family = WaveletFamily::Haar);

// Three-stream module, shape preserving. Requires D, H, W divisible by 4.
//   primary = x + point(group(x))
//   (L1, H1) = dwt3(x);  (L2, H2) = dwt3(L1)
//   L1'' = idwt3(l2_group(L2), h2_group(H2))
//   out  = fuse_point(primary + idwt3(l1_group(L1) + L1'', h1_group(H1)))
// No nonlinearity inside.
Tensor wrm_forward(const Tensor& x, const WrmParams& p);

// True when every spatial extent allows two wavelet levels.
bool supports_wrm(const Tensor& x);

struct WaveletBlockParams {
  GroupNormLayer norm;
  Conv3dLayer conv;
  std::optional<WrmParams> wrm;            // absent: plain residual block
  std::optional<Conv3dLayer> shortcut;     // 1^3, present when in != out
  std::optional<LinearLayer> time_proj;    // timestep conditioning
};

struct WaveletBlockOptions {
  bool use_wrm = true;
  std::int64_t time_dim = 0;  // 0: no timestep input
  Init conv_init = Init::Default;
  WrmInit wrm_init = {};
};

WaveletBlockParams make_wavelet_block(ParamStore& store, const std::string& name, std::int64_t in, std::int64_t out,
                                      Rng& rng, const WaveletBlockOptions& opts = {});

// group_norm -> SiLU -> conv3d(k=3) [+ time projection] -> WRM -> + shortcut(x).
// The WRM stage is skipped when absent or when the extents do not admit two
// wavelet levels.
Tensor wavelet_block(const Tensor& x, const WaveletBlockParams& p, const Tensor& time_embedding = Tensor{});

}  // namespace wldm
