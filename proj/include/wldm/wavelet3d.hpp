#pragma once

#include <array>
#include <vector>

#include "wldm/tensor.hpp"

namespace wldm {

enum class WaveletFamily {
  Haar,         // taps +-1/sqrt(2)
  Daubechies2,  // four taps, periodic extension
};

// One level of separable 3D analysis.
//
// `lll` is [N, C, D/2, H/2, W/2]. `detail` is [N, 7C, D/2, H/2, W/2] with the
// seven detail bands of input channel c stored contiguously at channels
// 7c .. 7c+6, in band order LLH, LHL, LHH, HLL, HLH, HHL, HHH. The letters
// name the filter applied along D, H, W respectively (L = 0, H = 1), so band
// b in 1..7 has its D/H/W bits at positions 2/1/0 of b.
struct SubBands {
  Tensor lll;
  Tensor detail;
};

SubBands dwt3(const Tensor& x, WaveletFamily family = WaveletFamily::Haar);
Tensor idwt3(const SubBands& bands, WaveletFamily family = WaveletFamily::Haar);

// Analysis filter pair (low, high) for a family; orthonormal.
struct FilterBank {
  std::vector<double> low;
  std::vector<double> high;
};
FilterBank filter_bank(WaveletFamily family);

}  // namespace wldm
