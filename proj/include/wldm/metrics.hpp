#pragma once

#include <cstdint>
#include <vector>

#include "wldm/phantom.hpp"
#include "wldm/tensor.hpp"

namespace wldm {

using Mask = std::vector<std::uint8_t>;

// 10 log10(range^2 / MSE); +infinity when the volumes are identical.
double psnr(const Tensor& pred, const Tensor& ref, double range = 2.0);

// Mean local SSIM over the valid region of a 7^3 Gaussian window (sigma 1.5),
// K1 = 0.01, K2 = 0.03. Inputs are [D,H,W] or [1,1,D,H,W] with extents >= 7.
double ssim3d(const Tensor& pred, const Tensor& ref, double range = 2.0);

double mae(const Tensor& pred, const Tensor& ref);

// Pearson correlation over all voxels. A constant input yields 0 and sets
// `degenerate`.
double ncc(const Tensor& pred, const Tensor& ref, bool* degenerate = nullptr);

// 2|A n B| / (|A| + |B|); two empty masks give 1.
double dice(const Mask& a, const Mask& b);

Mask segment_bone(const Tensor& ct_like, double threshold = 0.5);
Mask label_mask(const LabelVolume& labels, std::uint8_t label);

}  // namespace wldm
