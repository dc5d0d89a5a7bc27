#pragma once

#include <array>
#include <optional>
#include <vector>

#include "wldm/tensor.hpp"

namespace wldm {

// Elementwise binary ops with right-aligned broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, Real s);
Tensor add_scalar(const Tensor& x, Real s);
Tensor neg(const Tensor& x);
Tensor square(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, Real slope = Real(0.2));
// log(1 + e^x), computed without overflow.
Tensor softplus(const Tensor& x);
// Gradient passes only where lo < x < hi.
Tensor clamp(const Tensor& x, Real lo, Real hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, Real s) { return scale(a, s); }
inline Tensor operator*(Real s, const Tensor& a) { return scale(a, s); }

// Reductions accumulate in 64-bit.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, std::int64_t axis, bool keepdim = false);
Tensor mean(const Tensor& x, std::int64_t axis, bool keepdim = false);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor flatten(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::int64_t>& order);
// Swaps the last two axes.
Tensor transpose_last(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis);
Tensor slice(const Tensor& x, std::int64_t axis, std::int64_t start, std::int64_t length);
std::vector<Tensor> split(const Tensor& x, std::int64_t axis, std::int64_t parts);

// [..., m, k] x [..., k, n] -> [..., m, n]; leading batch axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::int64_t axis);

struct Conv3dOptions {
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t groups = 1;
};

// Cross-correlation. input [N,C,D,H,W], weight [F,C/groups,k,k,k], bias [F]
// (undefined tensor for none).
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, Conv3dOptions opts = {});

// Normalizes each group of C/groups channels over channels and space, then
// applies per-channel affine (gamma/beta may be undefined for none).
Tensor group_norm(const Tensor& x, std::int64_t groups, const Tensor& gamma, const Tensor& beta,
                  Real eps = Real(1e-5));

// Spatial resizing of [N,C,D,H,W].
Tensor upsample_nearest(const Tensor& x, std::int64_t factor);
Tensor resize_trilinear(const Tensor& x, const std::array<std::int64_t, 3>& size);

// Flattened cosine similarity, a.b / max(|a||b|, 1e-8). Scalar result.
// `degenerate` is set when the floor was hit (a zero vector).
Tensor cosine_similarity(const Tensor& a, const Tensor& b, bool* degenerate = nullptr);

Tensor mse_loss(const Tensor& pred, const Tensor& target);

// x [N, in] times weight [in, out] plus bias [out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Sinusoidal embedding of integer timesteps: [len(t), dim] with sin halves
// first. Constant (no gradient).
Tensor timestep_embedding(const std::vector<int>& timesteps, std::int64_t dim);

}  // namespace wldm
