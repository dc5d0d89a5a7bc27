#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "gradcheck.hpp"
#include "wldm/metrics.hpp"
#include "wldm/ops.hpp"

using namespace wldm;
using wldm::testing::random_tensor;

namespace {

Tensor uniform_volume(std::int64_t n, Rng& rng) {
  Tensor t = Tensor::zeros({1, 1, n, n, n});
  for (auto& v : t.data()) v = static_cast<Real>(rng.uniform(-1, 1));
  return t;
}

// Direct 7^3 windowed SSIM without separable passes.
double ssim_reference(const Tensor& x, const Tensor& y, double range = 2.0) {
  const std::int64_t D = x.dim(-3), H = x.dim(-2), W = x.dim(-1);
  double g[7], gs = 0;
  for (int i = 0; i < 7; ++i) gs += g[i] = std::exp(-(i - 3) * (i - 3) / (2 * 1.5 * 1.5));
  for (double& v : g) v /= gs;
  const double c1 = (0.01 * range) * (0.01 * range), c2 = (0.03 * range) * (0.03 * range);
  auto at = [&](const Tensor& t, std::int64_t d, std::int64_t h, std::int64_t w) {
    return double(t.data()[(d * H + h) * W + w]);
  };
  double total = 0;
  std::int64_t count = 0;
  for (std::int64_t d = 0; d + 7 <= D; ++d)
    for (std::int64_t h = 0; h + 7 <= H; ++h)
      for (std::int64_t w = 0; w + 7 <= W; ++w) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int i = 0; i < 7; ++i)
          for (int j = 0; j < 7; ++j)
            for (int k = 0; k < 7; ++k) {
              const double wt = g[i] * g[j] * g[k];
              const double a = at(x, d + i, h + j, w + k), b = at(y, d + i, h + j, w + k);
              mx += wt * a;
              my += wt * b;
              sxx += wt * a * a;
              syy += wt * b * b;
              sxy += wt * a * b;
            }
        const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
        total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
  return total / static_cast<double>(count);
}

}  // namespace

TEST(Psnr, Examples) {
  Rng rng(1);
  const Tensor x = uniform_volume(8, rng);
  EXPECT_EQ(psnr(x, x), std::numeric_limits<double>::infinity());
  const Tensor a = Tensor::full({1, 1, 4, 4, 4}, 1.0f), b = Tensor::full({1, 1, 4, 4, 4}, -1.0f);
  // MSE 4 over range 2 is 0 dB; MSE 1 is 6.0206 dB.
  EXPECT_NEAR(psnr(a, b), 0.0, 1e-9);
  EXPECT_NEAR(psnr(a, Tensor::zeros(a.shape())), 6.0206, 1e-4);
  const Tensor y = uniform_volume(8, rng);
  double mse = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) mse += std::pow(double(x.data()[i]) - y.data()[i], 2);
  mse /= static_cast<double>(x.numel());
  EXPECT_NEAR(psnr(x, y), 10 * std::log10(4.0 / mse), 1e-9);
  EXPECT_DOUBLE_EQ(psnr(x, y), psnr(y, x));
}

TEST(Ssim, IdentityNegationAndReference) {
  Rng rng(2);
  const Tensor x = uniform_volume(12, rng), y = uniform_volume(12, rng);
  EXPECT_NEAR(ssim3d(x, x), 1.0, 1e-12);
  Tensor checker = Tensor::zeros({1, 1, 12, 12, 12});
  for (std::int64_t i = 0; i < checker.numel(); ++i)
    checker.data()[i] = ((i / 144 + i / 12 + i) % 2) ? Real(0.5) : Real(-0.5);
  EXPECT_LT(ssim3d(checker, neg(checker)), -0.9);
  EXPECT_NEAR(ssim3d(x, y), ssim_reference(x, y), 1e-4);
  const Tensor smooth = add(scale(x, Real(0.8)), scale(y, Real(0.2)));
  EXPECT_NEAR(ssim3d(smooth, x), ssim_reference(smooth, x), 1e-4);
  EXPECT_NEAR(ssim3d(x, y), ssim3d(y, x), 1e-12);
  EXPECT_LE(ssim3d(x, y), 1.0);
  EXPECT_THROW(ssim3d(uniform_volume(6, rng), uniform_volume(6, rng)), ContractViolation);
}

TEST(Ssim, AcceptsBareVolumes) {
  Rng rng(3);
  const Tensor x = uniform_volume(8, rng), y = uniform_volume(8, rng);
  EXPECT_DOUBLE_EQ(ssim3d(x, y), ssim3d(reshape(x, {8, 8, 8}), reshape(y, {8, 8, 8})));
}

TEST(Mae, Examples) {
  const Tensor a = Tensor::full({1, 1, 2, 2, 2}, 0.5f), b = Tensor::full({1, 1, 2, 2, 2}, -0.25f);
  EXPECT_DOUBLE_EQ(mae(a, a), 0.0);
  EXPECT_NEAR(mae(a, b), 0.75, 1e-7);
  EXPECT_DOUBLE_EQ(mae(a, b), mae(b, a));
}

TEST(Ncc, ExamplesAndAffineInvariance) {
  Rng rng(4);
  const Tensor x = uniform_volume(6, rng), y = uniform_volume(6, rng);
  EXPECT_NEAR(ncc(x, x), 1.0, 1e-9);
  EXPECT_NEAR(ncc(x, neg(x)), -1.0, 1e-9);
  EXPECT_NEAR(ncc(x, y), ncc(y, x), 1e-12);
  EXPECT_NEAR(ncc(add_scalar(scale(x, Real(0.5)), Real(0.2)), y), ncc(x, y), 1e-6);
  bool flat = false;
  EXPECT_EQ(ncc(Tensor::full(x.shape(), 0.3f), y, &flat), 0.0);
  EXPECT_TRUE(flat);
  flat = false;
  ncc(x, y, &flat);
  EXPECT_FALSE(flat);
}

TEST(Dice, Examples) {
  const Mask a{1, 1, 0, 0}, b{1, 0, 1, 0}, none{0, 0, 0, 0};
  EXPECT_DOUBLE_EQ(dice(a, a), 1.0);
  EXPECT_DOUBLE_EQ(dice(none, none), 1.0);
  EXPECT_DOUBLE_EQ(dice(a, none), 0.0);
  EXPECT_DOUBLE_EQ(dice(a, b), 0.5);
  EXPECT_DOUBLE_EQ(dice(a, b), dice(b, a));
  EXPECT_THROW(dice(a, Mask{1, 0}), ContractViolation);
}

TEST(SegmentBone, ThresholdMatchesGroundTruthOnPhantoms) {
  for (std::int64_t i = 0; i < 5; ++i) {
    const PhantomPair p = generate_one(7, i, 32);
    const Mask truth = label_mask(p.labels, kBone);
    EXPECT_GE(dice(segment_bone(p.ct), truth), 0.95) << "patient " << i;
  }
}
