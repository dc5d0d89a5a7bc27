#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "wldm/wavelet3d.hpp"
#include "wldm/wavelet_blocks.hpp"

using namespace wldm;
using wldm::testing::random_tensor;

namespace {

double energy(const Tensor& t) {
  double e = 0;
  for (auto v : t.data()) e += static_cast<double>(v) * v;
  return e;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a.data()[i]) * b.data()[i];
  return s;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - b.data()[i]));
  return m;
}

}  // namespace

TEST(Dwt3, ConstantVolumeConcentratesInLll) {
  const Real a = 0.75;
  auto bands = dwt3(Tensor::full({1, 2, 4, 4, 4}, a));
  for (auto v : bands.lll.data()) EXPECT_NEAR(v, a * std::sqrt(8.0), 1e-6);
  for (auto v : bands.detail.data()) EXPECT_EQ(v, 0.0);
}

TEST(Dwt3, ImpulseSpreadsEquallyOverEightBands) {
  auto x = Tensor::zeros({1, 1, 2, 2, 2});
  x.data()[0] = 1;
  auto bands = dwt3(x);
  const double expected = std::pow(1.0 / std::sqrt(2.0), 3);
  EXPECT_NEAR(std::abs(bands.lll.item()), expected, 1e-7);
  ASSERT_EQ(bands.detail.numel(), 7);
  for (auto v : bands.detail.data()) EXPECT_NEAR(std::abs(v), expected, 1e-7);
}

TEST(Dwt3, DetailBandOrderFollowsAxisBits) {
  // A volume that alternates only along W lives entirely in band LLH (index 1).
  auto x = Tensor::zeros({1, 1, 2, 2, 2});
  for (std::int64_t i = 0; i < 8; ++i) x.data()[i] = (i % 2 == 0) ? 1 : -1;
  auto b = dwt3(x);
  EXPECT_NEAR(b.lll.item(), 0.0, 1e-7);
  EXPECT_NEAR(std::abs(b.detail.data()[0]), std::sqrt(8.0), 1e-6);
  for (int j = 1; j < 7; ++j) EXPECT_NEAR(b.detail.data()[j], 0.0, 1e-7);
  // Alternating along D only: band HLL (index 4 -> detail slot 3).
  for (std::int64_t i = 0; i < 8; ++i) x.data()[i] = (i / 4 == 0) ? 1 : -1;
  b = dwt3(x);
  EXPECT_NEAR(std::abs(b.detail.data()[3]), std::sqrt(8.0), 1e-6);
}

TEST(Dwt3, OddExtentIsRejectedWithPaddingHint) {
  try {
    dwt3(Tensor::zeros({1, 1, 4, 3, 4}));
    FAIL();
  } catch (const ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos);
  }
}

TEST(Idwt3, ZeroBandsAndConstantLll) {
  auto z = idwt3({Tensor::zeros({1, 2, 2, 2, 2}), Tensor::zeros({1, 14, 2, 2, 2})});
  for (auto v : z.data()) EXPECT_EQ(v, 0.0);
  auto x = Tensor::full({1, 1, 4, 4, 4}, -0.4);
  auto b = dwt3(x);
  auto y = idwt3({b.lll, Tensor::zeros(b.detail.shape())});
  EXPECT_LE(max_abs_diff(x, y), 1e-6);
  EXPECT_THROW(idwt3({Tensor::zeros({1, 2, 2, 2, 2}), Tensor::zeros({1, 7, 2, 2, 2})}), ContractViolation);
}

TEST(Dwt3, PerfectReconstructionParsevalLinearityAdjoint) {
  Rng rng(31);
  for (auto family : {WaveletFamily::Haar, WaveletFamily::Daubechies2}) {
    for (std::int64_t d : {2, 4, 8, 16}) {
      const Shape s{1, 2, d, d == 16 ? 4 : d, 2};
      auto x = random_tensor(s, rng);
      auto b = dwt3(x, family);
      EXPECT_LE(max_abs_diff(idwt3(b, family), x), 1e-5);
      const double e = energy(x);
      EXPECT_NEAR(energy(b.lll) + energy(b.detail), e, 1e-4 * e);

      auto y = random_tensor(s, rng);
      auto lin = dwt3(add(scale(x, 0.3), scale(y, -1.2)), family);
      auto by = dwt3(y, family);
      for (std::int64_t i = 0; i < lin.lll.numel(); ++i)
        EXPECT_NEAR(lin.lll.data()[i], 0.3 * b.lll.data()[i] - 1.2 * by.lll.data()[i], 1e-5);

      SubBands probe{random_tensor(b.lll.shape(), rng), random_tensor(b.detail.shape(), rng)};
      const double lhs = dot(b.lll, probe.lll) + dot(b.detail, probe.detail);
      const double rhs = dot(x, idwt3(probe, family));
      EXPECT_NEAR(lhs, rhs, 1e-4 * std::max(1.0, std::abs(lhs)));
    }
  }
}

TEST(Wrm, ShapePreservingAndRejectsIndivisibleExtents) {
  ParamStore store;
  Rng rng(32);
  auto p = make_wrm(store, "wrm", 4, rng);
  auto x = random_tensor({2, 4, 8, 4, 8}, rng);
  EXPECT_EQ(wrm_forward(x, p).shape(), x.shape());
  EXPECT_THROW(wrm_forward(random_tensor({1, 4, 6, 4, 4}, rng), p), ContractViolation);
}

TEST(Wrm, ZeroParametersMapToZero) {
  ParamStore store;
  Rng rng(33);
  auto p = make_wrm(store, "wrm", 4, rng, {Init::Zero, Init::Zero});
  auto y = wrm_forward(random_tensor({1, 4, 4, 4, 4}, rng), p);
  for (auto v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Wrm, IdentityPointConvsAndZeroGroupConvsPassThrough) {
  ParamStore store;
  Rng rng(34);
  auto p = make_wrm(store, "wrm", 4, rng, {Init::Zero, Init::Identity});
  auto x = random_tensor({1, 4, 4, 8, 4}, rng);
  EXPECT_LE(max_abs_diff(wrm_forward(x, p), x), 1e-6);
}

TEST(Wrm, ConstantInputLeavesHighFrequencyStreamZero) {
  ParamStore store;
  Rng rng(35);
  auto p = make_wrm(store, "wrm", 4, rng, {Init::Identity, Init::Identity});
  auto bands = dwt3(Tensor::full({1, 4, 4, 4, 4}, 0.9));
  auto h1 = p.h1_group(bands.detail);
  for (auto v : h1.data()) EXPECT_EQ(v, 0.0);
}

TEST(Wrm, LinearInInput) {
  ParamStore store;
  Rng rng(36);
  auto p = make_wrm(store, "wrm", 4, rng);
  auto x = random_tensor({1, 4, 4, 4, 4}, rng);
  const Real a = -2.5;
  auto lhs = wrm_forward(scale(x, a), p);
  auto rhs = scale(wrm_forward(x, p), a);
  double peak = 1.0;
  for (auto v : rhs.data()) peak = std::max(peak, std::abs(double(v)));
  EXPECT_LE(max_abs_diff(lhs, rhs), 1e-5 * peak);
}

TEST(WaveletBlock, ZeroWeightsWithIdentityShortcutReturnInput) {
  ParamStore store;
  Rng rng(37);
  auto p = make_wavelet_block(store, "blk", 8, 8, rng, {true, 0, Init::Zero, {Init::Zero, Init::Zero}});
  auto x = random_tensor({1, 8, 4, 4, 4}, rng);
  auto y = wavelet_block(x, p);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_LE(max_abs_diff(y, x), 0.0);
}

TEST(WaveletBlock, ChannelChangeUsesShortcutAndSmallExtentsSkipWrm) {
  ParamStore store;
  Rng rng(38);
  auto p = make_wavelet_block(store, "blk", 4, 8, rng);
  ASSERT_TRUE(p.shortcut.has_value());
  EXPECT_EQ(wavelet_block(random_tensor({1, 4, 4, 4, 4}, rng), p).shape(), (Shape{1, 8, 4, 4, 4}));
  // 2^3 cannot hold two wavelet levels; the block degrades to a plain residual block.
  EXPECT_EQ(wavelet_block(random_tensor({1, 4, 2, 2, 2}, rng), p).shape(), (Shape{1, 8, 2, 2, 2}));
}
