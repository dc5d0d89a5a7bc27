#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "wldm/denoiser.hpp"

using namespace wldm;
using wldm::testing::max_abs_diff;
using wldm::testing::random_tensor;

namespace {

void zero_all(const std::vector<Tensor>& ts) {
  for (auto t : ts)
    for (auto& v : t.data()) v = 0;
}

void zero_attention(const AttentionParams& p) {
  zero_all({p.q.weight, p.q.bias, p.k.weight, p.k.bias, p.v.weight, p.v.bias});
}

// Per-voxel 1x1x1 projection: out[c, i] = b[c] + sum_k W[c,k] x[k, i].
std::vector<std::vector<double>> project(const Conv3dLayer& l, const Tensor& x) {
  const std::int64_t cin = x.dim(1), n = x.numel() / cin, cout = l.out_channels();
  std::vector<std::vector<double>> out(static_cast<std::size_t>(n), std::vector<double>(cout));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c < cout; ++c) {
      double s = l.bias.data()[c];
      for (std::int64_t k = 0; k < cin; ++k) s += double(l.weight.data()[c * cin + k]) * x.data()[k * n + i];
      out[i][c] = s;
    }
  return out;
}

// Naive softmax(QK^T/sqrt(C)) V for batch size 1, returned as [C, n] flattened.
std::vector<double> naive_attention(const Tensor& x, const Tensor& cond, const AttentionParams& p) {
  const auto q = project(p.q, x), k = project(p.k, cond), v = project(p.v, cond);
  const std::size_t n = q.size(), c = q[0].size();
  std::vector<double> out(c * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> w(n);
    double mx = -1e300, z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t a = 0; a < c; ++a) s += q[i][a] * k[j][a];
      w[j] = s / std::sqrt(double(c));
      mx = std::max(mx, w[j]);
    }
    for (auto& e : w) z += e = std::exp(e - mx);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t a = 0; a < c; ++a) out[a * n + i] += w[j] / z * v[j][a];
  }
  return out;
}

struct Attn {
  ParamStore store;
  Rng rng{5};
  AttentionParams p;
  Attn(std::int64_t width, std::int64_t cond) { p = make_attention(store, "a", width, cond, rng); }
};

}  // namespace

TEST(Sem, ConstantConditionGivesIdenticalTokens) {
  Attn a(4, 2);
  Rng rng(1);
  const Tensor e = random_tensor({1, 4, 2, 2, 2}, rng);
  const Tensor s = Tensor::full({1, 2, 2, 2, 2}, 0.7f);
  const Tensor out = sem(e, s, a.p);
  for (std::int64_t c = 0; c < 4; ++c)
    for (std::int64_t i = 1; i < 8; ++i) EXPECT_NEAR(out.data()[c * 8 + i], out.data()[c * 8], 1e-6);
}

TEST(Sem, AttentionRowsSumToOneAndSingleTokenIsValue) {
  Attn a(4, 2);
  Rng rng(2);
  const Tensor e = random_tensor({2, 4, 2, 2, 1}, rng), s = random_tensor({2, 2, 2, 2, 1}, rng);
  Tensor w;
  sem(e, s, a.p, &w);
  ASSERT_EQ(w.shape(), (Shape{2, 4, 4}));
  for (std::int64_t r = 0; r < 8; ++r) {
    double sum = 0;
    for (std::int64_t j = 0; j < 4; ++j) sum += w.data()[r * 4 + j];
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
  const Tensor e1 = random_tensor({1, 4, 1, 1, 1}, rng), s1 = random_tensor({1, 2, 1, 1, 1}, rng);
  EXPECT_LE(max_abs_diff(sem(e1, s1, a.p), a.p.v(s1)), 1e-6);
}

TEST(Sem, MatchesNaiveAttention) {
  Attn a(4, 3);
  Rng rng(3);
  const Tensor e = random_tensor({1, 4, 2, 3, 2}, rng), s = random_tensor({1, 3, 2, 3, 2}, rng);
  const Tensor out = sem(e, s, a.p);
  const auto ref = naive_attention(e, s, a.p);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.data()[i], ref[i], 1e-5);
}

TEST(Mfm, Examples) {
  Attn a(4, 2);
  Rng rng(4);
  const Tensor e = random_tensor({1, 4, 2, 2, 2}, rng), m = random_tensor({1, 2, 2, 2, 2}, rng);
  // Zero value projection leaves the query.
  zero_all({a.p.v.weight, a.p.v.bias});
  EXPECT_LE(max_abs_diff(mfm(e, m, a.p), a.p.q(e)), 1e-6);

  Attn b(4, 2);
  const Tensor e1 = random_tensor({1, 4, 1, 1, 1}, rng), m1 = random_tensor({1, 2, 1, 1, 1}, rng);
  EXPECT_LE(max_abs_diff(mfm(e1, m1, b.p), sub(b.p.q(e1), b.p.v(m1))), 1e-6);

  const Tensor out = mfm(e, m, b.p);
  const auto ref = naive_attention(e, m, b.p);
  const auto q = b.p.q(e);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.data()[i], q.data()[i] - ref[i], 1e-5);
}

TEST(Attention, PermutationEquivariance) {
  Attn a(4, 2);
  Rng rng(6);
  const std::int64_t n = 6;
  const Tensor e = random_tensor({1, 4, n, 1, 1}, rng), s = random_tensor({1, 2, n, 1, 1}, rng);
  const std::vector<std::int64_t> perm{3, 0, 5, 1, 4, 2};
  auto permuted = [&](const Tensor& x) {
    Tensor y = Tensor::zeros(x.shape());
    const std::int64_t c = x.dim(1);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < n; ++i) y.data()[ch * n + i] = x.data()[ch * n + perm[i]];
    return y;
  };
  EXPECT_LE(max_abs_diff(sem(permuted(e), permuted(s), a.p), permuted(sem(e, s, a.p))), 1e-5);
  EXPECT_LE(max_abs_diff(mfm(permuted(e), permuted(s), a.p), permuted(mfm(e, s, a.p))), 1e-5);
}

TEST(Dsca, ZeroedProjectionsGivePlainConcat) {
  ParamStore store;
  Rng rng(7);
  DscaParams p{make_attention(store, "s", 6, 4, rng), make_attention(store, "m", 6, 4, rng)};
  zero_attention(p.sem);
  zero_attention(p.mfm);
  const Tensor e = random_tensor({2, 6, 2, 2, 2}, rng), d = random_tensor({2, 6, 2, 2, 2}, rng);
  const Tensor s = random_tensor({2, 4, 4, 4, 4}, rng), m = random_tensor({2, 4, 4, 4, 4}, rng);
  const Tensor out = dsca(e, d, s, m, p);
  const Tensor ref = concat({e, d}, 1);
  ASSERT_EQ(out.shape(), (Shape{2, 12, 2, 2, 2}));
  for (std::int64_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out.data()[i], ref.data()[i]);
  EXPECT_THROW(dsca(e, random_tensor({2, 6, 4, 4, 4}, rng), s, m, p), ContractViolation);
}

TEST(Denoiser, ShapesTimestepsAndSkipWidths) {
  ParamStore store;
  Rng rng(8);
  DenoiserConfig cfg;
  cfg.base_width = 8;
  Denoiser net(store, cfg, rng);
  const Tensor z = random_tensor({2, 8, 8, 8, 8}, rng), c = random_tensor({2, 8, 8, 8, 8}, rng);
  const Tensor a = net.forward(z, {10, 500}, c);
  EXPECT_EQ(a.shape(), z.shape());
  const Tensor b = net.forward(z, {11, 500}, c);
  EXPECT_GT(max_abs_diff(slice(a, 0, 0, 1), slice(b, 0, 0, 1)), 0.0);
  EXPECT_EQ(max_abs_diff(slice(a, 0, 1, 1), slice(b, 0, 1, 1)), 0.0);
  ASSERT_EQ(net.dsca_params().size(), 3u);
  for (std::int64_t i = 0; i < 3; ++i) EXPECT_EQ(net.dsca_params()[i].sem.q.out_channels(), net.width(i));
  EXPECT_THROW(net.forward(random_tensor({1, 8, 6, 8, 8}, rng), {1}, random_tensor({1, 8, 6, 8, 8}, rng)),
               ContractViolation);
  EXPECT_THROW(net.forward(z, {1}, c), ContractViolation);
}

TEST(Denoiser, ZeroedDscaMatchesPlainSkipNetworkExactly) {
  DenoiserConfig with;
  with.base_width = 8;
  DenoiserConfig without = with;
  without.use_dsca = false;
  ParamStore sa, sb;
  Rng ra(9), rb(9);
  Denoiser a(sa, with, ra), b(sb, without, rb);
  for (const auto& p : a.dsca_params()) {
    zero_attention(p.sem);
    zero_attention(p.mfm);
  }
  Rng rng(10);
  const Tensor z = random_tensor({2, 8, 8, 8, 8}, rng), c = random_tensor({2, 8, 8, 8, 8}, rng);
  const Tensor ya = a.forward(z, {3, 900}, c), yb = b.forward(z, {3, 900}, c);
  for (std::int64_t i = 0; i < ya.numel(); ++i) ASSERT_EQ(ya.data()[i], yb.data()[i]) << i;
}
