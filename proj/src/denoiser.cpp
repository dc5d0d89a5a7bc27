#include "wldm/denoiser.hpp"

#include <cmath>

namespace wldm {

AttentionParams make_attention(ParamStore& store, const std::string& name, std::int64_t width,
                               std::int64_t cond_channels, Rng& rng, Init init) {
  return {make_conv3d(store, name + "/q", width, width, 1, rng, 1, 1, init),
          make_conv3d(store, name + "/k", cond_channels, width, 1, rng, 1, 1, init),
          make_conv3d(store, name + "/v", cond_channels, width, 1, rng, 1, 1, init)};
}

namespace {

// [N,C,d,h,w] -> [N, dhw, C]
Tensor tokens(const Tensor& x) {
  return transpose_last(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3) * x.dim(4)}));
}

Tensor volume(const Tensor& t, const Shape& like) {
  return reshape(transpose_last(t), {like[0], t.dim(2), like[2], like[3], like[4]});
}

Tensor attend_tokens(const Tensor& q, const Tensor& x, const Tensor& cond, const AttentionParams& p,
                     Tensor* weights) {
  for (int a = 2; a < 5; ++a)
    if (x.dim(a) != cond.dim(a))
      contract_fail("attention: condition geometry " + shape_str(cond.shape()) + " does not match features " +
                    shape_str(x.shape()));
  require(x.dim(0) == cond.dim(0), "attention: batch sizes differ");
  const Tensor k = tokens(p.k(cond));
  const Tensor v = tokens(p.v(cond));
  const auto d = static_cast<Real>(q.dim(2));
  const Tensor a = softmax(scale(matmul(q, transpose_last(k)), Real(1) / std::sqrt(d)), 2);
  if (weights) *weights = a;
  return matmul(a, v);
}

}  // namespace

Tensor attend(const Tensor& x, const Tensor& cond, const AttentionParams& p, Tensor* weights) {
  require(x.ndim() == 5 && cond.ndim() == 5, "attention expects 5-D inputs");
  return volume(attend_tokens(tokens(p.q(x)), x, cond, p, weights), x.shape());
}

Tensor sem(const Tensor& e, const Tensor& s_mr, const AttentionParams& p, Tensor* weights) {
  return attend(e, s_mr, p, weights);
}

Tensor mfm(const Tensor& e, const Tensor& m_mr, const AttentionParams& p, Tensor* weights) {
  require(e.ndim() == 5 && m_mr.ndim() == 5, "mfm expects 5-D inputs");
  const Tensor q = tokens(p.q(e));
  return volume(sub(q, attend_tokens(q, e, m_mr, p, weights)), e.shape());
}

Tensor dsca(const Tensor& e, const Tensor& d, const Tensor& s_mr, const Tensor& m_mr, const DscaParams& p) {
  require(e.ndim() == 5 && d.ndim() == 5, "dsca expects 5-D inputs");
  for (int a : {0, 2, 3, 4})
    if (e.dim(a) != d.dim(a))
      contract_fail("dsca: skip " + shape_str(e.shape()) + " and decoder " + shape_str(d.shape()) +
                    " are at different scales");
  const std::array<std::int64_t, 3> geo{e.dim(2), e.dim(3), e.dim(4)};
  auto fit = [&](const Tensor& c) {
    return c.dim(2) == geo[0] && c.dim(3) == geo[1] && c.dim(4) == geo[2] ? c : resize_trilinear(c, geo);
  };
  const Tensor fused = add(add(e, sem(e, fit(s_mr), p.sem)), mfm(e, fit(m_mr), p.mfm));
  return concat({fused, d}, 1);
}

Denoiser::Denoiser(ParamStore& store, const DenoiserConfig& config, Rng& rng) : config_(config) {
  require(config.scales >= 1 && config.blocks_per_stage >= 1 && config.base_width > 0,
          "denoiser needs at least one scale, one block per stage and a positive width");
  require(config.latent_channels % 2 == 0, "latent channels must be even");
  // DSCA parameters come from their own stream so that disabling it leaves
  // every other weight unchanged.
  Rng main = rng.split(1);
  Rng attn = rng.split(2);
  const std::int64_t c = config.latent_channels;
  time_dim_ = 4 * config.base_width;
  time1_ = make_linear(store, "denoiser/time/fc1", config.base_width, time_dim_, main);
  time2_ = make_linear(store, "denoiser/time/fc2", time_dim_, time_dim_, main);
  stem_ = make_conv3d(store, "denoiser/stem", 2 * c, width(0), 3, main);

  WaveletBlockOptions blk;
  blk.use_wrm = config.use_wrm;
  blk.time_dim = time_dim_;
  for (std::int64_t i = 0; i < config.scales; ++i) {
    const std::string name = "denoiser/enc" + std::to_string(i);
    Stage st;
    if (i > 0) st.down = make_conv3d(store, name + "/down", width(i - 1), width(i), 3, main, 2);
    for (std::int64_t b = 0; b < config.blocks_per_stage; ++b)
      st.blocks.push_back(make_wavelet_block(store, name + "/block" + std::to_string(b), width(i), width(i), main, blk));
    enc_.push_back(std::move(st));
  }
  const std::int64_t last = config.scales - 1;
  mid_ = make_wavelet_block(store, "denoiser/mid", width(last), width(last), main, blk);
  dec_.resize(static_cast<std::size_t>(config.scales));
  for (std::int64_t i = last; i >= 0; --i) {
    const std::string name = "denoiser/dec" + std::to_string(i);
    auto& st = dec_[i];
    for (std::int64_t b = 0; b < config.blocks_per_stage; ++b)
      st.blocks.push_back(make_wavelet_block(store, name + "/block" + std::to_string(b),
                                             b == 0 ? 2 * width(i) : width(i), width(i), main, blk));
    if (i > 0) st.up = make_conv3d(store, name + "/up", width(i), width(i - 1), 3, main);
  }
  out_norm_ = make_group_norm(store, "denoiser/out_norm", width(0));
  out_conv_ = make_conv3d(store, "denoiser/out", width(0), c, 3, main);

  if (config.use_dsca) {
    for (std::int64_t i = 0; i < config.scales; ++i) {
      const std::string name = "denoiser/dsca" + std::to_string(i);
      dsca_.push_back({make_attention(store, name + "/sem", width(i), c / 2, attn),
                       make_attention(store, name + "/mfm", width(i), c / 2, attn)});
    }
  }
}

Tensor Denoiser::forward(const Tensor& z_noisy, const std::vector<int>& t, const Tensor& z_cond) const {
  require(z_noisy.shape() == z_cond.shape(), "denoiser: noisy latent " + shape_str(z_noisy.shape()) +
                                                 " and condition " + shape_str(z_cond.shape()) + " differ");
  require(z_noisy.ndim() == 5 && z_noisy.dim(1) == config_.latent_channels,
          "denoiser expects [N," + std::to_string(config_.latent_channels) + ",d,h,w]");
  require(static_cast<std::int64_t>(t.size()) == z_noisy.dim(0), "denoiser: one timestep per batch entry");
  const std::int64_t f = std::int64_t{1} << (config_.scales - 1);
  for (int a = 2; a < 5; ++a)
    if (z_noisy.dim(a) % f != 0)
      contract_fail("denoiser: latent extent " + std::to_string(z_noisy.dim(a)) + " not divisible by " +
                    std::to_string(f));

  const Tensor temb = time2_(silu(time1_(timestep_embedding(t, config_.base_width))));
  const std::int64_t half = config_.latent_channels / 2;
  const Tensor s_mr = slice(z_cond, 1, 0, half);
  const Tensor m_mr = slice(z_cond, 1, half, half);

  std::vector<Tensor> skips;
  Tensor h = stem_(concat({z_noisy, z_cond}, 1));
  for (const auto& st : enc_) {
    if (st.down) h = (*st.down)(h);
    for (const auto& b : st.blocks) h = wavelet_block(h, b, temb);
    skips.push_back(h);
  }
  h = wavelet_block(h, mid_, temb);
  for (std::int64_t i = config_.scales - 1; i >= 0; --i) {
    const Tensor& e = skips[i];
    h = config_.use_dsca ? dsca(e, h, s_mr, m_mr, dsca_[i]) : concat({e, h}, 1);
    for (const auto& b : dec_[i].blocks) h = wavelet_block(h, b, temb);
    if (dec_[i].up) h = (*dec_[i].up)(upsample_nearest(h, 2));
  }
  return out_conv_(silu(out_norm_(h)));
}

}  // namespace wldm
