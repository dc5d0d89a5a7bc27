#include "wldm/autoencoder.hpp"

#include <optional>

namespace wldm {

Tensor LatentCode::z() const { return concat({s, m}, 1); }

LatentCode LatentCode::from(const Tensor& z) {
  require(z.ndim() == 5 && z.dim(1) % 2 == 0, "latent code needs an even channel count, got " + shape_str(z.shape()));
  const std::int64_t half = z.dim(1) / 2;
  return {slice(z, 1, 0, half), slice(z, 1, half, half)};
}

Autoencoder::Autoencoder(ParamStore& store, const AutoencoderConfig& config, Rng& rng) : config_(config) {
  require(config.widths.size() == 3, "autoencoder expects three widths");
  require(config.latent_channels > 0 && config.latent_channels % 2 == 0, "latent channels must be even");
  const auto& w = config.widths;
  const std::int64_t c = config.latent_channels;
  WaveletBlockOptions blk;
  blk.use_wrm = config.use_wrm;

  stem_ = make_conv3d(store, "encoder/stem", 1, w[0], 3, rng);
  enc0_ = make_wavelet_block(store, "encoder/block0", w[0], w[0], rng, blk);
  down0_ = make_conv3d(store, "encoder/down0", w[0], w[1], 3, rng, 2);
  enc1_ = make_wavelet_block(store, "encoder/block1", w[1], w[1], rng, blk);
  down1_ = make_conv3d(store, "encoder/down1", w[1], w[2], 3, rng, 2);
  enc2_ = make_wavelet_block(store, "encoder/block2", w[2], w[2], rng, blk);
  mu_head_ = make_conv3d(store, "encoder/mu", w[2], c, 1, rng);
  log_var_head_ = make_conv3d(store, "encoder/log_var", w[2], c, 1, rng);

  dec_in_ = make_conv3d(store, "decoder/in", c, w[2], 3, rng);
  dec2_ = make_wavelet_block(store, "decoder/block2", w[2], w[2], rng, blk);
  up1_ = make_conv3d(store, "decoder/up1", w[2], w[1], 3, rng);
  dec1_ = make_wavelet_block(store, "decoder/block1", w[1], w[1], rng, blk);
  up0_ = make_conv3d(store, "decoder/up0", w[1], w[0], 3, rng);
  dec0_ = make_wavelet_block(store, "decoder/block0", w[0], w[0], rng, blk);
  out_norm_ = make_group_norm(store, "decoder/out_norm", w[0]);
  out_conv_ = make_conv3d(store, "decoder/out", w[0], 1, 3, rng);
}

LatentDistribution Autoencoder::encode(const Tensor& x) const {
  require(x.ndim() == 5 && x.dim(1) == 1, "encode expects [N,1,D,H,W], got " + shape_str(x.shape()));
  for (int a = 2; a < 5; ++a)
    if (x.dim(a) % 8 != 0)
      contract_fail("encode: extent " + std::to_string(x.dim(a)) + " of " + shape_str(x.shape()) +
                    " is not divisible by 8");
  Tensor h = wavelet_block(stem_(x), enc0_);
  h = wavelet_block(down0_(h), enc1_);
  h = wavelet_block(down1_(h), enc2_);
  return {mu_head_(h), clamp(log_var_head_(h), kLogVarMin, kLogVarMax)};
}

Tensor Autoencoder::decode(const Tensor& z) const {
  require(z.ndim() == 5 && z.dim(1) == config_.latent_channels,
          "decode expects [N," + std::to_string(config_.latent_channels) + ",d,h,w], got " + shape_str(z.shape()));
  Tensor h = wavelet_block(dec_in_(z), dec2_);
  h = wavelet_block(up1_(upsample_nearest(h, 2)), dec1_);
  h = wavelet_block(up0_(upsample_nearest(h, 2)), dec0_);
  return tanh(out_conv_(silu(out_norm_(h))));
}

LatentCode sample_latent(const LatentDistribution& d, Rng& rng) {
  require(d.mu.shape() == d.log_var.shape(), "sample_latent: mu and log_var shapes differ");
  Tensor eps = Tensor::zeros(d.mu.shape());
  rng.fill_normal(eps.data());
  const Tensor sigma = exp(scale(clamp(d.log_var, kLogVarMin, kLogVarMax), Real(0.5)));
  return LatentCode::from(add(d.mu, mul(sigma, eps)));
}

Tensor loss_structure(const Tensor& s_ct, const Tensor& s_mr, const Tensor& s_ct2, const Tensor& s_mr2) {
  const Tensor paired = add(cosine_similarity(s_ct, s_mr), cosine_similarity(s_ct2, s_mr2));
  const Tensor unpaired = add(cosine_similarity(s_ct, s_ct2), cosine_similarity(s_mr, s_mr2));
  return sub(unpaired, paired);
}

Tensor loss_modality(const Tensor& m_ct, const Tensor& m_mr, const Tensor& m_ct2, const Tensor& m_mr2) {
  const Tensor paired = add(cosine_similarity(m_ct, m_mr), cosine_similarity(m_ct2, m_mr2));
  const Tensor unpaired = add(cosine_similarity(m_ct, m_ct2), cosine_similarity(m_mr, m_mr2));
  return sub(paired, unpaired);
}

Tensor loss_disentangle(const LatentCode& ct_a, const LatentCode& mr_a, const LatentCode& ct_b,
                        const LatentCode& mr_b) {
  return add(loss_structure(ct_a.s, mr_a.s, ct_b.s, mr_b.s), loss_modality(ct_a.m, mr_a.m, ct_b.m, mr_b.m));
}

Tensor loss_kl(const LatentDistribution& d) {
  require(d.mu.shape() == d.log_var.shape(), "loss_kl: mu and log_var shapes differ");
  const Tensor terms = sub(add(square(d.mu), exp(d.log_var)), add_scalar(d.log_var, 1));
  return scale(mean(terms), Real(0.5));
}

Discriminator::Discriminator(ParamStore& store, const std::string& name, Rng& rng, std::int64_t width)
    : c1(make_conv3d(store, name + "/c1", 1, width, 3, rng, 2)),
      c2(make_conv3d(store, name + "/c2", width, 2 * width, 3, rng, 2)),
      c3(make_conv3d(store, name + "/c3", 2 * width, 1, 3, rng)) {}

Tensor Discriminator::logits(const Tensor& x, bool frozen) const {
  auto run = [&](const Conv3dLayer& l, const Tensor& in) {
    if (!frozen) return l(in);
    return conv3d(in, l.weight.detach(), l.bias.detach(), l.opts);
  };
  return run(c3, leaky_relu(run(c2, leaky_relu(run(c1, x)))));
}

Tensor gen_loss_from_logits(const Tensor& fake_logits) { return mean(softplus(neg(fake_logits))); }

Tensor disc_loss_from_logits(const Tensor& real_logits, const Tensor& fake_logits) {
  return add(mean(softplus(neg(real_logits))), mean(softplus(fake_logits)));
}

AdversarialLoss loss_adversarial(const Tensor& real, const Tensor& fake, const Discriminator& disc) {
  AdversarialLoss out;
  out.gen = gen_loss_from_logits(disc.logits(fake, true));
  out.disc = disc_loss_from_logits(disc.logits(real.detach()), disc.logits(fake.detach()));
  return out;
}

namespace {

Tensor batch_of(const PhantomPair& a, const PhantomPair& b) { return concat({a.ct, a.mr, b.ct, b.mr}, 0); }

LatentCode sample_of(const LatentCode& code, std::int64_t i) {
  return {slice(code.s, 0, i, 1), slice(code.m, 0, i, 1)};
}

}  // namespace

PretrainObjective pretrain_objective(const Autoencoder& ae, const Discriminator& disc, const PhantomPair& a,
                                     const PhantomPair& b, const PretrainWeights& w, Rng& rng) {
  if (a.patient_id == b.patient_id)
    contract_fail("pretrain_step needs two distinct patients, both are id " + std::to_string(a.patient_id));
  PretrainObjective obj;
  obj.input = batch_of(a, b);
  const LatentDistribution dist = ae.encode(obj.input);
  const LatentCode code = sample_latent(dist, rng);
  obj.recon = ae.decode(code);

  const Tensor rec = mse_loss(obj.recon, obj.input);
  const Tensor kl = loss_kl(dist);
  const LatentCode ct_a = sample_of(code, 0), mr_a = sample_of(code, 1), ct_b = sample_of(code, 2),
                   mr_b = sample_of(code, 3);
  Tensor structure, modality;
  {
    std::optional<NoGradGuard> off;
    if (w.beta == 0) off.emplace();
    structure = loss_structure(ct_a.s, mr_a.s, ct_b.s, mr_b.s);
    modality = loss_modality(ct_a.m, mr_a.m, ct_b.m, mr_b.m);
  }
  const Tensor disent = add(structure, modality);
  const AdversarialLoss adv = loss_adversarial(obj.input, obj.recon, disc);

  Tensor total = add(rec, scale(kl, Real(w.alpha)));
  if (w.beta != 0) total = add(total, scale(disent, Real(w.beta)));
  total = add(total, scale(adv.gen, Real(w.gamma)));
  obj.total = total;

  auto& r = obj.report;
  r.rec = rec.item();
  r.kl = kl.item();
  r.structure = structure.item();
  r.modality = modality.item();
  r.disentangle = disent.item();
  r.adv_gen = adv.gen.item();
  r.adv_disc = adv.disc.item();
  r.total = total.item();
  return obj;
}

PretrainReport pretrain_step(const Autoencoder& ae, const Discriminator& disc, PretrainOptimizers& opt,
                             const PhantomPair& a, const PhantomPair& b, const PretrainWeights& w, Rng& rng) {
  PretrainObjective obj = pretrain_objective(ae, disc, a, b, w, rng);
  opt.generator.zero_grad();
  obj.total.backward();
  opt.generator.step();

  if (w.gamma != 0) {
    opt.discriminator.zero_grad();
    const AdversarialLoss adv = loss_adversarial(obj.input, obj.recon.detach(), disc);
    adv.disc.backward();
    opt.discriminator.step();
  }
  return obj.report;
}

}  // namespace wldm
