#pragma once

#include <string>
#include <vector>

#include "wldm/nn.hpp"
#include "wldm/phantom.hpp"
#include "wldm/wavelet_blocks.hpp"

namespace wldm {

struct LatentDistribution {
  Tensor mu;
  Tensor log_var;
};

// Z split along channels: s = first c/2 channels, m = the rest.
struct LatentCode {
  Tensor s;
  Tensor m;

  Tensor z() const;
  static LatentCode from(const Tensor& z);
};

struct AutoencoderConfig {
  std::int64_t latent_channels = 8;
  std::vector<std::int64_t> widths{8, 16, 32};  // full, 1/2 and 1/4 resolution
  bool use_wrm = true;
};

inline constexpr Real kLogVarMin = -30;
inline constexpr Real kLogVarMax = 20;

// Variational encoder/decoder shared by both modalities. Parameters live in
// the store under "encoder/" and "decoder/".
class Autoencoder {
 public:
  Autoencoder(ParamStore& store, const AutoencoderConfig& config, Rng& rng);

  // x [N,1,D,H,W] with D,H,W divisible by 8. Latent is [N,c,D/4,H/4,W/4].
  LatentDistribution encode(const Tensor& x) const;
  // Output [N,1,4d,4h,4w] in [-1,1].
  Tensor decode(const Tensor& z) const;
  Tensor decode(const LatentCode& code) const { return decode(code.z()); }

  const AutoencoderConfig& config() const { return config_; }

 private:
  AutoencoderConfig config_;
  Conv3dLayer stem_;
  WaveletBlockParams enc0_, enc1_, enc2_;
  Conv3dLayer down0_, down1_;
  Conv3dLayer mu_head_, log_var_head_;

  Conv3dLayer dec_in_;
  WaveletBlockParams dec2_, dec1_, dec0_;
  Conv3dLayer up1_, up0_;
  GroupNormLayer out_norm_;
  Conv3dLayer out_conv_;
};

// Reparameterized draw mu + exp(log_var/2) * eps.
LatentCode sample_latent(const LatentDistribution& d, Rng& rng);

// -(cos(S_ct,S_mr) + cos(S_ct',S_mr')) + (cos(S_ct,S_ct') + cos(S_mr,S_mr')).
Tensor loss_structure(const Tensor& s_ct, const Tensor& s_mr, const Tensor& s_ct2, const Tensor& s_mr2);
// (cos(M_ct,M_mr) + cos(M_ct',M_mr')) - (cos(M_ct,M_ct') + cos(M_mr,M_mr')).
Tensor loss_modality(const Tensor& m_ct, const Tensor& m_mr, const Tensor& m_ct2, const Tensor& m_mr2);
// Codes in the order (CT_A, MR_A, CT_B, MR_B).
Tensor loss_disentangle(const LatentCode& ct_a, const LatentCode& mr_a, const LatentCode& ct_b,
                        const LatentCode& mr_b);
// 0.5 * mean(mu^2 + exp(log_var) - 1 - log_var).
Tensor loss_kl(const LatentDistribution& d);

// Patch discriminator: conv s2 -> leaky -> conv s2 -> leaky -> conv to one logit map.
struct Discriminator {
  Conv3dLayer c1, c2, c3;

  Discriminator(ParamStore& store, const std::string& name, Rng& rng, std::int64_t width = 8);
  // With frozen=true the parameters enter the graph as constants.
  Tensor logits(const Tensor& x, bool frozen = false) const;
};

struct AdversarialLoss {
  Tensor gen;   // mean softplus(-D(fake)), discriminator frozen
  Tensor disc;  // mean softplus(-D(real)) + mean softplus(D(fake)), fake detached
};
// Non-saturating logistic losses on precomputed logits.
Tensor gen_loss_from_logits(const Tensor& fake_logits);
Tensor disc_loss_from_logits(const Tensor& real_logits, const Tensor& fake_logits);
AdversarialLoss loss_adversarial(const Tensor& real, const Tensor& fake, const Discriminator& disc);

struct PretrainWeights {
  double alpha = 1e-6;  // KL
  double beta = 0.1;    // disentanglement
  double gamma = 0.05;  // adversarial
};

struct PretrainReport {
  double rec = 0, kl = 0, structure = 0, modality = 0, disentangle = 0, adv_gen = 0, adv_disc = 0, total = 0;
};

struct PretrainObjective {
  Tensor total;   // generator objective, differentiable
  Tensor recon;   // [4,1,D,H,W] in order CT_A, MR_A, CT_B, MR_B
  Tensor input;
  PretrainReport report;
};

// Builds the generator objective for two patients without updating anything.
// With beta == 0 the disentanglement term is reported but kept out of the graph.
PretrainObjective pretrain_objective(const Autoencoder& ae, const Discriminator& disc, const PhantomPair& a,
                                     const PhantomPair& b, const PretrainWeights& w, Rng& rng);

struct PretrainOptimizers {
  Adam generator;
  Adam discriminator;
};

// One update of encoder/decoder, then one of the discriminator. Requires
// distinct patient ids.
PretrainReport pretrain_step(const Autoencoder& ae, const Discriminator& disc, PretrainOptimizers& opt,
                             const PhantomPair& a, const PhantomPair& b, const PretrainWeights& w, Rng& rng);

}  // namespace wldm
