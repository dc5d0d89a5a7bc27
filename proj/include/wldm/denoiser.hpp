#pragma once

#include <optional>
#include <string>
#include <vector>

#include "wldm/nn.hpp"
#include "wldm/wavelet_blocks.hpp"

namespace wldm {

// Query from the skip feature, key and value from the resized condition half.
// All projections are 1^3 convolutions to the skip width.
struct AttentionParams {
  Conv3dLayer q, k, v;
};

struct DscaParams {
  AttentionParams sem;  // structure emphasis, keyed on S_MR
  AttentionParams mfm;  // modality filtering, keyed on M_MR
};

AttentionParams make_attention(ParamStore& store, const std::string& name, std::int64_t width,
                               std::int64_t cond_channels, Rng& rng, Init init = Init::Default);

// Single-head dense attention over voxels: softmax(Q K^T / sqrt(C)) V with
// Q from x [N,C,d,h,w] and K, V from cond [N,c',d,h,w]. Returns [N,C,d,h,w].
// `weights`, when given, receives the [N, n, n] attention matrix.
Tensor attend(const Tensor& x, const Tensor& cond, const AttentionParams& p, Tensor* weights = nullptr);

// A_stru = attend(E, S). `s_mr` must already match E's spatial geometry.
Tensor sem(const Tensor& e, const Tensor& s_mr, const AttentionParams& p, Tensor* weights = nullptr);
// A_modal = Q_m - attend(E, M).
Tensor mfm(const Tensor& e, const Tensor& m_mr, const AttentionParams& p, Tensor* weights = nullptr);

// concat(E + A_stru + A_modal, D) along channels. The condition halves are
// trilinearly resized to E's geometry.
Tensor dsca(const Tensor& e, const Tensor& d, const Tensor& s_mr, const Tensor& m_mr, const DscaParams& p);

struct DenoiserConfig {
  std::int64_t latent_channels = 8;
  std::int64_t base_width = 32;
  std::int64_t scales = 3;
  std::int64_t blocks_per_stage = 2;
  bool use_wrm = true;
  bool use_dsca = true;
};

// Conditional U-Net eps_theta(z_t, t, z_mr). Parameters live under "denoiser/".
class Denoiser {
 public:
  Denoiser(ParamStore& store, const DenoiserConfig& config, Rng& rng);

  // z_noisy and z_cond [N,c,d,h,w] with d,h,w divisible by 2^(scales-1);
  // one timestep per batch entry.
  Tensor forward(const Tensor& z_noisy, const std::vector<int>& t, const Tensor& z_cond) const;

  const DenoiserConfig& config() const { return config_; }
  std::int64_t width(std::int64_t scale) const { return config_.base_width << scale; }
  // Present only when DSCA is enabled.
  const std::vector<DscaParams>& dsca_params() const { return dsca_; }

 private:
  struct Stage {
    std::optional<Conv3dLayer> down;  // into this scale from the finer one
    std::vector<WaveletBlockParams> blocks;
  };
  struct UpStage {
    std::vector<WaveletBlockParams> blocks;
    std::optional<Conv3dLayer> up;  // to the next finer scale
  };

  DenoiserConfig config_;
  std::int64_t time_dim_ = 0;
  LinearLayer time1_, time2_;
  Conv3dLayer stem_;
  std::vector<Stage> enc_;
  WaveletBlockParams mid_;
  std::vector<UpStage> dec_;  // indexed by scale
  std::vector<DscaParams> dsca_;
  GroupNormLayer out_norm_;
  Conv3dLayer out_conv_;
};

}  // namespace wldm
