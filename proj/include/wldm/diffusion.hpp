#pragma once

#include <functional>
#include <vector>

#include "wldm/rng.hpp"
#include "wldm/tensor.hpp"

namespace wldm {

// Tables are indexed by timestep t in [0, T]; entry 0 holds the clean-signal
// convention beta = 0, alpha_bar = 1.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<int> sample_steps;  // strictly increasing, ends at T
};

// round(k T / S) for k = 1..S, duplicates removed.
std::vector<int> uniform_steps(int T, int count);

NoiseSchedule make_schedule(int T = 1000, double beta1 = 1e-4, double betaT = 0.2, int sample_count = 50);

// sqrt(ab_t) z0 + sqrt(1 - ab_t) eps, one timestep per batch entry or a
// single timestep for all.
Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& s);
Tensor q_sample(const Tensor& z0, const std::vector<int>& t, const Tensor& eps, const NoiseSchedule& s);

// (z_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t).
Tensor predict_z0(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& s);

// eps_theta(z_t, t, cond) with one timestep per batch entry.
using NoisePredictor = std::function<Tensor(const Tensor& z_t, const std::vector<int>& t, const Tensor& cond)>;

// Per-channel box for predicted clean latents. A prediction outside it is
// clamped and the noise estimate is recomputed from the clamped value.
struct LatentBounds {
  std::vector<double> lo, hi;  // one entry per channel
};

// Deterministic update from level t to t_prev <= t (t_prev = 0 is the clean
// end): predict z0, then re-noise with the same predicted eps. Inside the
// bounds (or without any) the update is unchanged.
Tensor ddim_step(const Tensor& z_t, int t, int t_prev, const NoisePredictor& model, const Tensor& cond,
                 const NoiseSchedule& s, const LatentBounds* bounds = nullptr);

// Starts from standard normal noise shaped like cond and walks the sample
// steps (or `steps` when given) down to 0.
Tensor sample(const Tensor& cond, const NoisePredictor& model, const NoiseSchedule& s, Rng& rng,
              const std::vector<int>* steps = nullptr, const LatentBounds* bounds = nullptr);

// Mean squared error between drawn noise and the prediction at the given
// per-example timesteps.
Tensor training_loss(const Tensor& z0, const Tensor& cond, const std::vector<int>& t, const Tensor& eps,
                     const NoisePredictor& model, const NoiseSchedule& s);
// Draws t uniformly from [1, T] per example and eps ~ N(0, 1) from rng.
Tensor training_loss(const Tensor& z0, const Tensor& cond, Rng& rng, const NoisePredictor& model,
                     const NoiseSchedule& s);

}  // namespace wldm
