#include "wldm/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "wldm/ops.hpp"

namespace wldm {

namespace {

void check_t(int t, const NoiseSchedule& s, const char* what) {
  if (t < 1 || t > s.T)
    contract_fail(std::string(what) + ": timestep " + std::to_string(t) + " outside [1, " + std::to_string(s.T) + "]");
}

void check_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    contract_fail(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
}

}  // namespace

std::vector<int> uniform_steps(int T, int count) {
  require(T >= 1 && count >= 1, "uniform_steps needs T >= 1 and count >= 1");
  std::vector<int> out;
  for (int k = 1; k <= count; ++k) {
    const int t = static_cast<int>(std::lround(static_cast<double>(k) * T / count));
    if (t >= 1 && (out.empty() || t > out.back())) out.push_back(t);
  }
  return out;
}

NoiseSchedule make_schedule(int T, double beta1, double betaT, int sample_count) {
  if (T < 1) contract_fail("make_schedule: T must be at least 1");
  if (!(beta1 > 0 && beta1 <= betaT && betaT < 1))
    contract_fail("make_schedule: need 0 < beta1 <= betaT < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.assign(T + 1, 0.0);
  s.alpha.assign(T + 1, 1.0);
  s.alpha_bar.assign(T + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    s.beta[t] = T == 1 ? beta1 : beta1 + (betaT - beta1) * static_cast<double>(t - 1) / (T - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  }
  s.beta[T] = betaT;
  s.alpha[T] = 1.0 - betaT;
  s.alpha_bar[T] = s.alpha_bar[T - 1] * s.alpha[T];
  s.sample_steps = uniform_steps(T, sample_count);
  return s;
}

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& s) {
  return q_sample(z0, std::vector<int>(static_cast<std::size_t>(z0.ndim() > 0 ? z0.dim(0) : 1), t), eps, s);
}

Tensor q_sample(const Tensor& z0, const std::vector<int>& t, const Tensor& eps, const NoiseSchedule& s) {
  check_same(z0, eps, "q_sample");
  const std::int64_t n = z0.ndim() > 0 ? z0.dim(0) : 1;
  require(static_cast<std::int64_t>(t.size()) == n, "q_sample: one timestep per batch entry expected");
  const std::int64_t per = z0.numel() / n;
  Tensor out = Tensor::zeros(z0.shape());
  auto o = out.data();
  for (std::int64_t b = 0; b < n; ++b) {
    check_t(t[b], s, "q_sample");
    const double a = std::sqrt(s.alpha_bar[t[b]]), c = std::sqrt(1.0 - s.alpha_bar[t[b]]);
    for (std::int64_t i = b * per; i < (b + 1) * per; ++i)
      o[i] = static_cast<Real>(a * double(z0.data()[i]) + c * double(eps.data()[i]));
  }
  return out;
}

Tensor predict_z0(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& s) {
  check_same(z_t, eps_hat, "predict_z0");
  check_t(t, s, "predict_z0");
  const double a = std::sqrt(s.alpha_bar[t]), c = std::sqrt(1.0 - s.alpha_bar[t]);
  Tensor out = Tensor::zeros(z_t.shape());
  auto o = out.data();
  for (std::int64_t i = 0; i < z_t.numel(); ++i)
    o[i] = static_cast<Real>((double(z_t.data()[i]) - c * double(eps_hat.data()[i])) / a);
  return out;
}

Tensor ddim_step(const Tensor& z_t, int t, int t_prev, const NoisePredictor& model, const Tensor& cond,
                 const NoiseSchedule& s, const LatentBounds* bounds) {
  check_t(t, s, "ddim_step");
  if (t_prev < 0 || t_prev > t)
    contract_fail("ddim_step: t_prev " + std::to_string(t_prev) + " must lie in [0, t=" + std::to_string(t) + "]");
  if (bounds) {
    require(z_t.ndim() >= 2 && bounds->lo.size() == static_cast<std::size_t>(z_t.dim(1)) &&
                bounds->hi.size() == bounds->lo.size(),
            "ddim_step: bounds need one entry per channel of " + shape_str(z_t.shape()));
  }
  Tensor eps_hat;
  {
    NoGradGuard no_grad;
    eps_hat = model(z_t, std::vector<int>(static_cast<std::size_t>(z_t.dim(0)), t), cond);
  }
  check_same(z_t, eps_hat, "ddim_step");
  const double a = std::sqrt(s.alpha_bar[t]), c = std::sqrt(1.0 - s.alpha_bar[t]);
  const double ap = std::sqrt(s.alpha_bar[t_prev]), cp = std::sqrt(1.0 - s.alpha_bar[t_prev]);
  const std::int64_t channels = z_t.ndim() >= 2 ? z_t.dim(1) : 1;
  const std::int64_t inner = z_t.numel() / std::max<std::int64_t>(1, z_t.dim(0) * channels);
  Tensor out = Tensor::zeros(z_t.shape());
  auto o = out.data();
  for (std::int64_t i = 0; i < z_t.numel(); ++i) {
    double e = eps_hat.data()[i];
    double z0 = (double(z_t.data()[i]) - c * e) / a;
    if (bounds) {
      const auto ch = static_cast<std::size_t>((i / inner) % channels);
      const double clamped = std::clamp(z0, bounds->lo[ch], bounds->hi[ch]);
      if (clamped != z0) {
        z0 = clamped;
        e = (double(z_t.data()[i]) - a * z0) / c;
      }
    }
    o[i] = static_cast<Real>(ap * z0 + cp * e);
  }
  return out;
}

Tensor sample(const Tensor& cond, const NoisePredictor& model, const NoiseSchedule& s, Rng& rng,
              const std::vector<int>* steps, const LatentBounds* bounds) {
  const std::vector<int>& seq = steps ? *steps : s.sample_steps;
  require(!seq.empty(), "sample: no sampling steps configured");
  for (std::size_t i = 0; i < seq.size(); ++i) {
    check_t(seq[i], s, "sample");
    require(i == 0 || seq[i] > seq[i - 1], "sample: steps must be strictly increasing");
  }
  Tensor z = Tensor::zeros(cond.shape());
  rng.fill_normal(z.data());
  for (std::size_t i = seq.size(); i-- > 0;)
    z = ddim_step(z, seq[i], i == 0 ? 0 : seq[i - 1], model, cond, s, bounds);
  return z;
}

Tensor training_loss(const Tensor& z0, const Tensor& cond, const std::vector<int>& t, const Tensor& eps,
                     const NoisePredictor& model, const NoiseSchedule& s) {
  const Tensor z_t = q_sample(z0, t, eps, s);
  return mse_loss(model(z_t, t, cond), eps);
}

Tensor training_loss(const Tensor& z0, const Tensor& cond, Rng& rng, const NoisePredictor& model,
                     const NoiseSchedule& s) {
  std::vector<int> t(static_cast<std::size_t>(z0.dim(0)));
  for (auto& v : t) v = static_cast<int>(rng.uniform_int(1, s.T));
  Tensor eps = Tensor::zeros(z0.shape());
  rng.fill_normal(eps.data());
  return training_loss(z0, cond, t, eps, model, s);
}

}  // namespace wldm
