#pragma once

// Scalar-loop reference implementations shared by the tests.

#include <cmath>
#include <vector>

#include "wldm/diffusion.hpp"
#include "wldm/tensor.hpp"

namespace wldm::testing {

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += double(a.data()[i]) * double(b.data()[i]);
  return s;
}

inline double cos_loop(const Tensor& a, const Tensor& b) {
  return dot(a, b) / (std::sqrt(dot(a, a)) * std::sqrt(dot(b, b)));
}

inline double mean_sq_diff(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = double(a.data()[i]) - double(b.data()[i]);
    s += d * d;
  }
  return s / static_cast<double>(a.numel());
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
  return m;
}

inline double softplus_ref(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// Noise predictor that knows the clean latent: returns the exact eps that
// explains z_t, computed per element in double.
inline NoisePredictor oracle_predictor(const Tensor& z0, const NoiseSchedule& s) {
  return [z0, &s](const Tensor& z_t, const std::vector<int>& t, const Tensor&) {
    Tensor eps = Tensor::zeros(z_t.shape());
    const std::int64_t per = z_t.numel() / z_t.dim(0);
    for (std::int64_t b = 0; b < z_t.dim(0); ++b) {
      const double ab = s.alpha_bar[t[b]];
      for (std::int64_t i = b * per; i < (b + 1) * per; ++i)
        eps.data()[i] = static_cast<Real>((double(z_t.data()[i]) - std::sqrt(ab) * double(z0.data()[i])) /
                                          std::sqrt(1.0 - ab));
    }
    return eps;
  };
}

}  // namespace wldm::testing
