#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "wldm/ops.hpp"
#include "wldm/rng.hpp"

namespace wldm::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0, bool requires_grad = false) {
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (auto& v : t.data()) v = static_cast<Real>(rng.normal() * scale);
  return t;
}

struct GradCheckResult {
  double max_rel_error = 0;  // worst input
  std::size_t worst_input = 0;
};

// Central differences of L = sum(f(inputs) * R) with a fixed random R,
// compared per input against reverse-mode gradients by relative L2 error.
// With probe > 0 only that many randomly chosen coordinates of each input are
// perturbed (0 = all). Gradients below 1e-7 in norm count as zero.
inline GradCheckResult gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                 std::vector<Tensor> inputs, double h = 1e-3, std::uint64_t seed = 7,
                                 std::int64_t probe = 0) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Rng rng(seed, 99);
  Tensor out = f(inputs);
  Tensor weights = random_tensor(out.shape(), rng);
  auto loss_of = [&](const Tensor& y) {
    double acc = 0;
    for (std::int64_t i = 0; i < y.numel(); ++i) acc += static_cast<double>(y.data()[i]) * weights.data()[i];
    return acc;
  };
  sum(mul(out, weights)).backward();

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto analytic = inputs[k].grad();
    auto xs = inputs[k].data();
    std::vector<std::int64_t> coords;
    if (probe > 0 && probe < inputs[k].numel()) {
      for (std::int64_t j = 0; j < probe; ++j) coords.push_back(rng.uniform_int(0, inputs[k].numel() - 1));
    } else {
      for (std::int64_t j = 0; j < inputs[k].numel(); ++j) coords.push_back(j);
    }
    double diff2 = 0, a2 = 0, fd2 = 0;
    for (const std::int64_t i : coords) {
      const Real saved = xs[i];
      xs[i] = static_cast<Real>(saved + h);
      const double up = loss_of(f(inputs));
      xs[i] = static_cast<Real>(saved - h);
      const double down = loss_of(f(inputs));
      xs[i] = saved;
      const double fd = (up - down) / (2 * h);
      diff2 += (fd - analytic[i]) * (fd - analytic[i]);
      a2 += static_cast<double>(analytic[i]) * analytic[i];
      fd2 += fd * fd;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(fd2), 1e-7});
    const double rel = std::sqrt(diff2) / denom;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_input = k;
    }
  }
  return result;
}

}  // namespace wldm::testing
