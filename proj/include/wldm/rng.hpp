#pragma once

#include <cstdint>
#include <span>

#include "wldm/core.hpp"

namespace wldm {

// Counter-based generator: draw i of stream s is a pure function of
// (seed, s, i), so runs are reproducible and streams can be split freely.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  // Independent child stream; does not advance this generator.
  Rng split(std::uint64_t stream_id) const;

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  void fill_normal(std::span<Real> out);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace wldm
