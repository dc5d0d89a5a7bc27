#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace wldm {

// The library is compiled twice: once with 32-bit reals (the production
// build) and once with 64-bit reals for finite-difference gradient checks.
#ifdef WLDM_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

// Precondition failures: bad shapes, out-of-range arguments, odd extents.
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced by an op while debug checks are on.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed serialized input (volume files, checkpoints, configs).
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

[[noreturn]] void contract_fail(const std::string& what);

inline void require(bool cond, const std::string& what) {
  if (!cond) contract_fail(what);
}

}  // namespace wldm
