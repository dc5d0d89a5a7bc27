#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "wldm/ops.hpp"
#include "wldm/rng.hpp"

namespace wldm {

// Ordered collection of named trainable tensors. Names are hierarchical,
// slash-separated ("encoder/stem/weight").
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;
  // Tensors whose name starts with `prefix`.
  std::vector<Tensor> tensors_with_prefix(const std::string& prefix) const;
  void zero_grad();
  std::int64_t parameter_count() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

enum class Init { Default, Zero, Identity };

struct Conv3dLayer {
  Tensor weight;
  Tensor bias;
  Conv3dOptions opts;

  Tensor operator()(const Tensor& x) const { return conv3d(x, weight, bias, opts); }
  std::int64_t in_channels() const { return weight.dim(1) * opts.groups; }
  std::int64_t out_channels() const { return weight.dim(0); }
};

// Same-padded k^3 convolution. Identity init requires in == out and puts a
// one at the kernel centre of each channel's own tap.
Conv3dLayer make_conv3d(ParamStore& store, const std::string& name, std::int64_t in, std::int64_t out,
                        std::int64_t k, Rng& rng, std::int64_t stride = 1, std::int64_t groups = 1,
                        Init init = Init::Default);

struct GroupNormLayer {
  Tensor gamma;
  Tensor beta;
  std::int64_t groups = 1;

  Tensor operator()(const Tensor& x) const { return group_norm(x, groups, gamma, beta); }
};

// Group count gcd(channels, 8).
GroupNormLayer make_group_norm(ParamStore& store, const std::string& name, std::int64_t channels);

struct LinearLayer {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

LinearLayer make_linear(ParamStore& store, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng,
                        Init init = Init::Default);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config);

  // Applies one update from the accumulated gradients; parameters without a
  // gradient are left untouched.
  void step();
  void zero_grad();

  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

  // Moment buffers, for checkpointing ("m/<i>", "v/<i>", "t").
  std::vector<std::pair<std::string, Tensor>> state() const;
  void load_state(const std::vector<std::pair<std::string, Tensor>>& entries);

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<Real>> m_, v_;
  AdamConfig config_;
  std::int64_t t_ = 0;
};

}  // namespace wldm
