#include "wldm/nn.hpp"

#include <cmath>
#include <numeric>

namespace wldm {

Tensor ParamStore::add(const std::string& name, Tensor t) {
  require(!contains(name), "duplicate parameter name " + name);
  t.set_requires_grad(true);
  index_[name] = entries_.size();
  entries_.emplace_back(name, t);
  return t;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  require(it != index_.end(), "unknown parameter " + name);
  return entries_[it->second].second;
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  for (const auto& [_, t] : entries_) out.push_back(t);
  return out;
}

std::vector<Tensor> ParamStore::tensors_with_prefix(const std::string& prefix) const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : entries_)
    if (name.compare(0, prefix.size(), prefix) == 0) out.push_back(t);
  return out;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : entries_) t.zero_grad();
}

std::int64_t ParamStore::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

Conv3dLayer make_conv3d(ParamStore& store, const std::string& name, std::int64_t in, std::int64_t out,
                        std::int64_t k, Rng& rng, std::int64_t stride, std::int64_t groups, Init init) {
  require(in % groups == 0 && out % groups == 0, "conv layer " + name + ": channels not divisible by groups");
  const std::int64_t cg = in / groups;
  Tensor w = Tensor::zeros({out, cg, k, k, k});
  auto ws = w.data();
  switch (init) {
    case Init::Default: {
      const double std = 1.0 / std::sqrt(static_cast<double>(cg * k * k * k));
      for (auto& v : ws) v = static_cast<Real>(rng.normal() * std);
      break;
    }
    case Init::Identity: {
      require(in == out, "identity init needs in == out for " + name);
      const std::int64_t centre = (k / 2) * k * k + (k / 2) * k + k / 2;
      const std::int64_t og = out / groups;
      for (std::int64_t f = 0; f < out; ++f) {
        const std::int64_t local = f - (f / og) * og;  // channel within group
        if (local < cg) ws[(f * cg + local) * k * k * k + centre] = Real(1);
      }
      break;
    }
    case Init::Zero:
      break;
  }
  Conv3dLayer layer;
  layer.weight = store.add(name + "/weight", w);
  layer.bias = store.add(name + "/bias", Tensor::zeros({out}));
  layer.opts = {stride, k / 2, groups};
  return layer;
}

GroupNormLayer make_group_norm(ParamStore& store, const std::string& name, std::int64_t channels) {
  GroupNormLayer layer;
  layer.groups = std::gcd(channels, std::int64_t{8});
  layer.gamma = store.add(name + "/gamma", Tensor::full({channels}, Real(1)));
  layer.beta = store.add(name + "/beta", Tensor::zeros({channels}));
  return layer;
}

LinearLayer make_linear(ParamStore& store, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng,
                        Init init) {
  Tensor w = Tensor::zeros({in, out});
  if (init == Init::Default) {
    const double std = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : w.data()) v = static_cast<Real>(rng.normal() * std);
  }
  LinearLayer layer;
  layer.weight = store.add(name + "/weight", w);
  layer.bias = store.add(name + "/bias", Tensor::zeros({out}));
  return layer;
}

Adam::Adam(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), Real(0));
    v_.emplace_back(p.numel(), Real(0));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<Real>(config_.beta1), b2 = static_cast<Real>(config_.beta2);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto g = params_[i].grad_view();
    if (g.empty()) continue;
    auto x = params_[i].data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < x.size(); ++j) {
      m[j] = b1 * m[j] + (1 - b1) * g[j];
      v[j] = b2 * v[j] + (1 - b2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      x[j] -= static_cast<Real>(config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::vector<std::pair<std::string, Tensor>> Adam::state() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("t", Tensor::scalar(static_cast<Real>(t_)));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.emplace_back("m/" + std::to_string(i), Tensor::from(params_[i].shape(), m_[i]));
    out.emplace_back("v/" + std::to_string(i), Tensor::from(params_[i].shape(), v_[i]));
  }
  return out;
}

void Adam::load_state(const std::vector<std::pair<std::string, Tensor>>& entries) {
  for (const auto& [name, t] : entries) {
    if (name == "t") {
      t_ = static_cast<std::int64_t>(std::llround(t.item()));
      continue;
    }
    const bool is_m = name.rfind("m/", 0) == 0;
    const bool is_v = name.rfind("v/", 0) == 0;
    require(is_m || is_v, "unknown optimizer state entry " + name);
    const auto i = static_cast<std::size_t>(std::stoul(name.substr(2)));
    require(i < params_.size() && t.numel() == params_[i].numel(), "optimizer state does not match parameters");
    auto& dst = is_m ? m_[i] : v_[i];
    dst.assign(t.data().begin(), t.data().end());
  }
}

}  // namespace wldm
