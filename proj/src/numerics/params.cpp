#include "ctflab/numerics/params.hpp"

#include <cmath>

#include "ctflab/error.hpp"

namespace ctflab::numerics {

void ParamSet::set(const std::string& name, Tensor value) {
  auto it = momentum_.find(name);
  if (it != momentum_.end() && it->second.shape() != value.shape()) momentum_.erase(it);
  params_.insert_or_assign(name, std::move(value));
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown parameter: " + name);
  return it->second;
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown parameter: " + name);
  return it->second;
}

std::size_t ParamSet::total_values() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

const Tensor& ParamSet::momentum(const std::string& name) const {
  auto it = momentum_.find(name);
  if (it == momentum_.end()) throw Error("no momentum buffer for parameter: " + name);
  return it->second;
}

void ParamSet::set_momentum(const std::string& name, Tensor buffer) {
  if (buffer.shape() != at(name).shape()) {
    throw ShapeError("momentum buffer shape " + shape_string(buffer.shape()) +
                     " differs from parameter " + name);
  }
  momentum_.insert_or_assign(name, std::move(buffer));
}

bool ParamSet::aligned_with(const ParamSet& other) const {
  if (params_.size() != other.params_.size()) return false;
  auto a = params_.begin();
  auto b = other.params_.begin();
  for (; a != params_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.shape() != b->second.shape()) return false;
  }
  return true;
}

void OptimConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
}

void sgd_step(ParamSet& params, const Gradients& grads, const OptimConfig& cfg) {
  cfg.validate();
  if (grads.size() != params.size()) {
    throw ShapeError("sgd_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  }
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw ShapeError("sgd_step: gradient for unknown parameter " + name);
    if (params.at(name).shape() != g.shape()) {
      throw ShapeError("sgd_step: gradient shape mismatch for " + name);
    }
  }
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    if (!params.has_momentum(name)) params.set_momentum(name, Tensor(p.shape(), 0.0));
    Tensor v = params.momentum(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = cfg.momentum * v[i] + (g[i] + cfg.weight_decay * p[i]);
      p[i] -= cfg.learning_rate * v[i];
    }
    require_finite(p, "sgd_step");
    params.set_momentum(name, std::move(v));
  }
}

double l2_param_distance(const ParamSet& a, const ParamSet& b) {
  if (!a.aligned_with(b)) throw ShapeError("l2_param_distance: parameter sets are not aligned");
  double acc = 0.0;
  auto ib = b.entries().begin();
  for (const auto& [name, ta] : a.entries()) {
    const Tensor& tb = (ib++)->second;
    for (std::size_t i = 0; i < ta.size(); ++i) {
      const double d = ta[i] - tb[i];
      acc += d * d;
    }
  }
  return std::sqrt(acc);
}

}  // namespace ctflab::numerics
