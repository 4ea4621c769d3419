#pragma once

#include <map>
#include <string>
#include <vector>

#include "ctflab/numerics/autodiff.hpp"
#include "ctflab/numerics/tensor.hpp"

namespace ctflab::numerics {

// Named parameters with optional momentum buffers. Iteration is lexicographic
// by name (std::map order), which every serializer and distance relies on.
class ParamSet {
 public:
  void set(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return params_.contains(name); }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  std::size_t size() const { return params_.size(); }
  std::size_t total_values() const;
  std::vector<std::string> names() const;

  const std::map<std::string, Tensor>& entries() const { return params_; }
  std::map<std::string, Tensor>& entries() { return params_; }

  bool has_momentum(const std::string& name) const { return momentum_.contains(name); }
  const Tensor& momentum(const std::string& name) const;
  void set_momentum(const std::string& name, Tensor buffer);
  const std::map<std::string, Tensor>& momentum_buffers() const { return momentum_; }
  void clear_momentum() { momentum_.clear(); }

  // Same names and shapes as `other` (momentum buffers ignored).
  bool aligned_with(const ParamSet& other) const;

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, Tensor> momentum_;
};

struct OptimConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  void validate() const;
};

// v <- momentum * v + (grad + weight_decay * p);  p <- p - lr * v.
// Momentum buffers are created as zeros on first use.
void sgd_step(ParamSet& params, const Gradients& grads, const OptimConfig& cfg);

// Euclidean distance between two aligned parameter sets, over all values.
double l2_param_distance(const ParamSet& a, const ParamSet& b);

}  // namespace ctflab::numerics
