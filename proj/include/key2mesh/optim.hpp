#pragma once

#include <cstdint>
#include <vector>

#include "key2mesh/graph.hpp"

namespace k2m {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter moments plus the shared step counter.
struct OptimState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t t = 0;
};

/// Adam over a fixed list of parameters. Non-trainable entries are rejected
/// at construction so a frozen copy can never be visited.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig config);

  /// One bias-corrected update from each parameter's `grad`. Throws
  /// NonFinite naming the first offending parameter before touching any value.
  void step();
  void zero_grad();

  void set_lr(double lr) { config_.lr = lr; }
  const AdamConfig& config() const { return config_; }
  const OptimState& state() const { return state_; }
  const std::vector<Parameter*>& params() const { return params_; }

 private:
  std::vector<Parameter*> params_;
  AdamConfig config_;
  OptimState state_;
};

}  // namespace k2m
