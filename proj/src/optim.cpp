#include "key2mesh/optim.hpp"

#include <cmath>

#include "key2mesh/error.hpp"
#include "key2mesh/simd/kernels.hpp"

namespace k2m {

Adam::Adam(std::vector<Parameter*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  if (!(config_.lr >= 0.0)) throw Error(ErrorCode::Config, "Adam learning rate must be >= 0");
  for (Parameter* p : params_) {
    if (!p->trainable) {
      throw Error(ErrorCode::Contract, "Adam given frozen parameter '" + p->name + "'");
    }
    state_.m.emplace_back(p->value.shape(), 0.0);
    state_.v.emplace_back(p->value.shape(), 0.0);
    if (p->grad.size() != p->value.size()) p->zero_grad();
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void Adam::step() {
  for (Parameter* p : params_) {
    if (p->grad.size() != p->value.size()) {
      throw Error(ErrorCode::Dimension, "gradient shape mismatch for '" + p->name + "'");
    }
    if (!p->grad.all_finite()) {
      throw Error(ErrorCode::NonFinite, "non-finite gradient in parameter '" + p->name + "'");
    }
  }
  state_.t += 1;
  const double t = static_cast<double>(state_.t);
  const double step_size = config_.lr / (1.0 - std::pow(config_.beta1, t));
  const double corr2 = 1.0 - std::pow(config_.beta2, t);
  const auto& kern = simd::kernels();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    kern.adam(p.value.size(), p.value.data(), p.grad.data(), state_.m[i].data(),
              state_.v[i].data(), config_.beta1, config_.beta2, step_size, corr2, config_.eps);
  }
}

}  // namespace k2m
