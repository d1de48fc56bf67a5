#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "saane/tensor.hpp"

namespace saane {

struct AdamConfig {
  double lr = 5e-5;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected adaptive-moment optimizer. Weight decay is coupled: the
// decay term is added to the gradient before the moment update.
template <typename T>
class AdamOptimizer {
 public:
  AdamOptimizer(const std::vector<Parameter<T>*>& params, const AdamConfig& cfg)
      : cfg_(cfg) {
    slots_.reserve(params.size());
    for (Parameter<T>* p : params) {
      slots_.push_back(Slot{Tensor<double>(p->value.shape), Tensor<double>(p->value.shape)});
    }
  }

  std::uint64_t step_count() const { return step_; }

  // Applies one update from the gradients currently held by the parameters.
  // The parameter list must match the constructor's, in order.
  void step(const std::vector<Parameter<T>*>& params) {
    if (params.size() != slots_.size()) {
      throw Error("adam step: parameter list does not match optimizer state");
    }
    for (Parameter<T>* p : params) {
      if (!p->grad.all_finite()) {
        throw Error("adam step aborted: non-finite gradient in parameter '" + p->name + "'");
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t s = 0; s < params.size(); ++s) {
      Parameter<T>& p = *params[s];
      Slot& slot = slots_[s];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = static_cast<double>(p.grad[i]) +
                         cfg_.weight_decay * static_cast<double>(p.value[i]);
        slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * g;
        slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double m_hat = slot.m[i] / bc1;
        const double v_hat = slot.v[i] / bc2;
        p.value[i] -= static_cast<T>(cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.epsilon));
      }
    }
  }

 private:
  struct Slot {
    Tensor<double> m, v;
  };

  AdamConfig cfg_;
  std::vector<Slot> slots_;
  std::uint64_t step_ = 0;
};

}  // namespace saane
