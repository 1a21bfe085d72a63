#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "vitbind/errors.hpp"
#include "vitbind/tensor.hpp"

namespace vitbind {

struct StepSchedule {
  std::size_t step_size_epochs = 8;
  double gamma = 0.2;
};

struct AdamState {
  std::size_t step = 0;
  Tensor m;
  Tensor v;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  StepSchedule schedule;

  AdamState() = default;
  AdamState(const Shape& param_shape, double learning_rate, StepSchedule sched = {})
      : m(param_shape), v(param_shape), lr(learning_rate), schedule(sched) {
    validate();
  }

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
    if (!(schedule.gamma >= 0.0 && schedule.gamma <= 1.0)) throw ConfigError("adam: gamma must lie in [0, 1]");
  }

  // Called by the trainer after each completed epoch (1-based count).
  void end_epoch(std::size_t completed_epochs) {
    if (schedule.step_size_epochs > 0 && completed_epochs % schedule.step_size_epochs == 0) lr *= schedule.gamma;
  }
};

struct StepOutcome {
  bool applied = true;
  std::string diagnostic;
};

inline StepOutcome check_finite_gradient(const Tensor& grads) {
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      return {false, "non-finite gradient at element " + std::to_string(i) + " (value " + std::to_string(grads[i]) +
                         "); batch rejected"};
    }
  }
  return {};
}

// Bias-corrected Adam. A batch with any non-finite gradient is rejected and
// leaves both params and state untouched.
inline StepOutcome adam_step(Tensor& params, const Tensor& grads, AdamState& state) {
  if (params.shape() != grads.shape() || params.shape() != state.m.shape()) {
    throw DataError("adam_step: shape mismatch between params " + shape_string(params.shape()) + ", grads " +
                    shape_string(grads.shape()) + " and state " + shape_string(state.m.shape()));
  }
  StepOutcome outcome = check_finite_gradient(grads);
  if (!outcome.applied) return outcome;

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double m = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    const double v = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    state.m[i] = static_cast<float>(m);
    state.v[i] = static_cast<float>(v);
    const double m_hat = m / correction1;
    const double v_hat = v / correction2;
    params[i] = static_cast<float>(params[i] - state.lr * m_hat / (std::sqrt(v_hat) + state.eps));
  }
  return outcome;
}

}  // namespace vitbind
