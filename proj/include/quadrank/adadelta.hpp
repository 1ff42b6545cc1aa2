#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "quadrank/core.hpp"

namespace quadrank {

// Running averages of squared gradients and squared updates, one pair per
// parameter. No learning-rate multiplier: the step size comes entirely from
// the ratio of the two accumulators.
struct AdadeltaState {
  double rho = 0.9;
  double epsilon = 1e-6;
  std::vector<double> acc_grad_sq;
  std::vector<double> acc_update_sq;

  AdadeltaState() = default;
  explicit AdadeltaState(std::size_t n, double rho_ = 0.9, double epsilon_ = 1e-6)
      : rho(rho_), epsilon(epsilon_), acc_grad_sq(n, 0.0), acc_update_sq(n, 0.0) {}

  std::size_t size() const { return acc_grad_sq.size(); }
  bool operator==(const AdadeltaState&) const = default;
};

// Eg <- rho Eg + (1 - rho) g^2
// d  <- -sqrt(Ex + eps) / sqrt(Eg + eps) * g
// Ex <- rho Ex + (1 - rho) d^2
// w  <- w + d
// A non-finite gradient aborts the whole step before anything is modified.
template <class T>
void adadelta_step(AdadeltaState& state, std::span<T> params, std::span<const T> grads) {
  if (params.size() != grads.size() || params.size() != state.size())
    throw Error("adadelta_step: size mismatch (params " + std::to_string(params.size()) +
                ", grads " + std::to_string(grads.size()) + ", state " +
                std::to_string(state.size()) + ")");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(static_cast<double>(grads[i])))
      throw Error("adadelta_step: non-finite gradient at parameter " + std::to_string(i));
  }
  const double rho = state.rho;
  const double eps = state.epsilon;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    double& eg = state.acc_grad_sq[i];
    double& ex = state.acc_update_sq[i];
    eg = rho * eg + (1 - rho) * g * g;
    const double delta = -std::sqrt(ex + eps) / std::sqrt(eg + eps) * g;
    ex = rho * ex + (1 - rho) * delta * delta;
    params[i] = static_cast<T>(static_cast<double>(params[i]) + delta);
  }
}

}  // namespace quadrank
