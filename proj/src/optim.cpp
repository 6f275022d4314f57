#include "fedcpc/optim.hpp"

#include <cmath>

#include "fedcpc/errors.hpp"

namespace fedcpc::optim {

std::string to_string(Kind kind) {
  switch (kind) {
    case Kind::adam:
      return "adam";
    case Kind::plain:
      return "plain";
    case Kind::sgd:
      return "sgd";
  }
  return "?";
}

Kind parse_kind(const std::string& text) {
  if (text == "adam") return Kind::adam;
  if (text == "plain") return Kind::plain;
  if (text == "sgd") return Kind::sgd;
  throw ConfigError("unknown optimizer '" + text + "' (expected adam, plain or sgd)");
}

void OptimizerConfig::validate() const {
  if (kind == Kind::plain) return;
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("optimizer lr must be >= 0");
  if (kind == Kind::adam) {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("adam eps must be > 0");
  }
}

void adam_step(std::span<double> weights, std::span<const double> grad, AdamState& state,
               const OptimizerConfig& config) {
  if (weights.size() != grad.size() || state.m.size() != grad.size() || state.v.size() != grad.size()) {
    throw DimensionError("adam_step: weight, gradient and moment lengths differ");
  }
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * grad[i];
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
    double m_hat = state.m[i] / c1;
    double v_hat = state.v[i] / c2;
    weights[i] -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
  }
}

void sgd_step(std::span<double> weights, std::span<const double> grad, double lr) {
  if (weights.size() != grad.size()) throw DimensionError("sgd_step: weight and gradient lengths differ");
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] -= lr * grad[i];
}

}  // namespace fedcpc::optim
