#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace fedcpc::optim {

enum class Kind {
  adam,
  plain,  // server only: adopt the aggregate as the new weights
  sgd,
};

std::string to_string(Kind kind);
Kind parse_kind(const std::string& text);

struct OptimizerConfig {
  Kind kind = Kind::adam;
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

/// Bias-corrected Adam moments for a flat parameter vector.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t steps = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// weights -= lr * m_hat / (sqrt(v_hat) + eps), after folding `grad` into the moments.
void adam_step(std::span<double> weights, std::span<const double> grad, AdamState& state,
               const OptimizerConfig& config);

void sgd_step(std::span<double> weights, std::span<const double> grad, double lr);

}  // namespace fedcpc::optim
