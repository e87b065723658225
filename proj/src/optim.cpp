#include "narf/optim.hpp"

#include "narf/error.hpp"

#include <cmath>

namespace narf {

Adam::Adam(const ad::ParameterSet& params, AdamConfig config) {
  if (!(config.learning_rate > 0.0)) throw Error("Adam: learning rate must be > 0");
  if (!(config.decay > 0.0 && config.decay <= 1.0)) throw Error("Adam: decay must lie in (0, 1]");
  state_.config = config;
  state_.learning_rate = config.learning_rate;
  for (const auto& p : params) {
    state_.first_moment.emplace_back(p.value.rows(), p.value.cols());
    state_.second_moment.emplace_back(p.value.rows(), p.value.cols());
  }
}

void Adam::restore(AdamState state) { state_ = std::move(state); }

void Adam::step(ad::ParameterSet& params) {
  if (params.size() != state_.first_moment.size()) {
    throw Error("Adam: parameter count changed since construction");
  }
  for (const auto& p : params) {
    if (!p.grad.all_finite()) throw DivergenceError("Adam: non-finite gradient for parameter '" + p.name + "'");
  }
  const AdamConfig& c = state_.config;
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  const double lr = state_.learning_rate;

  std::size_t k = 0;
  for (auto& p : params) {
    Tensor& m = state_.first_moment[k];
    Tensor& v = state_.second_moment[k];
    if (!m.same_shape(p.value)) throw ShapeError("Adam: moment shape mismatch for '" + p.name + "'");
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p.value[i] -= lr * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
    ++k;
  }
  state_.learning_rate *= c.decay;
}

}  // namespace narf
