#pragma once

#include "narf/autodiff.hpp"

#include <cstdint>
#include <vector>

namespace narf {

struct AdamConfig {
  double learning_rate = 0.01;
  // Multiplicative learning-rate decay applied after every step.
  double decay = 0.99995;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Moments are stored in ParameterSet order.
struct AdamState {
  AdamConfig config;
  double learning_rate = 0.0;
  std::uint64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

class Adam {
 public:
  Adam(const ad::ParameterSet& params, AdamConfig config);

  // Applies one bias-corrected Adam update from Parameter::grad, then decays
  // the learning rate. Throws Error naming the parameter if any gradient is
  // not finite; parameters are left untouched in that case.
  void step(ad::ParameterSet& params);

  double learning_rate() const { return state_.learning_rate; }
  std::uint64_t steps() const { return state_.step; }
  const AdamState& state() const { return state_; }
  void restore(AdamState state);

 private:
  AdamState state_;
};

}  // namespace narf
