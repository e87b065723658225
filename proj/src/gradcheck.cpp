#include "narf/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace narf {

namespace {

struct Probe {
  double loss;
  std::vector<std::uint8_t> kinks;
};

Probe evaluate(const LossBuilder& build) {
  ad::Tape tape({.record_gradients = false, .track_kinks = true});
  const ad::Var loss = build(tape);
  const auto sig = tape.kink_signature();
  return {loss.value()[0], {sig.begin(), sig.end()}};
}

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult finite_difference_check(ad::ParameterSet& params, const LossBuilder& build,
                                        const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("finite_difference_check: step must be > 0");

  params.zero_grad();
  std::vector<std::uint8_t> base_kinks;
  {
    ad::Tape tape({.record_gradients = true, .track_kinks = true});
    const ad::Var loss = build(tape);
    tape.backward(loss);
    const auto sig = tape.kink_signature();
    base_kinks.assign(sig.begin(), sig.end());
  }

  GradCheckResult result;
  const double h = options.step;
  for (auto& p : params) {
    const std::size_t n = p.value.size();
    std::size_t stride = 1;
    if (options.max_coords_per_parameter > 0 && n > options.max_coords_per_parameter) {
      stride = (n + options.max_coords_per_parameter - 1) / options.max_coords_per_parameter;
    }
    for (std::size_t i = 0; i < n; i += stride) {
      const double original = p.value[i];
      auto probe = [&](double offset) {
        p.value[i] = original + offset;
        return evaluate(build);
      };
      std::vector<Probe> probes{probe(h), probe(-h)};
      if (options.fourth_order) {
        probes.push_back(probe(2.0 * h));
        probes.push_back(probe(-2.0 * h));
      }
      p.value[i] = original;
      const bool crossed = std::any_of(probes.begin(), probes.end(),
                                       [&](const Probe& q) { return q.kinks != base_kinks; });
      if (crossed) {
        ++result.skipped_kinks;
        continue;
      }
      const double numeric =
          options.fourth_order
              ? (8.0 * (probes[0].loss - probes[1].loss) - (probes[2].loss - probes[3].loss)) / (12.0 * h)
              : (probes[0].loss - probes[1].loss) / (2.0 * h);
      const double err = relative_error(p.grad[i], numeric, options.floor);
      ++result.checked;
      if (err > result.max_relative_error || result.worst_parameter.empty()) {
        if (err >= result.max_relative_error) {
          result.max_relative_error = err;
          result.worst_parameter = p.name;
          result.worst_index = i;
        }
      }
    }
  }
  return result;
}

}  // namespace narf
