#include "narf/encoding.hpp"

#include "narf/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace narf {

namespace {

void check_levels(int levels) {
  if (levels < 1) throw Error("positional_encode: levels must be >= 1, got " + std::to_string(levels));
}

// Level 0 is evaluated directly; higher levels use the double-angle
// identities, which keeps the error below 1e-13 for the level counts used
// here while avoiding one sin/cos pair per level.
inline void encode_scalar(double p, int levels, double* out) {
  double s = std::sin(std::numbers::pi * p);
  double c = std::cos(std::numbers::pi * p);
  out[0] = s;
  out[1] = c;
  for (int l = 1; l < levels; ++l) {
    const double s2 = std::clamp(2.0 * s * c, -1.0, 1.0);
    const double c2 = std::clamp((c - s) * (c + s), -1.0, 1.0);
    s = s2;
    c = c2;
    out[2 * l] = s;
    out[2 * l + 1] = c;
  }
}

}  // namespace

void EncodingConfig::validate() const {
  if (position_levels < 1 || other_levels < 1) throw Error("EncodingConfig: levels must be >= 1");
}

std::vector<double> positional_encode(std::span<const double> p, int levels) {
  check_levels(levels);
  std::vector<double> out(encoded_size(p.size(), levels));
  for (std::size_t i = 0; i < p.size(); ++i) encode_scalar(p[i], levels, out.data() + 2 * levels * i);
  return out;
}

Tensor positional_encode(const Tensor& x, int levels) {
  check_levels(levels);
  const std::size_t width = encoded_size(x.cols(), levels);
  Tensor out(x.rows(), width);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* in = x.row_ptr(r);
    double* dst = out.row_ptr(r);
    for (std::size_t c = 0; c < x.cols(); ++c) encode_scalar(in[c], levels, dst + 2 * levels * c);
  }
  return out;
}

ad::Var positional_encode(ad::Var x, int levels) {
  Tensor out = positional_encode(x.value(), levels);
  return x.tape()->record("positional_encode", std::move(out), {x}, [levels](ad::BackwardContext& ctx) {
    Tensor* g = ctx.input_grad(0);
    if (g == nullptr) return;
    const Tensor& y = ctx.output();
    const Tensor& gy = ctx.output_grad();
    const std::size_t cols = ctx.input(0).cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const double* yr = y.row_ptr(r);
      const double* gr = gy.row_ptr(r);
      for (std::size_t c = 0; c < cols; ++c) {
        double acc = 0.0;
        for (int l = 0; l < levels; ++l) {
          const std::size_t k = 2 * levels * c + 2 * l;
          const double w = std::ldexp(std::numbers::pi, l);
          // d sin(wp) = w cos(wp), d cos(wp) = -w sin(wp)
          acc += w * (gr[k] * yr[k + 1] - gr[k + 1] * yr[k]);
        }
        (*g)(r, c) += acc;
      }
    }
  });
}

}  // namespace narf
